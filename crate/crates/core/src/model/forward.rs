//! Encoder/decoder assembly for all four modes.
//!
//! The forward pass returns a [`ForwardTrace`] exposing every tensor the
//! analysis tooling needs: per-layer encoder outputs, block outputs with
//! labeled consumer gates, contextual states, decoder cross-attention
//! weights, and the logits. Gates are identity nodes; closing one cuts a
//! single gradient path without changing the forward values.

use std::rc::Rc;

use crate::data::{Batch, Vocab};
use crate::model::config::{Mode, MscConfig};
use crate::model::params::{ContextCellParams, CtxFusionParams, DecBlockParams, EncLayerParams, ModelParams};
use crate::nn;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{GateId, Mask, Tape, Var};

/// Per-encoder-block gradient gates, one per consumer of the block output.
#[derive(Debug, Clone, Copy)]
pub struct ConsumerGates {
    /// Edge into the next encoder block (absent for the top block).
    pub next_encoder: Option<GateId>,
    /// Edge into the corresponding decoder block's cross-attention.
    pub decoder_cross: GateId,
    /// Edge into the context-cell update (contextual modes only).
    pub context_update: Option<GateId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consumer {
    NextEncoderBlock,
    DecoderCrossAttention,
    ContextUpdate,
}

impl ConsumerGates {
    pub fn list(&self) -> Vec<(Consumer, GateId)> {
        let mut out = Vec::new();
        if let Some(g) = self.next_encoder {
            out.push((Consumer::NextEncoderBlock, g));
        }
        out.push((Consumer::DecoderCrossAttention, self.decoder_cross));
        if let Some(g) = self.context_update {
            out.push((Consumer::ContextUpdate, g));
        }
        out
    }
}

#[derive(Debug)]
pub struct ForwardTrace {
    /// Next-token logits, (b, t_tgt, vocab).
    pub logits: Var,
    /// Encoder layer outputs H[n][l]; flat modes use a single pseudo-block.
    pub enc_layers: Vec<Vec<Var>>,
    /// Raw encoder block outputs B_e^n (block modes only).
    pub enc_blocks: Vec<Var>,
    /// Contextual states C^0..C^N (contextual mode only).
    pub context: Vec<Var>,
    /// Decoder block outputs.
    pub dec_blocks: Vec<Var>,
    /// Decoder cross-attention weights over source positions, per block,
    /// each (b, heads, t_tgt, t_src).
    pub cross_attn: Vec<Var>,
    /// Gradient gates on each encoder block output's consumer edges.
    pub consumer_gates: Vec<ConsumerGates>,
}

/// Dropout streams for one training step; absent at inference.
pub struct DropoutCtx {
    rng: Rng,
}

impl DropoutCtx {
    pub fn new(rng: Rng) -> Self {
        DropoutCtx { rng }
    }
}

/// Layer-level assembly context: a tape, the architecture config, and the
/// optional training-time dropout streams. The per-layer operations live
/// here so they can be driven one at a time as well as by `model_forward`.
pub struct ModelCtx<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    cfg: &'a MscConfig,
    dropout: Option<&'a mut DropoutCtx>,
}

impl<'a, S: Scalar> ModelCtx<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        cfg: &'a MscConfig,
        dropout: Option<&'a mut DropoutCtx>,
    ) -> Self {
        ModelCtx { tape, cfg, dropout }
    }

    pub fn tape(&mut self) -> &mut Tape<S> {
        self.tape
    }

    fn attn(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Rc<Mask>>,
        p: &crate::nn::AttentionParams<Var>,
    ) -> (Var, Var) {
        let drop = self.dropout.as_mut().map(|d| (&mut d.rng, self.cfg.dp_a));
        nn::multi_head_attention(self.tape, q, k, v, mask, p, self.cfg.heads, drop)
    }

    /// Residual-branch dropout.
    fn branch_dropout(&mut self, x: Var) -> Var {
        match self.dropout.as_mut() {
            Some(d) if self.cfg.dp_r > 0.0 => nn::apply_dropout(self.tape, x, &mut d.rng, self.cfg.dp_r),
            _ => x,
        }
    }

    /// Gated fusion of the two attention branches (or plain addition under
    /// the additive ablation): g*a_h + (1-g)*a_c.
    fn fuse(&mut self, a_h: Var, a_c: Var, fusion: &CtxFusionParams<Var>) -> Var {
        match &fusion.gate {
            None => self.tape.add(a_h, a_c),
            Some(gate) => {
                let lin_h = self.tape.matmul(a_h, gate.w1);
                let lin_c = self.tape.matmul(a_c, gate.w2);
                let lin = self.tape.add(lin_h, lin_c);
                let lin = self.tape.add(lin, gate.b);
                let g = self.tape.sigmoid(lin);
                let keep = self.tape.mul(g, a_h);
                let inv = nn::one_minus(self.tape, g);
                let other = self.tape.mul(inv, a_c);
                self.tape.add(keep, other)
            }
        }
    }

    /// One pre-norm encoder layer, optionally fused with the context state.
    pub fn encoder_layer(
        &mut self,
        h_prev: Var,
        context: Option<Var>,
        src_mask: &Rc<Mask>,
        p: &EncLayerParams<Var>,
    ) -> Var {
        let eps = S::from_f64(1e-6);
        let x = self.tape.layer_norm(h_prev, p.ln_attn.gamma, p.ln_attn.beta, eps);
        let (a_h, _) = self.attn(x, x, x, Some(src_mask.clone()), &p.attn_h);
        let branch = match (&p.ctx, context) {
            (Some(fusion), Some(c)) => {
                let (a_c, _) = self.attn(x, c, c, Some(src_mask.clone()), &fusion.attn_c);
                self.fuse(a_h, a_c, fusion)
            }
            (None, _) => a_h,
            (Some(_), None) => panic!("fused encoder layer called without a context state"),
        };
        let branch = self.branch_dropout(branch);
        let o = self.tape.add(branch, h_prev);
        let o_norm = self.tape.layer_norm(o, p.ln_ffn.gamma, p.ln_ffn.beta, eps);
        let f = nn::ffn(self.tape, o_norm, &p.ffn);
        let f = self.branch_dropout(f);
        self.tape.add(f, o)
    }

    /// One decoder block: causal self-attention, (fused) cross-attention
    /// over the encoder view, position-wise FFN.
    pub fn decoder_block(
        &mut self,
        h_prev: Var,
        enc_view: Var,
        context: Option<Var>,
        self_mask: &Rc<Mask>,
        src_mask: &Rc<Mask>,
        p: &DecBlockParams<Var>,
    ) -> (Var, Var) {
        let eps = S::from_f64(1e-6);
        let x = self.tape.layer_norm(h_prev, p.ln_self.gamma, p.ln_self.beta, eps);
        let (a_s, _) = self.attn(x, x, x, Some(self_mask.clone()), &p.attn_self);
        let a_s = self.branch_dropout(a_s);
        let o = self.tape.add(a_s, h_prev);

        let q = self.tape.layer_norm(o, p.ln_cross.gamma, p.ln_cross.beta, eps);
        let (a_h, weights) = self.attn(q, enc_view, enc_view, Some(src_mask.clone()), &p.attn_h);
        let branch = match (&p.ctx, context) {
            (Some(fusion), Some(c)) => {
                let (a_c, _) = self.attn(q, c, c, Some(src_mask.clone()), &fusion.attn_c);
                self.fuse(a_h, a_c, fusion)
            }
            (None, _) => a_h,
            (Some(_), None) => panic!("fused decoder block called without a context state"),
        };
        let branch = self.branch_dropout(branch);
        let s = self.tape.add(branch, o);

        let s_norm = self.tape.layer_norm(s, p.ln_ffn.gamma, p.ln_ffn.beta, eps);
        let f = nn::ffn(self.tape, s_norm, &p.ffn);
        let f = self.branch_dropout(f);
        (self.tape.add(f, s), weights)
    }

    /// Iterate one encoder block: the layer function applied M_n times.
    pub fn encoder_block(
        &mut self,
        b_prev: Var,
        context: Option<Var>,
        src_mask: &Rc<Mask>,
        layers: &[EncLayerParams<Var>],
    ) -> Var {
        assert!(!layers.is_empty(), "encoder block needs at least one layer");
        let mut stream = b_prev;
        for layer in layers {
            stream = self.encoder_layer(stream, context, src_mask, layer);
        }
        stream
    }

    /// Advance the contextual state with a block output.
    pub fn context_update(&mut self, c_prev: Var, block_out: Var, cell: &ContextCellParams<Var>) -> Var {
        match cell {
            ContextCellParams::Gru(p) => nn::gru_cell(self.tape, c_prev, block_out, p),
            ContextCellParams::FfnCell { ln, ffn } => {
                let eps = S::from_f64(1e-6);
                let sum = self.tape.add(c_prev, block_out);
                let x = self.tape.layer_norm(sum, ln.gamma, ln.beta, eps);
                let f = nn::ffn(self.tape, x, ffn);
                self.tape.add(f, c_prev)
            }
        }
    }
}

/// Run the model teacher-forced on a batch.
///
/// `params` must be bound to `tape`; `dropout` enables the training-time
/// dropout streams. Sequence lengths must fit `cfg.max_len`.
pub fn model_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<Var>,
    cfg: &MscConfig,
    batch: &Batch,
    dropout: Option<&mut DropoutCtx>,
) -> ForwardTrace {
    assert!(batch.src_len > 0 && batch.tgt_len > 0, "empty source or target in batch");
    assert!(
        batch.src_len <= cfg.max_len && batch.tgt_len <= cfg.max_len,
        "sequence length ({}, {}) exceeds max_len {}",
        batch.src_len,
        batch.tgt_len,
        cfg.max_len
    );
    let b = batch.batch;
    let (ts, tt) = (batch.src_len, batch.tgt_len);
    let mode = cfg.effective_mode();
    let has_ctx = mode == Mode::Msc;

    let src_mask = Rc::new(nn::key_padding_mask(&batch.src, b, ts, Vocab::PAD));
    let self_mask = Rc::new(nn::causal_padding_mask(&batch.tgt_in, b, tt, Vocab::PAD));

    let mut ctx = ModelCtx { tape, cfg, dropout };

    let src_emb = nn::embed(ctx.tape, params.embedding, &batch.src, b, ts);
    let tgt_emb = nn::embed(ctx.tape, params.embedding, &batch.tgt_in, b, tt);

    let mut enc_layers: Vec<Vec<Var>> = Vec::new();
    let mut enc_blocks: Vec<Var> = Vec::new();
    let mut consumer_gates: Vec<ConsumerGates> = Vec::new();
    let mut context: Vec<Var> = Vec::new();
    // One normalized view of the encoder per decoder block.
    let mut enc_views: Vec<Var> = Vec::new();
    let eps = S::from_f64(1e-6);

    if mode.is_flat() {
        // Flat stack; the decoder attends the closing-normalized top.
        let mut stream = src_emb;
        let mut outputs = Vec::new();
        for block in &params.enc_blocks {
            for layer in block {
                stream = ctx.encoder_layer(stream, None, &src_mask, layer);
                outputs.push(stream);
            }
        }
        enc_layers.push(outputs);
        enc_blocks.push(stream);
        let top =
            ctx.tape.layer_norm(stream, params.enc_ln_out.gamma, params.enc_ln_out.beta, eps);
        enc_views = vec![top; cfg.n_blocks];
    } else {
        let mut stream = src_emb;
        if has_ctx {
            context.push(src_emb); // C^0 is the source embedding output
        }
        let n_blocks = cfg.n_blocks;
        for (n, block) in params.enc_blocks.iter().enumerate() {
            let block_context = has_ctx.then(|| context[n]);
            let mut outputs = Vec::new();
            for layer in block {
                stream = ctx.encoder_layer(stream, block_context, &src_mask, layer);
                outputs.push(stream);
            }
            enc_layers.push(outputs);
            let block_out = stream;
            enc_blocks.push(block_out);

            // Labeled consumer edges of B_e^n.
            let g_dec = ctx.tape.new_gate();
            let for_dec = ctx.tape.gate(block_out, g_dec);
            let view = ctx.tape.layer_norm(
                for_dec,
                params.enc_ln_out.gamma,
                params.enc_ln_out.beta,
                eps,
            );
            enc_views.push(view);

            let g_next = if n + 1 < n_blocks {
                let g = ctx.tape.new_gate();
                stream = ctx.tape.gate(block_out, g);
                Some(g)
            } else {
                None
            };

            let g_ctx = if has_ctx {
                let g = ctx.tape.new_gate();
                let for_ctx = ctx.tape.gate(block_out, g);
                let cell = if cfg.ablations.per_block_gru {
                    &params.context_cells[n]
                } else {
                    &params.context_cells[0]
                };
                let next_context = ctx.context_update(context[n], for_ctx, cell);
                context.push(next_context);
                Some(g)
            } else {
                None
            };

            consumer_gates.push(ConsumerGates {
                next_encoder: g_next,
                decoder_cross: g_dec,
                context_update: g_ctx,
            });
        }
    }

    let mut dec_blocks = Vec::new();
    let mut cross_attn = Vec::new();
    let mut dstream = tgt_emb;
    for (n, block) in params.dec_blocks.iter().enumerate() {
        // Decoder block n consumes C^{n+1} (the state updated with B_e^{n+1}).
        let block_context = (has_ctx && block.ctx.is_some()).then(|| context[n + 1]);
        let (next, weights) =
            ctx.decoder_block(dstream, enc_views[n], block_context, &self_mask, &src_mask, block);
        dstream = next;
        dec_blocks.push(dstream);
        cross_attn.push(weights);
    }

    let final_norm =
        ctx.tape.layer_norm(dstream, params.dec_ln_out.gamma, params.dec_ln_out.beta, eps);
    // Tied output projection: logits = H . E^T.
    let logits = ctx.tape.matmul_bt(final_norm, params.embedding);
    debug_assert_eq!(ctx.tape.shape(logits), &[b, tt, cfg.vocab_size]);

    ForwardTrace {
        logits,
        enc_layers,
        enc_blocks,
        context,
        dec_blocks,
        cross_attn,
        consumer_gates,
    }
}
