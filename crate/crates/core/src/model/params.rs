//! The model parameter tree.
//!
//! `ModelParams<T>` is generic over the leaf payload: `Tensor<S>` for
//! storage, [`Var`](crate::tape::Var) once bound to a tape, shapes for
//! counting. `map_named` is the single source of truth for both structure
//! and naming; every traversal (initialization, checkpointing, optimizer
//! alignment, binding) goes through it, so orders can never diverge.
//!
//! Initialization seeds one RNG stream per parameter name. Two configs that
//! share a parameter name therefore initialize it identically under the same
//! seed, which is what the degeneration equivalences rely on.

use crate::model::config::MscConfig;
use crate::nn::{AttentionParams, FfnParams, GruParams, LayerNormParams};
use crate::rng::{sub_seed, Rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sigmoid gate mixing two attention branches, per position and channel.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub w1: T,
    pub w2: T,
    pub b: T,
}

impl<T> GateParams<T> {
    fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> GateParams<U> {
        GateParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }
}

/// Context-fusion half of a layer: attention over the contextual states plus
/// the fusion gate (absent under the additive-fusion ablation).
#[derive(Debug, Clone)]
pub struct CtxFusionParams<T> {
    pub attn_c: AttentionParams<T>,
    pub gate: Option<GateParams<T>>,
}

impl<T> CtxFusionParams<T> {
    fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> CtxFusionParams<U> {
        CtxFusionParams {
            attn_c: self.attn_c.map_named(&format!("{prefix}.attn_c"), f),
            gate: self.gate.as_ref().map(|g| g.map_named(&format!("{prefix}.gate"), f)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncLayerParams<T> {
    pub ln_attn: LayerNormParams<T>,
    pub attn_h: AttentionParams<T>,
    pub ctx: Option<CtxFusionParams<T>>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> EncLayerParams<T> {
    fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> EncLayerParams<U> {
        EncLayerParams {
            ln_attn: self.ln_attn.map_named(&format!("{prefix}.ln_attn"), f),
            attn_h: self.attn_h.map_named(&format!("{prefix}.attn_h"), f),
            ctx: self.ctx.as_ref().map(|c| c.map_named(prefix, f)),
            ln_ffn: self.ln_ffn.map_named(&format!("{prefix}.ln_ffn"), f),
            ffn: self.ffn.map_named(&format!("{prefix}.ffn"), f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecBlockParams<T> {
    pub ln_self: LayerNormParams<T>,
    pub attn_self: AttentionParams<T>,
    pub ln_cross: LayerNormParams<T>,
    pub attn_h: AttentionParams<T>,
    pub ctx: Option<CtxFusionParams<T>>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

impl<T> DecBlockParams<T> {
    fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> DecBlockParams<U> {
        DecBlockParams {
            ln_self: self.ln_self.map_named(&format!("{prefix}.ln_self"), f),
            attn_self: self.attn_self.map_named(&format!("{prefix}.attn_self"), f),
            ln_cross: self.ln_cross.map_named(&format!("{prefix}.ln_cross"), f),
            attn_h: self.attn_h.map_named(&format!("{prefix}.attn_h"), f),
            ctx: self.ctx.as_ref().map(|c| c.map_named(prefix, f)),
            ln_ffn: self.ln_ffn.map_named(&format!("{prefix}.ln_ffn"), f),
            ffn: self.ffn.map_named(&format!("{prefix}.ffn"), f),
        }
    }
}

/// The cell threading contextual state across blocks.
#[derive(Debug, Clone)]
pub enum ContextCellParams<T> {
    Gru(GruParams<T>),
    /// Ablation: residual FFN cell, C' = Ffn(Ln(C + B)) + C.
    FfnCell { ln: LayerNormParams<T>, ffn: FfnParams<T> },
}

impl<T> ContextCellParams<T> {
    fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> ContextCellParams<U> {
        match self {
            ContextCellParams::Gru(g) => ContextCellParams::Gru(g.map_named(&format!("{prefix}.gru"), f)),
            ContextCellParams::FfnCell { ln, ffn } => ContextCellParams::FfnCell {
                ln: ln.map_named(&format!("{prefix}.ffn_cell.ln"), f),
                ffn: ffn.map_named(&format!("{prefix}.ffn_cell.ffn"), f),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    /// Shared source/target embedding table; also the tied output projection.
    pub embedding: T,
    /// `enc_blocks[n][l]` is layer l of block n.
    pub enc_blocks: Vec<Vec<EncLayerParams<T>>>,
    /// Closing layer norm applied to encoder block outputs where the decoder
    /// consumes them.
    pub enc_ln_out: LayerNormParams<T>,
    pub dec_blocks: Vec<DecBlockParams<T>>,
    pub dec_ln_out: LayerNormParams<T>,
    /// Context cells: empty without contextual collaboration, one shared
    /// cell by default, one per block under the per-block ablation.
    pub context_cells: Vec<ContextCellParams<T>>,
}

impl<T> ModelParams<T> {
    /// Structure-and-name-preserving map. Traversal order is the canonical
    /// parameter order used everywhere (checkpoints, optimizer state).
    pub fn map_named<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f("embed.table", &self.embedding),
            enc_blocks: self
                .enc_blocks
                .iter()
                .enumerate()
                .map(|(n, layers)| {
                    layers
                        .iter()
                        .enumerate()
                        .map(|(l, layer)| layer.map_named(&format!("enc.{n}.{l}"), f))
                        .collect()
                })
                .collect(),
            enc_ln_out: self.enc_ln_out.map_named("enc.ln_out", f),
            dec_blocks: self
                .dec_blocks
                .iter()
                .enumerate()
                .map(|(n, block)| block.map_named(&format!("dec.{n}"), f))
                .collect(),
            dec_ln_out: self.dec_ln_out.map_named("dec.ln_out", f),
            context_cells: self
                .context_cells
                .iter()
                .enumerate()
                .map(|(k, cell)| cell.map_named(&format!("ctx.{k}"), f))
                .collect(),
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        self.map_named(&mut |_, t| f(t))
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&str, &'a T)) {
        self.map_named(&mut |name, t| {
            f(name, t);
        });
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |name, _| out.push(name.to_string()));
        out
    }

    /// Named leaves in canonical order.
    pub fn named_leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    /// Rebuild the structure from leaves in canonical order.
    pub fn unflatten<U: Clone>(&self, leaves: &[U]) -> ModelParams<U> {
        let mut it = leaves.iter();
        let out = self.map(&mut |_| it.next().expect("leaf count mismatch").clone());
        assert!(it.next().is_none(), "leaf count mismatch: extra leaves");
        out
    }
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    /// Zero-valued parameters with the shapes the config implies.
    pub fn build(cfg: &MscConfig) -> ModelParams<Tensor<S>> {
        let d = cfg.d_model;
        let dffn = cfg.d_ffn;
        let has_ctx = cfg.has_context();
        let gate = |_: ()| -> Option<GateParams<Tensor<S>>> {
            if cfg.ablations.fusion_additive {
                None
            } else {
                Some(GateParams {
                    w1: Tensor::zeros(&[d, d]),
                    w2: Tensor::zeros(&[d, d]),
                    b: Tensor::zeros(&[d]),
                })
            }
        };
        let attn = || AttentionParams {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
        };
        let ln = || LayerNormParams { gamma: Tensor::zeros(&[d]), beta: Tensor::zeros(&[d]) };
        let ffn = || FfnParams {
            w1: Tensor::zeros(&[d, dffn]),
            b1: Tensor::zeros(&[dffn]),
            w2: Tensor::zeros(&[dffn, d]),
            b2: Tensor::zeros(&[d]),
        };
        let ctx_fusion = || CtxFusionParams { attn_c: attn(), gate: gate(()) };

        let enc_blocks = cfg
            .layers_per_block
            .iter()
            .map(|&m| {
                (0..m)
                    .map(|_| EncLayerParams {
                        ln_attn: ln(),
                        attn_h: attn(),
                        ctx: has_ctx.then(ctx_fusion),
                        ln_ffn: ln(),
                        ffn: ffn(),
                    })
                    .collect()
            })
            .collect();

        let dec_blocks = (0..cfg.n_blocks)
            .map(|_| DecBlockParams {
                ln_self: ln(),
                attn_self: attn(),
                ln_cross: ln(),
                attn_h: attn(),
                ctx: (has_ctx && !cfg.ablations.remove_cxt_enc_attention).then(ctx_fusion),
                ln_ffn: ln(),
                ffn: ffn(),
            })
            .collect();

        let n_cells = if !has_ctx {
            0
        } else if cfg.ablations.per_block_gru {
            cfg.n_blocks
        } else {
            1
        };
        let context_cells = (0..n_cells)
            .map(|_| {
                if cfg.ablations.context_cell_as_ffn {
                    ContextCellParams::FfnCell { ln: ln(), ffn: ffn() }
                } else {
                    ContextCellParams::Gru(GruParams {
                        w_z: Tensor::zeros(&[d, d]),
                        u_z: Tensor::zeros(&[d, d]),
                        b_z: Tensor::zeros(&[d]),
                        w_r: Tensor::zeros(&[d, d]),
                        u_r: Tensor::zeros(&[d, d]),
                        b_r: Tensor::zeros(&[d]),
                        w_h: Tensor::zeros(&[d, d]),
                        u_h: Tensor::zeros(&[d, d]),
                        b_h: Tensor::zeros(&[d]),
                    })
                }
            })
            .collect();

        ModelParams {
            embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            enc_blocks,
            enc_ln_out: ln(),
            dec_blocks,
            dec_ln_out: ln(),
            context_cells,
        }
    }

    /// Xavier-uniform matrices, zero biases, unit layer-norm scales. Each
    /// parameter draws from its own name-derived stream of `seed`.
    pub fn init(cfg: &MscConfig, seed: u64) -> ModelParams<Tensor<S>> {
        let init_seed = sub_seed(seed, "init");
        let zero = ModelParams::<Tensor<S>>::build(cfg);
        zero.map_named(&mut |name, t: &Tensor<S>| init_tensor(name, t, init_seed))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    /// Fill values by name. Unknown or missing names are reported.
    pub fn load_named(&mut self, mut source: std::collections::BTreeMap<String, Tensor<S>>) -> crate::error::Result<()> {
        let mut missing = Vec::new();
        let loaded = self.map_named(&mut |name, t: &Tensor<S>| match source.remove(name) {
            Some(v) => {
                if v.shape != t.shape {
                    missing.push(format!("{} has shape {:?}, expected {:?}", name, v.shape, t.shape));
                    t.clone()
                } else {
                    v
                }
            }
            None => {
                missing.push(format!("{} absent", name));
                t.clone()
            }
        });
        if !missing.is_empty() {
            return Err(crate::error::Error::format(format!(
                "parameter mismatch: {}",
                missing.join("; ")
            )));
        }
        if let Some(extra) = source.keys().next() {
            return Err(crate::error::Error::format(format!("unexpected parameter '{}'", extra)));
        }
        *self = loaded;
        Ok(())
    }

    /// Register every parameter on a tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> ModelParams<Var> {
        self.map(&mut |t| tape.param(t))
    }

    /// Register every parameter as a constant (inference / analysis).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> ModelParams<Var> {
        self.map(&mut |t| {
            let mut c = t.clone();
            c.requires_grad = false;
            tape.leaf(c)
        })
    }
}

fn init_tensor<S: Scalar>(name: &str, t: &Tensor<S>, init_seed: u64) -> Tensor<S> {
    let mut rng = Rng::new(sub_seed(init_seed, name));
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let mut out = t.clone();
    if leaf == "gamma" {
        out.values = vec![S::one(); t.numel()];
    } else if t.rank() == 2 {
        let limit = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
        out.values = (0..t.numel()).map(|_| S::from_f64(rng.range(-limit, limit))).collect();
    } else {
        out.values = vec![S::zero(); t.numel()];
    }
    out
}

/// Whether a parameter belongs to the L2-regularized set: encoder-side weight
/// matrices (attention, FFN, gate, GRU), excluding biases, layer norms, the
/// decoder and the shared embedding.
pub fn is_l2_regularized(name: &str, rank: usize) -> bool {
    rank == 2 && (name.starts_with("enc.") || name.starts_with("ctx."))
}

/// Total parameter count for a config.
pub fn count_params(cfg: &MscConfig) -> usize {
    ModelParams::<Tensor<f64>>::build(cfg).count()
}

/// The parameter tree is identical across baseline/plain/BSC for one shape.
pub fn modes_share_params(a: &MscConfig, b: &MscConfig) -> bool {
    let pa = ModelParams::<Tensor<f64>>::build(a).names();
    let pb = ModelParams::<Tensor<f64>>::build(b).names();
    pa == pb
}
