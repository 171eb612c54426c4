//! Gradient-flow instrumentation: per-layer norm tracing and per-consumer
//! decomposition of the gradient arriving at each encoder block output.

use crate::data::{Batch, Vocab};
use crate::error::{Error, Result};
use crate::model::{model_forward, Consumer, ModelParams, MscConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One row of the gradient-norm trace: block and layer are 1-based; flat
/// modes report a single pseudo-block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormRow {
    pub step: u64,
    pub block: usize,
    pub layer: usize,
    /// L2 norm of d(loss)/d(layer output).
    pub act_grad_norm: f64,
    /// L2 norm over the layer's concatenated parameter gradients.
    pub param_grad_norm: f64,
}

pub fn grad_norms_to_csv(rows: &[GradNormRow]) -> String {
    let mut out = String::from("step,block,layer,act_grad_norm,param_grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.block, r.layer, r.act_grad_norm, r.param_grad_norm
        ));
    }
    out
}

/// Collect per-encoder-layer gradient norms after a backward pass.
/// Panics if backward has not run on this tape.
pub fn record_grad_norms(
    tape: &Tape<f64>,
    trace: &crate::model::ForwardTrace,
    bound: &ModelParams<Var>,
    step: u64,
) -> Vec<GradNormRow> {
    assert!(
        tape.grad(trace.logits).is_some(),
        "record_grad_norms called before backward on this tape"
    );
    let named = bound.named_leaves();
    // Encoder layer name prefixes in depth order. The trace enumerates layers
    // in the same order, so flat modes (one pseudo-block in the trace, block
    // names on the parameters) line up by position.
    let layer_keys: Vec<(usize, usize)> = named
        .iter()
        .filter_map(|(name, _)| parse_enc_layer(name))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows = Vec::new();
    let mut depth = 0usize;
    for (n, layers) in trace.enc_layers.iter().enumerate() {
        for (l, &h) in layers.iter().enumerate() {
            let (bn, bl) = layer_keys[depth];
            depth += 1;
            let prefix = format!("enc.{}.{}.", bn, bl);
            let mut sq = 0.0;
            for (name, &var) in &named {
                if name.starts_with(&prefix) {
                    if let Some(g) = tape.grad(var) {
                        sq += g.iter().map(|v| v * v).sum::<f64>();
                    }
                }
            }
            rows.push(GradNormRow {
                step,
                block: n + 1,
                layer: l + 1,
                act_grad_norm: tape.grad_tensor(h).l2_norm(),
                param_grad_norm: sq.sqrt(),
            });
        }
    }
    rows
}

fn parse_enc_layer(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("enc.")?;
    let mut parts = rest.split('.');
    let n: usize = parts.next()?.parse().ok()?;
    let l: usize = parts.next()?.parse().ok()?;
    Some((n, l))
}

/// Per-consumer gradient contributions to one encoder block output.
#[derive(Debug)]
pub struct Decomposition {
    /// 1-based block index.
    pub block: usize,
    pub contributions: Vec<(Consumer, Tensor<f64>)>,
    pub full: Tensor<f64>,
    /// ||full - sum(contributions)|| / ||full||.
    pub relative_residual: f64,
}

/// Decompose d(loss)/d(B_e^n) into the per-consumer path contributions by
/// closing all but one of the block's consumer gates per backward run.
/// Requires a block mode (BSC or MSC). `block` is 1-based.
pub fn grad_path_decompose(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    batch: &Batch,
    block: usize,
    label_smoothing: f64,
) -> Result<Decomposition> {
    if cfg.effective_mode().is_flat() {
        return Err(Error::config("mode", "gradient decomposition needs bsc or msc mode"));
    }
    if block == 0 || block > cfg.n_blocks {
        return Err(Error::config(
            "block",
            format!("{} out of range 1..={}", block, cfg.n_blocks),
        ));
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = model_forward(&mut tape, &bound, cfg, batch, None);
    let loss = crate::train::label_smoothed_cross_entropy(
        &mut tape,
        trace.logits,
        &batch.tgt_out,
        Vocab::PAD,
        label_smoothing,
    );

    let probe = trace.enc_blocks[block - 1];
    let gates = trace.consumer_gates[block - 1].list();

    // Full gradient with every path open.
    tape.open_all_gates();
    tape.backward(loss);
    let full = tape.grad_tensor(probe);

    let mut contributions = Vec::new();
    for &(consumer, _) in &gates {
        tape.zero_grads();
        for &(other, gate) in &gates {
            tape.set_gate(gate, other == consumer);
        }
        tape.backward(loss);
        contributions.push((consumer, tape.grad_tensor(probe)));
    }
    tape.open_all_gates();

    let mut sum = vec![0.0; full.numel()];
    for (_, c) in &contributions {
        for (s, &v) in sum.iter_mut().zip(&c.values) {
            *s += v;
        }
    }
    let full_norm = full.l2_norm();
    let resid: f64 = sum
        .iter()
        .zip(&full.values)
        .map(|(s, f)| (s - f) * (s - f))
        .sum::<f64>()
        .sqrt();
    let relative_residual = if full_norm > 0.0 { resid / full_norm } else { resid };

    Ok(Decomposition { block, contributions, full, relative_residual })
}

/// Gradient at a block output with every consumer gate closed: must be zero.
pub fn grad_with_all_consumers_stopped(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    batch: &Batch,
    block: usize,
) -> Result<Tensor<f64>> {
    if cfg.effective_mode().is_flat() {
        return Err(Error::config("mode", "gradient decomposition needs bsc or msc mode"));
    }
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = model_forward(&mut tape, &bound, cfg, batch, None);
    let loss = crate::train::label_smoothed_cross_entropy(
        &mut tape,
        trace.logits,
        &batch.tgt_out,
        Vocab::PAD,
        0.1,
    );
    for (_, gate) in trace.consumer_gates[block - 1].list() {
        tape.set_gate(gate, false);
    }
    tape.backward(loss);
    Ok(tape.grad_tensor(trace.enc_blocks[block - 1]))
}

/// Min/max ratio over per-layer activation-gradient norms at initialization;
/// the balance figure the gradient-flow comparison uses.
pub fn activation_norm_ratio(rows: &[GradNormRow]) -> f64 {
    let norms: Vec<f64> = rows.iter().map(|r| r.act_grad_norm).collect();
    let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return 0.0;
    }
    min / max
}
