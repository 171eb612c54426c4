//! The training loop: forward, backward, Adam, metrics, checkpoints.

use std::path::{Path, PathBuf};

use crate::data::{batch_by_tokens, epoch_order, Batch, Pair, Vocab};
use crate::error::{Error, Result};
use crate::model::{model_forward, DropoutCtx, ForwardTrace, ModelParams, MscConfig};
use crate::rng::{sub_seed_indexed, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::checkpoint::Checkpoint;
use crate::train::loss::{l2_penalty, label_smoothed_cross_entropy};
use crate::train::optim::{adam_step, lr_schedule, AdamHyper, OptimState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub label_smoothing: f64,
    pub warmup_steps: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2_lambda: f64,
    pub tokens_per_batch: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub keep_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label_smoothing: 0.1,
            warmup_steps: 4000,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            l2_lambda: 0.0,
            tokens_per_batch: 2048,
            seed: 1,
            checkpoint_every: 200,
            keep_last: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", format!("{} outside [0, 1)", self.label_smoothing)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be at least 1"));
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::config("l2_lambda", "must be nonnegative"));
        }
        if self.tokens_per_batch == 0 {
            return Err(Error::config("tokens_per_batch", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if self.keep_last == 0 {
            return Err(Error::config("keep_last", "must be positive"));
        }
        Ok(())
    }

    /// Handle a training key from the shared config file. Returns false for
    /// keys that are not training settings.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::model::config::{parse_f64, parse_u64, parse_usize};
        match key {
            "label_smoothing" => self.label_smoothing = parse_f64(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_usize(key, value)?,
            "max_steps" => self.max_steps = parse_u64(key, value)?,
            "beta1" => self.beta1 = parse_f64(key, value)?,
            "beta2" => self.beta2 = parse_f64(key, value)?,
            "adam_eps" => self.adam_eps = parse_f64(key, value)?,
            "l2_lambda" => self.l2_lambda = parse_f64(key, value)?,
            "tokens_per_batch" => self.tokens_per_batch = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_u64(key, value)?,
            "keep_last" => self.keep_last = parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Parse a config file holding both architecture and training keys.
pub fn parse_full_config(text: &str) -> Result<(MscConfig, TrainConfig)> {
    let mut tc = TrainConfig::default();
    let cfg = MscConfig::parse(text, &mut |key, value| tc.apply_key(key, value))?;
    tc.validate()?;
    Ok((cfg, tc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,lr,tokens\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.tokens));
    }
    out
}

/// Everything an observer sees right after backward on one step. The
/// parameters are the pre-update values for this step. Returning false
/// stops training after the step completes (a final checkpoint is still
/// written when checkpointing is on).
pub struct StepObservation<'a> {
    pub step: u64,
    pub tape: &'a Tape<f64>,
    pub trace: &'a ForwardTrace,
    pub bound: &'a ModelParams<Var>,
    pub params: &'a ModelParams<Tensor<f64>>,
    pub batch: &'a Batch,
    pub loss: f64,
}

pub struct TrainResult {
    pub params: ModelParams<Tensor<f64>>,
    pub state: OptimState,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run `max_steps` of training. Checkpoints (when `out_dir` is given) are
/// written every `checkpoint_every` steps and at the final step, pruned to
/// `keep_last`; a NaN abort leaves the last good checkpoint on disk.
pub fn train_loop(
    cfg: &MscConfig,
    tc: &TrainConfig,
    pairs: &[Pair],
    out_dir: Option<&Path>,
    mut observer: Option<&mut dyn FnMut(&StepObservation) -> bool>,
) -> Result<TrainResult> {
    cfg.validate()?;
    tc.validate()?;
    if pairs.is_empty() {
        return Err(Error::format("empty training set".to_string()));
    }
    let batches = batch_by_tokens(pairs, tc.tokens_per_batch)?;
    let mut params = ModelParams::<Tensor<f64>>::init(cfg, tc.seed);
    let mut state = OptimState::new(&params);
    let mut metrics = Vec::new();
    let mut saved: Vec<(u64, PathBuf)> = Vec::new();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, &e))?;
    }
    let save = |params: &ModelParams<Tensor<f64>>,
                state: &OptimState,
                step: u64,
                saved: &mut Vec<(u64, PathBuf)>|
     -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        let path = dir.join(format!("ckpt-{step}.msck"));
        Checkpoint::new(cfg.clone(), step, tc.seed, params.clone(), Some(state.clone())).save(&path)?;
        saved.push((step, path));
        while saved.len() > tc.keep_last {
            let (_, old) = saved.remove(0);
            std::fs::remove_file(&old).ok();
        }
        Ok(())
    };

    if tc.max_steps == 0 {
        save(&params, &state, 0, &mut saved)?;
        return Ok(TrainResult {
            params,
            state,
            metrics,
            checkpoints: saved.into_iter().map(|(_, p)| p).collect(),
        });
    }

    let mut order: Vec<usize> = Vec::new();
    for step in 1..=tc.max_steps {
        let pos = ((step - 1) % batches.len() as u64) as usize;
        if pos == 0 {
            let epoch = (step - 1) / batches.len() as u64;
            order = epoch_order(batches.len(), tc.seed, epoch);
        }
        let batch = &batches[order[pos]];

        let mut tape: Tape<f64> = Tape::new();
        let bound = params.bind(&mut tape);
        let mut dropout = DropoutCtx::new(Rng::new(sub_seed_indexed(tc.seed, "dropout", step)));
        let trace = model_forward(&mut tape, &bound, cfg, batch, Some(&mut dropout));
        let mut loss = label_smoothed_cross_entropy(
            &mut tape,
            trace.logits,
            &batch.tgt_out,
            Vocab::PAD,
            tc.label_smoothing,
        );
        if let Some(penalty) = l2_penalty(&mut tape, &bound, tc.l2_lambda) {
            loss = tape.add(loss, penalty);
        }
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::train(format!(
                "step {}: loss {} is not finite (last good checkpoint retained)",
                step, loss_val
            )));
        }
        tape.backward(loss);

        let mut keep_going = true;
        if let Some(obs) = observer.as_mut() {
            keep_going = obs(&StepObservation {
                step,
                tape: &tape,
                trace: &trace,
                bound: &bound,
                params: &params,
                batch,
                loss: loss_val,
            });
        }

        let grads: Vec<Vec<f64>> = bound
            .named_leaves()
            .iter()
            .map(|(_, &var)| tape.grad_tensor(var).values)
            .collect();
        let lr = lr_schedule(step, cfg.d_model, tc.warmup_steps);
        adam_step(&mut params, &grads, &mut state, lr, &tc.hyper())?;

        metrics.push(MetricsRow { step, loss: loss_val, lr, tokens: batch.target_tokens() });

        if step % tc.checkpoint_every == 0 || step == tc.max_steps || !keep_going {
            save(&params, &state, step, &mut saved)?;
        }
        if !keep_going {
            break;
        }
    }

    Ok(TrainResult {
        params,
        state,
        metrics,
        checkpoints: saved.into_iter().map(|(_, p)| p).collect(),
    })
}

/// One row of an ablation comparison.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flag: String,
    pub enabled: bool,
    pub final_loss: f64,
    pub token_accuracy: f64,
}

pub fn set_ablation(cfg: &MscConfig, flag: &str, on: bool) -> Result<MscConfig> {
    let mut c = cfg.clone();
    match flag {
        "fusion_additive" => c.ablations.fusion_additive = on,
        "context_cell_as_ffn" => c.ablations.context_cell_as_ffn = on,
        "remove_cxt_enc_attention" => c.ablations.remove_cxt_enc_attention = on,
        "remove_contextual" => c.ablations.remove_contextual = on,
        "per_block_gru" => c.ablations.per_block_gru = on,
        other => return Err(Error::config("flag", format!("unknown ablation '{}'", other))),
    }
    Ok(c)
}

/// Twin training runs with one ablation flag off/on, identical otherwise.
pub fn ablate_compare(
    cfg: &MscConfig,
    tc: &TrainConfig,
    pairs: &[Pair],
    flag: &str,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for on in [false, true] {
        let variant = set_ablation(cfg, flag, on)?;
        let result = train_loop(&variant, tc, pairs, None, None)?;
        let final_loss = result.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
        let token_accuracy = token_accuracy(&variant, &result.params, pairs, tc.tokens_per_batch)?;
        rows.push(AblationRow { flag: flag.to_string(), enabled: on, final_loss, token_accuracy });
    }
    Ok(rows)
}

/// Teacher-forced token accuracy of `params` on `pairs`: fraction of non-pad
/// target positions whose argmax logit equals the gold token.
pub fn token_accuracy(cfg: &MscConfig, params: &ModelParams<Tensor<f64>>, pairs: &[Pair], tokens_per_batch: usize) -> Result<f64> {
    let batches = batch_by_tokens(pairs, tokens_per_batch)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let mut tape: Tape<f64> = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let trace = model_forward(&mut tape, &bound, cfg, batch, None);
        let logits = tape.value(trace.logits);
        let vocab = cfg.vocab_size;
        for (pos, &gold) in batch.tgt_out.iter().enumerate() {
            if gold == Vocab::PAD {
                continue;
            }
            let row = &logits.values[pos * vocab..(pos + 1) * vocab];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            total += 1;
            if best == gold {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
