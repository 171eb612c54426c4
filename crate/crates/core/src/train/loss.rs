//! Training losses: label-smoothed cross entropy and the encoder L2 penalty.

use crate::model::{is_l2_regularized, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean negative log-likelihood over non-pad target tokens, under the
/// smoothed distribution that puts 1-eps on the gold id and eps/(V-1) on
/// every other id. eps = 0 is plain cross entropy.
pub fn label_smoothed_cross_entropy(
    tape: &mut Tape<f64>,
    logits: Var,
    targets: &[usize],
    pad: usize,
    eps: f64,
) -> Var {
    assert!((0.0..1.0).contains(&eps), "label smoothing {} outside [0, 1)", eps);
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 3, "logits must be (b, t, vocab), got {:?}", shape);
    let vocab = shape[2];
    assert_eq!(targets.len(), shape[0] * shape[1], "target count vs logits shape {:?}", shape);

    let logp = tape.log_softmax(logits, 2);

    let mut dist = vec![0.0f64; targets.len() * vocab];
    let mut tokens = 0usize;
    let off_gold = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    for (pos, &gold) in targets.iter().enumerate() {
        if gold == pad {
            continue;
        }
        assert!(gold < vocab, "target id {} at position {} exceeds vocab {}", gold, pos, vocab);
        tokens += 1;
        let row = &mut dist[pos * vocab..(pos + 1) * vocab];
        for v in row.iter_mut() {
            *v = off_gold;
        }
        row[gold] = 1.0 - eps;
    }
    assert!(tokens > 0, "no non-pad target tokens in batch");

    let target_dist = tape.constant(Tensor::new(shape, dist));
    let weighted = tape.mul(logp, target_dist);
    let total = tape.sum(weighted);
    tape.scale(total, -1.0 / tokens as f64)
}

/// lambda * sum of squared entries of every L2-regularized parameter
/// (encoder-side weight matrices only). None when lambda = 0.
pub fn l2_penalty(tape: &mut Tape<f64>, bound: &ModelParams<Var>, lambda: f64) -> Option<Var> {
    assert!(lambda >= 0.0, "l2_lambda must be nonnegative");
    if lambda == 0.0 {
        return None;
    }
    let mut acc: Option<Var> = None;
    let leaves = bound.named_leaves();
    for (name, &var) in &leaves {
        if is_l2_regularized(name, tape.shape(var).len()) {
            let sq = tape.mul(var, var);
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
    }
    acc.map(|a| tape.scale(a, lambda))
}
