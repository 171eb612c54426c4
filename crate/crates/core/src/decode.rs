//! Autoregressive inference: greedy decoding and beam search with the
//! ((5+len)/6)^alpha length penalty.

use crate::data::{Batch, Vocab};
use crate::model::{model_forward, ModelParams, MscConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, including the terminal EOS when one was produced.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability of the emitted tokens.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Translation surface: the tokens without the terminal EOS.
    pub fn surface(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&id) if id == Vocab::EOS => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Length-penalized ranking score.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// lp(len) = ((5 + len) / 6)^alpha. Alpha 0 disables the penalty.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Log-softmax over one logits row, in plain f64.
fn log_probs(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// One teacher-forcing step over a set of prefixes sharing one source:
/// next-token log-probabilities per prefix.
fn step_log_probs(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    src: &[usize],
    prefixes: &[Vec<usize>],
) -> Vec<Vec<f64>> {
    let b = prefixes.len();
    let t = prefixes[0].len() + 1;
    let mut tgt_in = Vec::with_capacity(b * t);
    for p in prefixes {
        assert_eq!(p.len() + 1, t, "beam prefixes must share a length");
        tgt_in.push(Vocab::BOS);
        tgt_in.extend_from_slice(p);
    }
    let mut src_ids = Vec::with_capacity(b * src.len());
    for _ in 0..b {
        src_ids.extend_from_slice(src);
    }
    let batch = Batch {
        batch: b,
        src_len: src.len(),
        tgt_len: t,
        src: src_ids,
        tgt_in,
        tgt_out: vec![Vocab::PAD; b * t],
    };
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let trace = model_forward(&mut tape, &bound, cfg, &batch, None);
    let logits = tape.value(trace.logits);
    let v = cfg.vocab_size;
    (0..b)
        .map(|row| {
            let base = (row * t + (t - 1)) * v;
            log_probs(&logits.values[base..base + v])
        })
        .collect()
}

/// Argmax with ties broken by the lowest token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: the argmax chain until EOS or `max_len` tokens.
pub fn greedy_decode(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    src: &[usize],
    max_len: usize,
) -> Hypothesis {
    assert!(!src.is_empty(), "cannot decode an empty source");
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut tokens: Vec<usize> = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = &step_log_probs(cfg, params, src, &[tokens.clone()])[0];
        let next = argmax(lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == Vocab::EOS || tokens.len() >= max_len {
            return Hypothesis { tokens, log_prob, finished: true };
        }
    }
}

/// Standard beam search. Finished hypotheses move to a completed pool; the
/// search stops once no active hypothesis can beat the best completed score
/// (log-probs only decrease, the length penalty only grows). Returns the
/// n-best list, best first; ties break toward the lexicographically smaller
/// token sequence.
pub fn beam_search(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    src: &[usize],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Vec<Hypothesis> {
    assert!(!src.is_empty(), "cannot decode an empty source");
    assert!(beam >= 1, "beam width must be at least 1");
    assert!(max_len >= 1, "max_len must be at least 1");
    assert!(alpha >= 0.0, "length penalty exponent must be nonnegative");

    let mut active: Vec<Hypothesis> =
        vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        let prefixes: Vec<Vec<usize>> = active.iter().map(|h| h.tokens.clone()).collect();
        let rows = step_log_probs(cfg, params, src, &prefixes);

        let mut candidates: Vec<Hypothesis> = Vec::new();
        for (h, row) in active.iter().zip(&rows) {
            for (tok, &lp) in row.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: tok == Vocab::EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });

        active.clear();
        for c in candidates.into_iter().take(beam) {
            if c.finished || c.tokens.len() >= max_len {
                completed.push(Hypothesis { finished: true, ..c });
            } else {
                active.push(c);
            }
        }

        // Upper bound of any active continuation: log-prob cannot rise, the
        // penalty divisor cannot shrink below lp(max_len).
        if let Some(best) = completed
            .iter()
            .map(|h| h.score(alpha))
            .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        {
            active.retain(|h| h.log_prob / length_penalty(max_len, alpha) > best);
        }
    }

    completed.sort_by(|a, b| {
        b.score(alpha)
            .partial_cmp(&a.score(alpha))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    completed.truncate(beam.max(1));
    completed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelParams};

    fn tiny_model(seed: u64) -> (MscConfig, ModelParams<Tensor<f64>>) {
        let mut cfg = MscConfig::toy(10);
        cfg.n_blocks = 2;
        cfg.layers_per_block = vec![1, 1];
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.heads = 2;
        cfg.mode = Mode::Msc;
        let params = ModelParams::init(&cfg, seed);
        (cfg, params)
    }

    #[test]
    fn length_penalty_closed_form() {
        assert!((length_penalty(4, 1.0) - 1.5).abs() < 1e-15);
        assert!((length_penalty(8, 1.0) - 13.0 / 6.0).abs() < 1e-15);
        assert_eq!(length_penalty(17, 0.0), 1.0);
    }

    #[test]
    fn worked_ranking_example() {
        // (logP=-2, len=4) vs (logP=-2.2, len=8) at alpha=1: the longer
        // hypothesis wins, scores -1.333... vs -1.01538...
        let short = Hypothesis { tokens: vec![4; 4], log_prob: -2.0, finished: true };
        let long = Hypothesis { tokens: vec![4; 8], log_prob: -2.2, finished: true };
        let s_short = short.score(1.0);
        let s_long = long.score(1.0);
        assert!((s_short - (-4.0 / 3.0)).abs() < 1e-6);
        assert!((s_long - (-1.0153846153846153)).abs() < 1e-6);
        assert!(s_long > s_short);
    }

    #[test]
    fn alpha_zero_score_is_raw_log_prob() {
        let h = Hypothesis { tokens: vec![4, 5, 6], log_prob: -2.5, finished: true };
        assert_eq!(h.score(0.0), -2.5);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (cfg, params) = tiny_model(21);
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..20 {
            let len = 1 + rng.below(5);
            let src: Vec<usize> = (0..len).map(|_| 4 + rng.below(6)).collect();
            let g = greedy_decode(&cfg, &params, &src, 12);
            let b = beam_search(&cfg, &params, &src, 1, 1.0, 12);
            assert_eq!(g.tokens, b[0].tokens);
            assert!((g.log_prob - b[0].log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn eos_biased_model_emits_empty_translation() {
        // Pin the decoder output to a constant via the closing layer norm
        // (gamma = 0, beta = 1) and bias the tied projection so EOS wins at
        // every position: the hypothesis is a lone EOS, surface length 0.
        let (cfg, params) = tiny_model(22);
        let d = cfg.d_model;
        let params = params.map_named(&mut |name, t: &Tensor<f64>| match name {
            "dec.ln_out.gamma" => Tensor::zeros(&t.shape),
            "dec.ln_out.beta" => Tensor::full(&t.shape, 1.0),
            "embed.table" => {
                let mut t = t.clone();
                for row in 0..cfg.vocab_size {
                    let v = if row == Vocab::EOS { 1.0 } else { -1.0 };
                    for x in &mut t.values[row * d..(row + 1) * d] {
                        *x = v;
                    }
                }
                t
            }
            _ => t.clone(),
        });
        let h = greedy_decode(&cfg, &params, &[4, 5], 8);
        assert_eq!(h.tokens, vec![Vocab::EOS]);
        assert_eq!(h.surface().len(), 0);
        assert!(h.finished);
    }

    #[test]
    fn larger_beam_never_scores_worse() {
        let (cfg, params) = tiny_model(23);
        let mut rng = crate::rng::Rng::new(31);
        for _ in 0..5 {
            let len = 2 + rng.below(4);
            let src: Vec<usize> = (0..len).map(|_| 4 + rng.below(6)).collect();
            let mut prev = f64::NEG_INFINITY;
            for beam in 1..=4 {
                let best = &beam_search(&cfg, &params, &src, beam, 1.0, 10)[0];
                let s = best.score(1.0);
                assert!(s >= prev - 1e-12, "beam {} score {} < {}", beam, s, prev);
                prev = s;
            }
        }
    }

    #[test]
    fn emitted_ids_are_in_vocab_and_eos_terminal() {
        let (cfg, params) = tiny_model(24);
        let hyps = beam_search(&cfg, &params, &[4, 5, 6], 3, 1.0, 10);
        for h in &hyps {
            for &t in &h.tokens {
                assert!(t < cfg.vocab_size);
            }
            let eos_count = h.tokens.iter().filter(|&&t| t == Vocab::EOS).count();
            assert!(eos_count <= 1);
            if eos_count == 1 {
                assert_eq!(*h.tokens.last().unwrap(), Vocab::EOS);
            }
        }
    }

    #[test]
    #[should_panic(expected = "empty source")]
    fn empty_source_is_a_contract_violation() {
        let (cfg, params) = tiny_model(25);
        beam_search(&cfg, &params, &[], 2, 1.0, 5);
    }
}
