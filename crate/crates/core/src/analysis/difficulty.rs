//! Sentence difficulty scoring and the four-way test split.
//!
//! The difficulty of a pair is s = mean + population std of its sequence
//! NLL over the last K checkpoints; plain (unsmoothed) NLL summed over the
//! target tokens, so longer sentences trend harder.

use crate::data::{Batch, Pair, Vocab};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelParams, MscConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyLabel {
    Simple,
    Ordinary,
    Difficult,
    Challenging,
}

impl DifficultyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyLabel::Simple => "Simple",
            DifficultyLabel::Ordinary => "Ordinary",
            DifficultyLabel::Difficult => "Difficult",
            DifficultyLabel::Challenging => "Challenging",
        }
    }

    /// File suffix for the split outputs.
    pub fn suffix(self) -> &'static str {
        match self {
            DifficultyLabel::Simple => "simple",
            DifficultyLabel::Ordinary => "ordinary",
            DifficultyLabel::Difficult => "difficult",
            DifficultyLabel::Challenging => "challenging",
        }
    }

    pub fn all() -> [DifficultyLabel; 4] {
        [
            DifficultyLabel::Simple,
            DifficultyLabel::Ordinary,
            DifficultyLabel::Difficult,
            DifficultyLabel::Challenging,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyRecord {
    pub id: usize,
    pub mean_nll: f64,
    pub std_nll: f64,
    pub score: f64,
    pub label: Option<DifficultyLabel>,
}

/// Sequence NLL: -log P(y|x) summed over the target tokens including EOS,
/// with no label smoothing.
pub fn sequence_nll(cfg: &MscConfig, params: &ModelParams<Tensor<f64>>, pair: &Pair) -> f64 {
    let batch = Batch::from_pairs(std::slice::from_ref(pair));
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let trace = model_forward(&mut tape, &bound, cfg, &batch, None);
    let logp = tape.log_softmax(trace.logits, 2);
    let values = &tape.value(logp).values;
    let v = cfg.vocab_size;
    let mut nll = 0.0;
    for (pos, &gold) in batch.tgt_out.iter().enumerate() {
        if gold != Vocab::PAD {
            nll -= values[pos * v + gold];
        }
    }
    nll
}

/// Mean, population standard deviation, and score s = mean + std.
pub fn difficulty_score(nlls: &[f64]) -> (f64, f64, f64) {
    assert!(!nlls.is_empty(), "difficulty score needs at least one checkpoint");
    let k = nlls.len() as f64;
    let mean = nlls.iter().sum::<f64>() / k;
    let var = nlls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    let std = var.sqrt();
    (mean, std, mean + std)
}

/// Score every pair under every checkpoint's parameters.
pub fn score_records(
    cfg: &MscConfig,
    checkpoints: &[ModelParams<Tensor<f64>>],
    pairs: &[Pair],
) -> Result<Vec<DifficultyRecord>> {
    if checkpoints.is_empty() {
        return Err(Error::format("difficulty scoring needs at least one checkpoint"));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(id, pair)| {
            let nlls: Vec<f64> =
                checkpoints.iter().map(|p| sequence_nll(cfg, p, pair)).collect();
            let (mean_nll, std_nll, score) = difficulty_score(&nlls);
            DifficultyRecord { id, mean_nll, std_nll, score, label: None }
        })
        .collect())
}

/// Sort ascending by score (ties by original id) and cut into `parts`
/// contiguous groups whose sizes differ by at most one, larger groups
/// first. Labels run Simple -> Challenging in score order.
pub fn split_by_difficulty(
    records: &[DifficultyRecord],
    parts: usize,
) -> Result<Vec<Vec<DifficultyRecord>>> {
    if parts == 0 || records.len() < parts {
        return Err(Error::format(format!(
            "cannot split {} records into {} parts",
            records.len(),
            parts
        )));
    }
    let mut sorted: Vec<DifficultyRecord> = records.to_vec();
    sorted.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    let base = sorted.len() / parts;
    let remainder = sorted.len() % parts;
    let labels = DifficultyLabel::all();
    let mut out = Vec::with_capacity(parts);
    let mut offset = 0;
    for part in 0..parts {
        let size = base + usize::from(part < remainder);
        let mut group: Vec<DifficultyRecord> = sorted[offset..offset + size].to_vec();
        if parts == labels.len() {
            for r in &mut group {
                r.label = Some(labels[part]);
            }
        }
        offset += size;
        out.push(group);
    }
    Ok(out)
}

/// TSV: `id<TAB>mean_nll<TAB>std_nll<TAB>score<TAB>label`.
pub fn records_to_tsv(records: &[DifficultyRecord]) -> String {
    let mut out = String::from("id\tmean_nll\tstd_nll\tscore\tlabel\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.mean_nll,
            r.std_nll,
            r.score,
            r.label.map(|l| l.as_str()).unwrap_or("-")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, score: f64) -> DifficultyRecord {
        DifficultyRecord { id, mean_nll: score, std_nll: 0.0, score, label: None }
    }

    #[test]
    fn hand_computed_two_checkpoint_score() {
        let (mean, std, s) = difficulty_score(&[2.0, 4.0]);
        assert!((mean - 3.0).abs() < 1e-15);
        assert!((std - 1.0).abs() < 1e-15);
        assert!((s - 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_checkpoint_has_zero_std() {
        let (mean, std, s) = difficulty_score(&[2.75]);
        assert_eq!(std, 0.0);
        assert_eq!(mean, s);
    }

    #[test]
    fn identical_checkpoints_have_zero_std() {
        let (_, std, _) = difficulty_score(&[1.5; 7]);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn score_is_order_invariant() {
        let a = difficulty_score(&[1.0, 5.0, 2.0, 4.4]);
        let b = difficulty_score(&[4.4, 2.0, 5.0, 1.0]);
        assert!((a.2 - b.2).abs() < 1e-12);
    }

    #[test]
    fn ten_records_split_3322() {
        let records: Vec<DifficultyRecord> = (0..10).map(|i| rec(i, i as f64)).collect();
        let parts = split_by_difficulty(&records, 4).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(parts[0][0].label, Some(DifficultyLabel::Simple));
        assert_eq!(parts[3][0].label, Some(DifficultyLabel::Challenging));
    }

    #[test]
    fn eight_distinct_scores_give_increasing_group_means() {
        let records: Vec<DifficultyRecord> =
            (0..8).map(|i| rec(i, (i as f64) * 1.3 + 0.1)).collect();
        let parts = split_by_difficulty(&records, 4).unwrap();
        let means: Vec<f64> = parts
            .iter()
            .map(|p| p.iter().map(|r| r.score).sum::<f64>() / p.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] > w[0], "means not strictly increasing: {:?}", means);
        }
    }

    #[test]
    fn equal_scores_split_by_original_order() {
        let records: Vec<DifficultyRecord> = (0..8).map(|i| rec(i, 1.0)).collect();
        let parts = split_by_difficulty(&records, 4).unwrap();
        let ids: Vec<Vec<usize>> =
            parts.iter().map(|p| p.iter().map(|r| r.id).collect()).collect();
        assert_eq!(ids, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
    }

    #[test]
    fn split_is_a_partition() {
        let records: Vec<DifficultyRecord> =
            (0..13).map(|i| rec(i, ((i * 7) % 5) as f64)).collect();
        let parts = split_by_difficulty(&records, 4).unwrap();
        let mut seen: Vec<usize> = parts.iter().flatten().map(|r| r.id).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..13).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3, 3]);
    }

    #[test]
    fn fewer_records_than_parts_is_an_error() {
        let records: Vec<DifficultyRecord> = (0..3).map(|i| rec(i, i as f64)).collect();
        assert!(split_by_difficulty(&records, 4).is_err());
    }

    #[test]
    fn nll_is_positive_and_grows_with_length() {
        use crate::model::Mode;
        let mut cfg = MscConfig::toy(12);
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.heads = 2;
        cfg.n_blocks = 2;
        cfg.layers_per_block = vec![1, 1];
        cfg.mode = Mode::Msc;
        let params = ModelParams::init(&cfg, 5);
        let short = sequence_nll(&cfg, &params, &(vec![4, 5], vec![4, 5]));
        let long = sequence_nll(&cfg, &params, &(vec![4, 5, 6, 7, 8, 9], vec![4, 5, 6, 7, 8, 9]));
        assert!(short > 0.0);
        // Summed (not averaged) NLL: more tokens, more mass.
        assert!(long > short);
    }
}
