//! Corpus BLEU: geometric mean of clipped n-gram precisions (n = 1..4)
//! times the brevity penalty, scaled to [0, 100]. No smoothing: a zero
//! precision at any order annihilates the score.

use std::collections::HashMap;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over token-id sequences, one reference per hypothesis.
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> f64 {
    assert!(!hypotheses.is_empty(), "corpus BLEU needs at least one sentence");
    assert_eq!(
        hypotheses.len(),
        references.len(),
        "hypothesis count {} vs reference count {}",
        hypotheses.len(),
        references.len()
    );
    assert!(max_n >= 1);

    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=max_n {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(re, n);
            for (gram, &count) in &hc {
                total[n - 1] += count;
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let mut log_precision_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            return 0.0;
        }
        log_precision_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let brevity = if hyp_len == 0 {
        return 0.0;
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0)
    };
    100.0 * (log_precision_sum / max_n as f64 + brevity).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_corpus_scores_exactly_100() {
        let corpus = vec![vec![4, 5, 6, 7], vec![8, 9, 10, 11, 12]];
        assert_eq!(corpus_bleu(&corpus, &corpus, 4), 100.0);
    }

    #[test]
    fn hand_computed_case() {
        // hyp "a b c d" vs ref "a b c d e": all precisions 1, brevity
        // penalty exp(1 - 5/4), BLEU = 100 * e^-0.25 ~ 77.88.
        let hyp = vec![vec![4, 5, 6, 7]];
        let re = vec![vec![4, 5, 6, 7, 8]];
        let bleu = corpus_bleu(&hyp, &re, 4);
        assert!((bleu - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((bleu - 77.88).abs() < 0.01);
    }

    #[test]
    fn zero_fourgram_matches_annihilate() {
        // Shared unigrams but no common 4-gram anywhere.
        let hyp = vec![vec![4, 5, 6, 7, 8]];
        let re = vec![vec![4, 9, 6, 10, 8]];
        assert_eq!(corpus_bleu(&hyp, &re, 4), 0.0);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        // hyp "a a a a" vs ref "a b": unigram precision clipped to 1/4.
        let hyp = vec![vec![4, 4, 4, 4]];
        let re = vec![vec![4, 5]];
        let p1 = corpus_bleu(&hyp, &re, 1);
        // BP = exp(1 - 2/4) is capped at 0 (hyp longer than ref => 1).
        assert!((p1 - 100.0 * 0.25).abs() < 1e-9);
    }

    #[test]
    fn short_hypotheses_are_penalized() {
        let hyp = vec![vec![4, 5]];
        let re = vec![vec![4, 5, 6, 7]];
        let bleu = corpus_bleu(&hyp, &re, 2);
        let want = 100.0 * (1.0f64 - 4.0 / 2.0).exp();
        assert!((bleu - want).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "at least one sentence")]
    fn empty_corpus_is_rejected() {
        corpus_bleu(&[], &[], 4);
    }
}
