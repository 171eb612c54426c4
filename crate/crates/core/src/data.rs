//! Synthetic sequence-to-sequence tasks, vocabulary handling, and
//! token-bucketed batching.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{sub_seed, sub_seed_indexed, Rng};

/// Token <-> id bijection with fixed reserved ids up front.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const RESERVED: usize = 4;

    fn reserved_tokens() -> Vec<String> {
        ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect()
    }

    /// Vocabulary whose symbol tokens are the decimal strings of their ids,
    /// matching the toy dataset format.
    pub fn numeric(size: usize) -> Result<Vocab> {
        if size < Self::RESERVED + 2 {
            return Err(Error::config(
                "vocab_size",
                format!("{} leaves no room for reserved tokens plus symbols", size),
            ));
        }
        let extra = (Self::RESERVED..size).map(|id| id.to_string());
        Vocab::from_tokens(extra)
    }

    /// Build from symbol tokens; reserved tokens come first, the rest get
    /// dense ids in iteration order. Duplicates are rejected.
    pub fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut tokens = Self::reserved_tokens();
        tokens.extend(extra);
        let mut index = HashMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::format(format!("duplicate token '{}'", tok)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Encode whitespace-separated tokens; unknown tokens are an error
    /// naming the offender.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|tok| self.id(tok).ok_or_else(|| Error::format(format!("unknown token '{}'", tok))))
            .collect()
    }

    /// Decode ids to a space-joined string, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> =
            ids.iter().filter(|&&id| id >= Self::RESERVED).map(|&id| self.token(id)).collect();
        words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    /// Seeded bijection between disjoint source/target alphabets composed
    /// with a local reordering (adjacent swap at even indices).
    SubstitutionTranslation,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "substitution_translation" => Ok(TaskKind::SubstitutionTranslation),
            other => Err(Error::config("task", format!("unknown task '{}'", other))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::SubstitutionTranslation => "substitution_translation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Debug)]
pub struct TaskData {
    pub vocab: Vocab,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Target-side transform of the substitution task: map every symbol through
/// the bijection, then swap adjacent pairs at even indices.
fn substitute(src: &[usize], mapping: &HashMap<usize, usize>) -> Vec<usize> {
    let mut out: Vec<usize> = src.iter().map(|s| mapping[s]).collect();
    let mut i = 0;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += 2;
    }
    out
}

pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    if spec.vocab_size < Vocab::RESERVED + 2 {
        return Err(Error::config(
            "vocab_size",
            format!("{} leaves no room for reserved tokens plus symbols", spec.vocab_size),
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::config("length", "need 1 <= min_len <= max_len"));
    }
    let vocab = Vocab::numeric(spec.vocab_size)?;
    let usable: Vec<usize> = (Vocab::RESERVED..spec.vocab_size).collect();

    // Substitution uses disjoint alphabets: source half and target half.
    let (alphabet, mapping) = match spec.kind {
        TaskKind::SubstitutionTranslation => {
            let half = usable.len() / 2;
            if half == 0 {
                return Err(Error::config("vocab_size", "too small for disjoint alphabets"));
            }
            let src_alpha: Vec<usize> = usable[..half].to_vec();
            let mut tgt_alpha: Vec<usize> = usable[half..2 * half].to_vec();
            let mut rng = Rng::new(sub_seed(spec.seed, "mapping"));
            rng.shuffle(&mut tgt_alpha);
            let mapping: HashMap<usize, usize> =
                src_alpha.iter().copied().zip(tgt_alpha).collect();
            (src_alpha, Some(mapping))
        }
        _ => (usable, None),
    };

    let make_pair = |rng: &mut Rng| -> Pair {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let src: Vec<usize> = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
        let tgt = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut s = src.clone();
                s.sort_unstable();
                s
            }
            TaskKind::SubstitutionTranslation => substitute(&src, mapping.as_ref().unwrap()),
        };
        (src, tgt)
    };

    let mut train = Vec::with_capacity(spec.train);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut rng = Rng::new(sub_seed(spec.seed, "train"));
    for _ in 0..spec.train {
        let p = make_pair(&mut rng);
        seen.insert(p.0.clone());
        train.push(p);
    }

    // Held-out splits must not collide with training sources (or each other).
    let sample_disjoint = |label: &str, count: usize, seen: &mut HashSet<Vec<usize>>| -> Result<Vec<Pair>> {
        let mut rng = Rng::new(sub_seed(spec.seed, label));
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            let p = make_pair(&mut rng);
            attempts += 1;
            if attempts > count.saturating_mul(1000) + 10_000 {
                return Err(Error::config(
                    "corpus",
                    format!("cannot sample {} disjoint {} pairs; space too small", count, label),
                ));
            }
            if seen.contains(&p.0) {
                continue;
            }
            seen.insert(p.0.clone());
            out.push(p);
        }
        Ok(out)
    };
    let valid = sample_disjoint("valid", spec.valid, &mut seen)?;
    let test = sample_disjoint("test", spec.test, &mut seen)?;

    Ok(TaskData { vocab, train, valid, test })
}

/// A padded teacher-forcing batch.
///
/// `tgt_in` is bos-prefixed, `tgt_out` eos-suffixed, so position j of
/// `tgt_out` is the prediction made after consuming `tgt_in[..=j]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair]) -> Batch {
        assert!(!pairs.is_empty(), "cannot batch zero pairs");
        let b = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap() + 1;
        let mut src = vec![Vocab::PAD; b * src_len];
        let mut tgt_in = vec![Vocab::PAD; b * tgt_len];
        let mut tgt_out = vec![Vocab::PAD; b * tgt_len];
        for (row, (s, t)) in pairs.iter().enumerate() {
            src[row * src_len..row * src_len + s.len()].copy_from_slice(s);
            tgt_in[row * tgt_len] = Vocab::BOS;
            tgt_in[row * tgt_len + 1..row * tgt_len + 1 + t.len()].copy_from_slice(t);
            tgt_out[row * tgt_len..row * tgt_len + t.len()].copy_from_slice(t);
            tgt_out[row * tgt_len + t.len()] = Vocab::EOS;
        }
        Batch { batch: b, src_len, tgt_len, src, tgt_in, tgt_out }
    }

    /// Number of non-pad target tokens (the loss denominator).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&id| id != Vocab::PAD).count()
    }
}

/// Length-sorted token bucketing: every batch satisfies
/// rows * max(src, tgt) <= tokens_per_batch.
pub fn batch_by_tokens(pairs: &[Pair], tokens_per_batch: usize) -> Result<Vec<Batch>> {
    let cost = |p: &Pair| p.0.len().max(p.1.len());
    if let Some(p) = pairs.iter().find(|p| cost(p) > tokens_per_batch) {
        return Err(Error::config(
            "tokens_per_batch",
            format!("sequence of length {} exceeds the {}-token budget", cost(p), tokens_per_batch),
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].0.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<Pair> = Vec::new();
    let mut max_cost = 0usize;
    for &i in &order {
        let c = cost(&pairs[i]).max(max_cost);
        if !current.is_empty() && (current.len() + 1) * c > tokens_per_batch {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            max_cost = 0;
        }
        max_cost = max_cost.max(cost(&pairs[i]));
        current.push(pairs[i].clone());
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current));
    }
    Ok(batches)
}

/// Deterministic batch order for an epoch.
pub fn epoch_order(n_batches: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_batches).collect();
    Rng::new(sub_seed_indexed(seed, "batch_order", epoch)).shuffle(&mut order);
    order
}

/// One pair per line: `src tokens<TAB>tgt tokens`, space-separated.
pub fn write_pairs(path: &Path, pairs: &[Pair], vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for (src, tgt) in pairs {
        out.push_str(&vocab.decode(src));
        out.push('\t');
        out.push_str(&vocab.decode(tgt));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, &e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, &e))
}

pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, &e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!("{}:{}: expected 'src<TAB>tgt'", path.display(), lineno + 1))
        })?;
        let s = vocab.encode(src)?;
        let t = vocab.encode(tgt)?;
        if s.is_empty() || t.is_empty() {
            return Err(Error::format(format!(
                "{}:{}: empty source or target",
                path.display(),
                lineno + 1
            )));
        }
        pairs.push((s, t));
    }
    if pairs.is_empty() {
        return Err(Error::format(format!("{}: no pairs", path.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_extra_tokens_gives_reserved_only() {
        let v = Vocab::from_tokens(std::iter::empty()).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("<eos>"), Some(2));
    }

    #[test]
    fn extra_tokens_get_dense_ids_after_reserved() {
        let v = Vocab::from_tokens(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn duplicate_token_is_an_error() {
        let err = Vocab::from_tokens(["a".to_string(), "a".to_string()]).unwrap_err();
        assert!(err.to_string().contains("duplicate token 'a'"));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocab::numeric(16).unwrap();
        let ids = v.encode("5 7 9").unwrap();
        assert_eq!(ids, vec![5, 7, 9]);
        assert_eq!(v.decode(&ids), "5 7 9");
    }

    #[test]
    fn copy_and_reverse_targets() {
        let src = vec![5, 7, 9];
        assert_eq!(src.clone(), src); // copy is identity
        let rev: Vec<usize> = src.iter().rev().copied().collect();
        assert_eq!(rev, vec![9, 7, 5]);
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 16,
            min_len: 3,
            max_len: 3,
            train: 5,
            valid: 2,
            test: 2,
            seed: 1,
        };
        let data = generate_task(&spec).unwrap();
        for (s, t) in &data.train {
            assert_eq!(s, t);
        }
        let spec = TaskSpec { kind: TaskKind::Reverse, ..spec };
        let data = generate_task(&spec).unwrap();
        for (s, t) in &data.train {
            let r: Vec<usize> = s.iter().rev().copied().collect();
            assert_eq!(&r, t);
        }
        let spec = TaskSpec { kind: TaskKind::Sort, ..spec };
        let data = generate_task(&spec).unwrap();
        for (s, t) in &data.train {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            assert_eq!(&sorted, t);
        }
    }

    #[test]
    fn substitution_rule_hand_case() {
        // Mapping {5->12, 7->13, 9->14} with the even-index adjacent swap:
        // "5 7 9" becomes "13 12 14".
        let mapping: HashMap<usize, usize> = [(5, 12), (7, 13), (9, 14)].into_iter().collect();
        assert_eq!(substitute(&[5, 7, 9], &mapping), vec![13, 12, 14]);
    }

    #[test]
    fn substitution_task_uses_disjoint_alphabets() {
        let spec = TaskSpec {
            kind: TaskKind::SubstitutionTranslation,
            vocab_size: 24,
            min_len: 2,
            max_len: 6,
            train: 50,
            valid: 5,
            test: 5,
            seed: 3,
        };
        let data = generate_task(&spec).unwrap();
        let half = (24 - 4) / 2;
        for (s, t) in data.train.iter().chain(&data.valid).chain(&data.test) {
            assert_eq!(s.len(), t.len());
            for &tok in s {
                assert!((4..4 + half).contains(&tok));
            }
            for &tok in t {
                assert!((4 + half..4 + 2 * half).contains(&tok));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec {
            kind: TaskKind::SubstitutionTranslation,
            vocab_size: 32,
            min_len: 2,
            max_len: 8,
            train: 100,
            valid: 10,
            test: 10,
            seed: 9,
        };
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn splits_are_disjoint_from_train() {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 32,
            min_len: 2,
            max_len: 8,
            train: 200,
            valid: 20,
            test: 20,
            seed: 11,
        };
        let data = generate_task(&spec).unwrap();
        let train_srcs: HashSet<_> = data.train.iter().map(|(s, _)| s.clone()).collect();
        for (s, _) in data.valid.iter().chain(&data.test) {
            assert!(!train_srcs.contains(s));
        }
    }

    #[test]
    fn batch_shifted_alignment() {
        let pairs = vec![(vec![5, 6, 7], vec![8, 9]), (vec![4], vec![10, 11, 12])];
        let b = Batch::from_pairs(&pairs);
        assert_eq!(b.src_len, 3);
        assert_eq!(b.tgt_len, 4);
        // tgt_out[i, j] == tgt_in[i, j+1] wherever both are non-pad.
        for row in 0..b.batch {
            for j in 0..b.tgt_len - 1 {
                let o = b.tgt_out[row * b.tgt_len + j];
                let i = b.tgt_in[row * b.tgt_len + j + 1];
                if o != Vocab::PAD && i != Vocab::PAD {
                    assert_eq!(o, i);
                }
            }
        }
        assert_eq!(b.tgt_in[0], Vocab::BOS);
        assert_eq!(b.tgt_out[0..3], [8, 9, Vocab::EOS]);
    }

    #[test]
    fn uniform_lengths_fill_batches() {
        let pairs: Vec<Pair> = (0..10).map(|i| (vec![4 + i; 4], vec![4 + i; 4])).collect();
        let batches = batch_by_tokens(&pairs, 16).unwrap();
        for b in &batches[..batches.len() - 1] {
            assert_eq!(b.batch, 4);
        }
        let total: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn single_sequence_single_batch() {
        let pairs = vec![(vec![5, 6], vec![7])];
        let batches = batch_by_tokens(&pairs, 64).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].batch, 1);
    }

    #[test]
    fn budget_invariant_holds_for_mixed_lengths() {
        let mut rng = Rng::new(13);
        let pairs: Vec<Pair> = (0..100)
            .map(|_| {
                let ls = 3 + rng.below(8);
                let lt = 3 + rng.below(8);
                ((0..ls).map(|_| 4 + rng.below(10)).collect(), (0..lt).map(|_| 4 + rng.below(10)).collect())
            })
            .collect();
        let budget = 20;
        for b in batch_by_tokens(&pairs, budget).unwrap() {
            let maxlen = b.src_len.max(b.tgt_len - 1); // tgt_len includes bos/eos slot
            assert!(b.batch * maxlen <= budget, "{} rows x {} > {}", b.batch, maxlen, budget);
        }
    }

    #[test]
    fn oversized_sequence_is_rejected() {
        let pairs = vec![(vec![4; 30], vec![4; 2])];
        assert!(batch_by_tokens(&pairs, 16).is_err());
    }

    #[test]
    fn pair_file_roundtrip() {
        let v = Vocab::numeric(16).unwrap();
        let pairs = vec![(vec![5, 7, 9], vec![9, 7, 5]), (vec![4], vec![4])];
        let dir = std::env::temp_dir().join(format!("mscnet-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pairs.tsv");
        write_pairs(&path, &pairs, &v).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "5 7 9\t9 7 5\n4\t4\n");
        let back = read_pairs(&path, &v).unwrap();
        assert_eq!(back, pairs);
        std::fs::remove_dir_all(&dir).ok();
    }
}
