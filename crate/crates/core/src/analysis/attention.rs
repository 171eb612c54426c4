//! Teacher-forced export of decoder cross-attention weights.

use crate::data::{Batch, Vocab};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelParams, MscConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportScope {
    TopDecoderLayer,
    All,
}

#[derive(Debug)]
pub struct AttentionLayerDump {
    /// 1-based decoder block index.
    pub block: usize,
    /// heads[h][q][k], rows over target positions, columns over source.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Mean over heads.
    pub head_avg: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct AttentionDump {
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub layers: Vec<AttentionLayerDump>,
}

/// Run the pair teacher-forced and capture decoder cross-attention weights.
/// Token strings must be in `vocab`; unknown tokens are an error naming the
/// offender. Weights are exported at 32-bit precision.
pub fn export_attention(
    cfg: &MscConfig,
    params: &ModelParams<Tensor<f64>>,
    vocab: &Vocab,
    src_text: &str,
    tgt_text: &str,
    scope: ExportScope,
) -> Result<AttentionDump> {
    let src = vocab.encode(src_text)?;
    let tgt = vocab.encode(tgt_text)?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::format("empty source or target sentence"));
    }
    let batch = Batch::from_pairs(&[(src.clone(), tgt.clone())]);
    let mut tape: Tape<f64> = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let trace = model_forward(&mut tape, &bound, cfg, &batch, None);

    let blocks: Vec<usize> = match scope {
        ExportScope::TopDecoderLayer => vec![cfg.n_blocks - 1],
        ExportScope::All => (0..cfg.n_blocks).collect(),
    };
    let (tq, tk) = (batch.tgt_len, batch.src_len);
    let layers = blocks
        .into_iter()
        .map(|n| {
            let w = tape.value(trace.cross_attn[n]);
            assert_eq!(w.shape, vec![1, cfg.heads, tq, tk]);
            let heads: Vec<Vec<Vec<f64>>> = (0..cfg.heads)
                .map(|h| {
                    (0..tq)
                        .map(|q| {
                            (0..tk)
                                .map(|k| {
                                    // 32-bit export precision.
                                    w.values[((h * tq) + q) * tk + k] as f32 as f64
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let head_avg: Vec<Vec<f64>> = (0..tq)
                .map(|q| {
                    (0..tk)
                        .map(|k| {
                            heads.iter().map(|hm| hm[q][k]).sum::<f64>() / cfg.heads as f64
                        })
                        .collect()
                })
                .collect();
            AttentionLayerDump { block: n + 1, heads, head_avg }
        })
        .collect();

    let mut tgt_tokens: Vec<String> =
        tgt.iter().map(|&id| vocab.token(id).to_string()).collect();
    tgt_tokens.push(vocab.token(Vocab::EOS).to_string());
    Ok(AttentionDump {
        src_tokens: src.iter().map(|&id| vocab.token(id).to_string()).collect(),
        tgt_tokens,
        layers,
    })
}

fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn json_matrix(m: &[Vec<f64>]) -> String {
    let rows: Vec<String> = m
        .iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

impl AttentionDump {
    pub fn to_json(&self) -> String {
        let tokens = |ts: &[String]| -> String {
            let cells: Vec<String> = ts.iter().map(|t| json_string(t)).collect();
            format!("[{}]", cells.join(","))
        };
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| {
                let heads: Vec<String> = l.heads.iter().map(|h| json_matrix(h)).collect();
                format!(
                    "{{\"block\":{},\"heads\":[{}],\"head_avg\":{}}}",
                    l.block,
                    heads.join(","),
                    json_matrix(&l.head_avg)
                )
            })
            .collect();
        format!(
            "{{\"src_tokens\":{},\"tgt_tokens\":{},\"layers\":[{}]}}\n",
            tokens(&self.src_tokens),
            tokens(&self.tgt_tokens),
            layers.join(",")
        )
    }
}
