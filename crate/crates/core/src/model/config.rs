//! Architecture configuration and its flat key=value file format.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Flat pre-norm Transformer; decoder attends the encoder top only.
    Baseline,
    /// Same computation as baseline, named separately for depth studies.
    PlainDeep,
    /// Block-scale collaboration: decoder block n attends encoder block n.
    Bsc,
    /// Block-scale plus contextual collaboration with gated feature fusion.
    Msc,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::PlainDeep => "plain_deep",
            Mode::Bsc => "bsc",
            Mode::Msc => "msc",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "plain_deep" => Ok(Mode::PlainDeep),
            "bsc" => Ok(Mode::Bsc),
            "msc" => Ok(Mode::Msc),
            other => Err(Error::config("mode", format!("unknown mode '{}'", other))),
        }
    }

    /// Flat stack semantics (encoder depth = sum of layers, decoder attends top).
    pub fn is_flat(self) -> bool {
        matches!(self, Mode::Baseline | Mode::PlainDeep)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Replace the gated feature fusion by plain addition.
    pub fusion_additive: bool,
    /// Implement the context cell as a residual FFN instead of a GRU.
    pub context_cell_as_ffn: bool,
    /// Drop the decoder's attention over the contextual states.
    pub remove_cxt_enc_attention: bool,
    /// Drop contextual collaboration entirely (degenerates MSC to BSC).
    pub remove_contextual: bool,
    /// Give every block transition its own context-cell parameters.
    pub per_block_gru: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MscConfig {
    pub n_blocks: usize,
    /// Encoder layers per block, length `n_blocks`. The decoder always has
    /// one layer per block.
    pub layers_per_block: Vec<usize>,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    /// Dropout on attention weights.
    pub dp_a: f64,
    /// Dropout on each residual branch output before addition.
    pub dp_r: f64,
    pub mode: Mode,
    pub ablations: Ablations,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl MscConfig {
    /// Small toy defaults; callers override what they need and `validate`.
    pub fn toy(vocab_size: usize) -> MscConfig {
        MscConfig {
            n_blocks: 2,
            layers_per_block: vec![2, 2],
            d_model: 32,
            d_ffn: 64,
            heads: 4,
            dp_a: 0.0,
            dp_r: 0.0,
            mode: Mode::Msc,
            ablations: Ablations::default(),
            vocab_size,
            max_len: 64,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> MscConfig {
        self.mode = mode;
        self
    }

    pub fn encoder_depth(&self) -> usize {
        self.layers_per_block.iter().sum()
    }

    pub fn decoder_depth(&self) -> usize {
        self.n_blocks
    }

    /// Mode after ablation flags: MSC without contextual collaboration *is*
    /// BSC (same parameters, same code path).
    pub fn effective_mode(&self) -> Mode {
        if self.mode == Mode::Msc && self.ablations.remove_contextual {
            Mode::Bsc
        } else {
            self.mode
        }
    }

    /// True when contextual states are built and fused in the encoder.
    pub fn has_context(&self) -> bool {
        self.effective_mode() == Mode::Msc
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks", "must be at least 1"));
        }
        if self.layers_per_block.len() != self.n_blocks {
            return Err(Error::config(
                "layers_per_block",
                format!("expected {} entries, got {}", self.n_blocks, self.layers_per_block.len()),
            ));
        }
        if let Some(i) = self.layers_per_block.iter().position(|&m| m == 0) {
            return Err(Error::config("layers_per_block", format!("block {} has 0 layers", i + 1)));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} must be positive and divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn", "must be positive"));
        }
        for (name, v) in [("dp_a", self.dp_a), ("dp_r", self.dp_r)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("{} outside [0, 1)", v)));
            }
        }
        if self.vocab_size < crate::data::Vocab::RESERVED + 2 {
            return Err(Error::config(
                "vocab_size",
                format!("{} leaves no room for reserved tokens plus symbols", self.vocab_size),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be positive"));
        }
        Ok(())
    }

    /// Canonical flat key=value serialization (one key per line, fixed order).
    pub fn to_text(&self) -> String {
        let a = &self.ablations;
        let layers: Vec<String> = self.layers_per_block.iter().map(|m| m.to_string()).collect();
        format!(
            "n_blocks={}\nlayers_per_block={}\nd_model={}\nd_ffn={}\nheads={}\ndp_a={}\ndp_r={}\nmode={}\nfusion_additive={}\ncontext_cell_as_ffn={}\nremove_cxt_enc_attention={}\nremove_contextual={}\nper_block_gru={}\nvocab_size={}\nmax_len={}\n",
            self.n_blocks,
            layers.join(","),
            self.d_model,
            self.d_ffn,
            self.heads,
            self.dp_a,
            self.dp_r,
            self.mode,
            a.fusion_additive,
            a.context_cell_as_ffn,
            a.remove_cxt_enc_attention,
            a.remove_contextual,
            a.per_block_gru,
            self.vocab_size,
            self.max_len,
        )
    }

    /// Parse the flat key=value format. Unknown keys are rejected unless the
    /// caller claims them (training settings live in the same file).
    pub fn parse(text: &str, extra_keys: &mut dyn FnMut(&str, &str) -> Result<bool>) -> Result<MscConfig> {
        let mut cfg = MscConfig::toy(8);
        let mut heads_explicit = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key=value, got '{}'", lineno + 1, line)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_blocks" => cfg.n_blocks = parse_usize(key, value)?,
                "layers_per_block" => {
                    cfg.layers_per_block = value
                        .split(',')
                        .map(|v| parse_usize("layers_per_block", v.trim()))
                        .collect::<Result<Vec<_>>>()?
                }
                "d_model" => cfg.d_model = parse_usize(key, value)?,
                "d_ffn" => cfg.d_ffn = parse_usize(key, value)?,
                "heads" => {
                    cfg.heads = parse_usize(key, value)?;
                    heads_explicit = true;
                }
                "dp_a" => cfg.dp_a = parse_f64(key, value)?,
                "dp_r" => cfg.dp_r = parse_f64(key, value)?,
                "mode" => cfg.mode = Mode::parse(value)?,
                "fusion_additive" => cfg.ablations.fusion_additive = parse_bool(key, value)?,
                "context_cell_as_ffn" => cfg.ablations.context_cell_as_ffn = parse_bool(key, value)?,
                "remove_cxt_enc_attention" => {
                    cfg.ablations.remove_cxt_enc_attention = parse_bool(key, value)?
                }
                "remove_contextual" => cfg.ablations.remove_contextual = parse_bool(key, value)?,
                "per_block_gru" => cfg.ablations.per_block_gru = parse_bool(key, value)?,
                "vocab_size" => cfg.vocab_size = parse_usize(key, value)?,
                "max_len" => cfg.max_len = parse_usize(key, value)?,
                other => {
                    if !extra_keys(other, value)? {
                        return Err(Error::config(other, "unknown configuration key"));
                    }
                }
            }
        }
        if !heads_explicit {
            cfg.heads = if cfg.d_model <= 256 { 4 } else { 8 };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_strict(text: &str) -> Result<MscConfig> {
        MscConfig::parse(text, &mut |_, _| Ok(false))
    }
}

pub(crate) fn parse_usize(field: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(field, format!("'{}' is not a nonnegative integer", v)))
}

pub(crate) fn parse_f64(field: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(field, format!("'{}' is not a number", v)))
}

pub(crate) fn parse_u64(field: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::config(field, format!("'{}' is not a nonnegative integer", v)))
}

pub(crate) fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(field, format!("'{}' is not a boolean", v))),
    }
}
