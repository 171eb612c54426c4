//! Checkpoint serialization.
//!
//! Little-endian binary layout: magic `MSCK`, format version u32, config
//! blob (length u64 + UTF-8 key=value text, which also carries `step` and
//! `seed`), tensor count u32, then per tensor: name length u16, UTF-8 name,
//! rank u8, dims as u64 each, raw 32-bit float data. Model parameters come
//! first in canonical order; Adam moments follow under the reserved
//! `opt.m.` / `opt.v.` name prefixes. Writes are atomic (temp + rename).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::config::{parse_u64, MscConfig};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::train::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"MSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: MscConfig,
    pub step: u64,
    /// Master seed; with the step it fully determines every derived RNG
    /// stream, so it is the complete RNG state.
    pub seed: u64,
    pub params: ModelParams<Tensor<f64>>,
    pub opt: Option<OptimState>,
}

impl Checkpoint {
    pub fn new(config: MscConfig, step: u64, seed: u64, params: ModelParams<Tensor<f64>>, opt: Option<OptimState>) -> Self {
        Checkpoint { config, step, seed, params, opt }
    }

    fn blob(&self) -> String {
        format!("{}step={}\nseed={}\n", self.config.to_text(), self.step, self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let blob = self.blob();
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        buf.extend_from_slice(blob.as_bytes());

        let named = self.params.named_leaves();
        let opt_records: Vec<(String, Vec<usize>, Vec<f64>)> = match &self.opt {
            Some(state) => {
                let mut recs = Vec::new();
                for (prefix, side) in [("opt.m.", &state.m), ("opt.v.", &state.v)] {
                    for ((name, t), buf) in named.iter().zip(side) {
                        recs.push((format!("{prefix}{name}"), t.shape.clone(), buf.clone()));
                    }
                }
                recs
            }
            None => Vec::new(),
        };
        let count = named.len() + opt_records.len();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &named {
            write_tensor(&mut buf, name, &t.shape, &t.values);
        }
        for (name, shape, values) in &opt_records {
            write_tensor(&mut buf, name, shape, values);
        }

        let tmp = path.with_extension("msck.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, &e))?;
            f.write_all(&buf).map_err(|e| Error::io(&tmp, &e))?;
            f.sync_all().ok();
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, &e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, &e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, &e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(format!("{}: not a checkpoint (bad magic)", path.display())));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                version
            )));
        }
        let blob_len = r.u64()? as usize;
        let blob = std::str::from_utf8(r.take(blob_len)?)
            .map_err(|_| Error::format(format!("{}: config blob is not UTF-8", path.display())))?
            .to_string();
        let mut step = 0u64;
        let mut seed = 0u64;
        let config = MscConfig::parse(&blob, &mut |key, value| match key {
            "step" => {
                step = parse_u64("step", value)?;
                Ok(true)
            }
            "seed" => {
                seed = parse_u64("seed", value)?;
                Ok(true)
            }
            _ => Ok(false),
        })?;

        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for _ in 0..count {
            let (name, tensor) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::format(format!("{}: duplicate tensor '{}'", path.display(), name)));
            }
        }

        let mut model_tensors = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                opt_m.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                opt_v.insert(rest.to_string(), tensor);
            } else {
                model_tensors.insert(name, tensor);
            }
        }

        let mut params = ModelParams::<Tensor<f64>>::build(&config);
        params.load_named(model_tensors)?;

        let opt = if opt_m.is_empty() && opt_v.is_empty() {
            None
        } else {
            let mut m = Vec::new();
            let mut v = Vec::new();
            let mut missing = Vec::new();
            params.for_each(&mut |name, t| {
                match opt_m.remove(name) {
                    Some(t2) if t2.shape == t.shape => m.push(t2.values),
                    _ => missing.push(format!("opt.m.{}", name)),
                }
                match opt_v.remove(name) {
                    Some(t2) if t2.shape == t.shape => v.push(t2.values),
                    _ => missing.push(format!("opt.v.{}", name)),
                }
            });
            if !missing.is_empty() {
                return Err(Error::format(format!(
                    "{}: incomplete optimizer state: {}",
                    path.display(),
                    missing.join(", ")
                )));
            }
            Some(OptimState { m, v, t: step })
        };

        Ok(Checkpoint { config, step, seed, params, opt })
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    assert!(name.len() <= u16::MAX as usize, "tensor name too long");
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    assert!(shape.len() <= u8::MAX as usize);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f64>)> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?
        .to_string();
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * 4)?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((name, Tensor::new(shape, values)))
}

/// Elementwise mean of the model parameters across checkpoints. All inputs
/// must share the config and the parameter names/shapes; optimizer state is
/// dropped, the step is the maximum input step.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::format("no checkpoints to average".to_string()));
    }
    let first = Checkpoint::load(&paths[0])?;
    let names = first.params.names();
    let mut sums: Vec<Vec<f64>> = {
        let mut v = Vec::new();
        first.params.for_each(&mut |_, t| v.push(t.values.clone()));
        v
    };
    let mut step = first.step;
    for path in &paths[1..] {
        let ck = Checkpoint::load(path)?;
        if ck.config != first.config {
            return Err(Error::format(format!(
                "{}: config differs from {}",
                path.display(),
                paths[0].display()
            )));
        }
        let other_names = ck.params.names();
        if other_names != names {
            return Err(Error::format(format!(
                "{}: parameter names differ from {}",
                path.display(),
                paths[0].display()
            )));
        }
        let mut idx = 0;
        ck.params.for_each(&mut |name, t| {
            assert_eq!(t.numel(), sums[idx].len(), "shape mismatch for {}", name);
            for (s, &v) in sums[idx].iter_mut().zip(&t.values) {
                *s += v;
            }
            idx += 1;
        });
        step = step.max(ck.step);
    }
    let k = paths.len() as f64;
    let mut idx = 0;
    let params = first.params.map_named(&mut |_, t: &Tensor<f64>| {
        let values: Vec<f64> = sums[idx].iter().map(|&s| s / k).collect();
        idx += 1;
        Tensor::new(t.shape.clone(), values)
    });
    Ok(Checkpoint { config: first.config, step, seed: first.seed, params, opt: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MscConfig;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mscnet-ckpt-{}-{}", tag, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmpdir("roundtrip");
        let cfg = MscConfig::toy(12);
        let params = ModelParams::<Tensor<f64>>::init(&cfg, 42);
        let mut state = OptimState::new(&params);
        state.t = 7;
        for m in &mut state.m {
            for (i, v) in m.iter_mut().enumerate() {
                *v = (i as f64 * 0.01).sin();
            }
        }
        let ck = Checkpoint::new(cfg, 7, 42, params, Some(state));
        let p1 = dir.join("a.msck");
        let p2 = dir.join("b.msck");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.step, 7);
        assert_eq!(loaded.seed, 42);
        assert!(loaded.opt.is_some());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn parameters_survive_at_f32_precision() {
        let dir = tmpdir("precision");
        let cfg = MscConfig::toy(12);
        let params = ModelParams::<Tensor<f64>>::init(&cfg, 3);
        let ck = Checkpoint::new(cfg, 0, 3, params.clone(), None);
        let p = dir.join("c.msck");
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let mut pairs = Vec::new();
        params.for_each(&mut |name, t| pairs.push((name.to_string(), t.values.clone())));
        let mut idx = 0;
        loaded.params.for_each(&mut |name, t| {
            assert_eq!(name, pairs[idx].0);
            for (got, want) in t.values.iter().zip(&pairs[idx].1) {
                assert_eq!(*got, *want as f32 as f64);
            }
            idx += 1;
        });
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn average_of_identical_checkpoints_is_identity() {
        let dir = tmpdir("avg-ident");
        let cfg = MscConfig::toy(12);
        let params = ModelParams::<Tensor<f64>>::init(&cfg, 9);
        let ck = Checkpoint::new(cfg, 5, 9, params, None);
        let mut paths = Vec::new();
        for i in 0..3 {
            let p = dir.join(format!("k{}.msck", i));
            ck.save(&p).unwrap();
            paths.push(p);
        }
        let avg = average_checkpoints(&paths).unwrap();
        let out = dir.join("avg.msck");
        avg.save(&out).unwrap();
        // Byte-identical tensors: compare against a re-save of the input.
        let reload = Checkpoint::load(&paths[0]).unwrap();
        let mut want = Vec::new();
        reload.params.for_each(&mut |_, t| want.push(t.values.clone()));
        let mut idx = 0;
        avg.params.for_each(&mut |_, t| {
            assert_eq!(t.values, want[idx]);
            idx += 1;
        });
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn average_matches_elementwise_mean() {
        let dir = tmpdir("avg-mean");
        let cfg = MscConfig::toy(12);
        let mut paths = Vec::new();
        let mut all: Vec<Vec<f64>> = Vec::new();
        for i in 0..5 {
            let params = ModelParams::<Tensor<f64>>::init(&cfg, 100 + i);
            let mut flat = Vec::new();
            params.for_each(&mut |_, t| flat.extend(t.values.iter().map(|&v| v as f32 as f64)));
            all.push(flat);
            let p = dir.join(format!("k{}.msck", i));
            Checkpoint::new(cfg.clone(), i, 100 + i, params, None).save(&p).unwrap();
            paths.push(p);
        }
        let avg = average_checkpoints(&paths).unwrap();
        let mut got = Vec::new();
        avg.params.for_each(&mut |_, t| got.extend_from_slice(&t.values));
        for (j, g) in got.iter().enumerate() {
            let want: f64 = all.iter().map(|f| f[j]).sum::<f64>() / 5.0;
            assert!((g - want).abs() < 1e-12);
        }
        assert_eq!(avg.step, 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn average_is_permutation_invariant() {
        let dir = tmpdir("avg-perm");
        let cfg = MscConfig::toy(12);
        let mut paths = Vec::new();
        for i in 0..4 {
            let params = ModelParams::<Tensor<f64>>::init(&cfg, 200 + i);
            let p = dir.join(format!("k{}.msck", i));
            Checkpoint::new(cfg.clone(), i, 1, params, None).save(&p).unwrap();
            paths.push(p);
        }
        let a = average_checkpoints(&paths).unwrap();
        let mut rev = paths.clone();
        rev.reverse();
        let b = average_checkpoints(&rev).unwrap();
        let mut va = Vec::new();
        a.params.for_each(&mut |_, t| va.extend_from_slice(&t.values));
        let mut vb = Vec::new();
        b.params.for_each(&mut |_, t| vb.extend_from_slice(&t.values));
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-12);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let dir = tmpdir("avg-mismatch");
        let cfg1 = MscConfig::toy(12);
        let mut cfg2 = MscConfig::toy(12);
        cfg2.d_ffn *= 2;
        let p1 = dir.join("a.msck");
        let p2 = dir.join("b.msck");
        Checkpoint::new(cfg1.clone(), 0, 1, ModelParams::init(&cfg1, 1), None).save(&p1).unwrap();
        Checkpoint::new(cfg2.clone(), 0, 1, ModelParams::init(&cfg2, 1), None).save(&p2).unwrap();
        assert!(average_checkpoints(&[p1, p2]).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_reported_as_missing() {
        let err = Checkpoint::load(Path::new("/nonexistent/never.msck")).unwrap_err();
        matches!(err, Error::MissingFile { .. })
            .then_some(())
            .expect("expected MissingFile");
    }
}
