//! Verb implementations.

use std::path::{Path, PathBuf};

use mscnet::analysis::{
    corpus_bleu, export_attention, grad_norms_to_csv, grad_path_decompose, record_grad_norms,
    records_to_tsv, score_records, split_by_difficulty, ExportScope,
};
use mscnet::data::{generate_task, read_pairs, write_pairs, TaskKind, TaskSpec, Vocab};
use mscnet::decode::{beam_search, greedy_decode};
use mscnet::gradcheck::{check_model, primitive_suite, FD_TOLERANCE};
use mscnet::model::{Consumer, MscConfig};
use mscnet::train::{
    ablate_compare, average_checkpoints, metrics_to_csv, parse_full_config, token_accuracy,
    train_loop, Checkpoint, TrainConfig,
};
use mscnet::{Error, Result as LibResult};

use crate::{Args, CliError};

fn read_file(path: &Path) -> LibResult<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, &e))
}

fn write_file(path: &Path, contents: &str) -> LibResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, &e))
}

fn load_config(path: &str) -> Result<(MscConfig, TrainConfig), CliError> {
    let text = read_file(Path::new(path))?;
    Ok(parse_full_config(&text)?)
}

/// Sequences longer than the model's positional range are a config violation.
fn check_lengths(pairs: &[(Vec<usize>, Vec<usize>)], cfg: &MscConfig) -> Result<(), CliError> {
    let longest = pairs.iter().map(|(s, t)| s.len().max(t.len() + 1)).max().unwrap_or(0);
    if longest > cfg.max_len {
        return Err(Error::config(
            "max_len",
            format!("data contains a sequence needing {} positions, model allows {}", longest, cfg.max_len),
        )
        .into());
    }
    Ok(())
}

pub fn gen(args: &Args) -> Result<(), CliError> {
    let kind = TaskKind::parse(args.one("task")?)?;
    let out = PathBuf::from(args.one("out")?);
    let spec = TaskSpec {
        kind,
        vocab_size: args.parse_or("vocab", 64usize)?,
        min_len: args.parse_or("min-len", 4usize)?,
        max_len: args.parse_or("max-len", 16usize)?,
        train: args.parse_or("train", 20_000usize)?,
        valid: args.parse_or("valid", 1_000usize)?,
        test: args.parse_or("test", 1_000usize)?,
        seed: args.parse_or("seed", 1u64)?,
    };
    args.finish()?;
    let data = generate_task(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, &e))?;
    write_pairs(&out.join("train.tsv"), &data.train, &data.vocab)?;
    write_pairs(&out.join("valid.tsv"), &data.valid, &data.vocab)?;
    write_pairs(&out.join("test.tsv"), &data.test, &data.vocab)?;
    println!(
        "wrote {} train / {} valid / {} test pairs to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(args: &Args) -> Result<(), CliError> {
    let config_path = args.one("config")?.to_string();
    let data_path = PathBuf::from(args.one("data")?);
    let out = PathBuf::from(args.one("out")?);
    let steps = args.opt_parse::<u64>("steps")?;
    let seed = args.opt_parse::<u64>("seed")?;
    args.finish()?;
    let (cfg, mut tc) = load_config(&config_path)?;
    if let Some(steps) = steps {
        tc.max_steps = steps;
    }
    if let Some(seed) = seed {
        tc.seed = seed;
    }
    let vocab = Vocab::numeric(cfg.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &cfg)?;
    let result = train_loop(&cfg, &tc, &pairs, Some(&out), None)?;
    write_file(&out.join("metrics.csv"), &metrics_to_csv(&result.metrics))?;
    let final_step = result.metrics.last().map(|m| m.step).unwrap_or(0);
    println!("trained {} steps; checkpoints in {}", final_step, out.display());
    Ok(())
}

pub fn decode(args: &Args) -> Result<(), CliError> {
    let ckpt_path = args.one("ckpt")?.to_string();
    let input = PathBuf::from(args.one("input")?);
    let beam = args.parse_or("beam", 5usize)?;
    let lenpen = args.parse_or("lenpen", 1.0f64)?;
    let max_len_flag = args.opt_parse::<usize>("max-len")?;
    args.finish()?;
    let ckpt = Checkpoint::load(Path::new(&ckpt_path))?;
    let max_len = max_len_flag.unwrap_or(ckpt.config.max_len.min(64));
    if max_len > ckpt.config.max_len {
        return Err(Error::config(
            "max-len",
            format!("{} exceeds the model's positional range {}", max_len, ckpt.config.max_len),
        )
        .into());
    }
    let vocab = Vocab::numeric(ckpt.config.vocab_size)?;
    let text = read_file(&input)?;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::format(format!("{}:{}: empty source line", input.display(), lineno + 1)).into());
        }
        let src = vocab.encode(line)?;
        if src.len() > ckpt.config.max_len {
            return Err(Error::config(
                "max_len",
                format!("{}:{}: source has {} tokens, model allows {}", input.display(), lineno + 1, src.len(), ckpt.config.max_len),
            )
            .into());
        }
        let hyp = if beam == 1 {
            greedy_decode(&ckpt.config, &ckpt.params, &src, max_len)
        } else {
            beam_search(&ckpt.config, &ckpt.params, &src, beam, lenpen, max_len)
                .into_iter()
                .next()
                .expect("beam search returns at least one hypothesis")
        };
        println!("{}", vocab.decode(hyp.surface()));
    }
    Ok(())
}

pub fn eval(args: &Args) -> Result<(), CliError> {
    let ckpt_path = args.one("ckpt")?.to_string();
    let data_path = PathBuf::from(args.one("data")?);
    let beam = args.parse_or("beam", 5usize)?;
    let lenpen = args.parse_or("lenpen", 1.0f64)?;
    let max_len_flag = args.opt_parse::<usize>("max-len")?;
    args.finish()?;
    let ckpt = Checkpoint::load(Path::new(&ckpt_path))?;
    let max_len = max_len_flag.unwrap_or(ckpt.config.max_len.min(64)).min(ckpt.config.max_len);
    let vocab = Vocab::numeric(ckpt.config.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &ckpt.config)?;
    let acc = token_accuracy(&ckpt.config, &ckpt.params, &pairs, 4096)?;
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for (src, tgt) in &pairs {
        let best = beam_search(&ckpt.config, &ckpt.params, src, beam, lenpen, max_len)
            .into_iter()
            .next()
            .expect("nonempty n-best");
        hyps.push(best.surface().to_vec());
        refs.push(tgt.clone());
    }
    let bleu = corpus_bleu(&hyps, &refs, 4);
    println!("token_accuracy={:.6}", acc);
    println!("bleu={:.4}", bleu);
    Ok(())
}

/// Checkpoints in a directory, sorted by training step.
fn checkpoints_by_step(dir: &Path) -> Result<Vec<(u64, Checkpoint)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, &e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, &e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("msck") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(format!("no .msck checkpoints in {}", dir.display())).into());
    }
    let mut found = Vec::new();
    for path in paths {
        let ck = Checkpoint::load(&path)?;
        found.push((ck.step, ck));
    }
    found.sort_by_key(|(step, _)| *step);
    Ok(found)
}

pub fn difficulty(args: &Args) -> Result<(), CliError> {
    let dir = PathBuf::from(args.one("ckpt-dir")?);
    let k: usize = args.require_parse("k")?;
    let data_path = PathBuf::from(args.one("data")?);
    let out = PathBuf::from(args.one("out")?);
    args.finish()?;
    if k == 0 {
        return Err(Error::config("k", "must be at least 1").into());
    }
    let mut all = checkpoints_by_step(&dir)?;
    if all.len() < k {
        return Err(Error::format(format!(
            "requested the last {} checkpoints but {} holds only {}",
            k,
            dir.display(),
            all.len()
        ))
        .into());
    }
    let last_k: Vec<Checkpoint> = all.split_off(all.len() - k).into_iter().map(|(_, c)| c).collect();
    let cfg = last_k[0].config.clone();
    for ck in &last_k {
        if ck.config != cfg {
            return Err(Error::format("checkpoints in directory have differing configs".to_string()).into());
        }
    }
    let vocab = Vocab::numeric(cfg.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &cfg)?;
    let param_sets: Vec<_> = last_k.into_iter().map(|c| c.params).collect();
    let records = score_records(&cfg, &param_sets, &pairs)?;
    let parts = split_by_difficulty(&records, 4)?;
    let labeled: Vec<_> = parts.iter().flatten().cloned().collect();
    write_file(&out, &records_to_tsv(&labeled))?;
    for part in &parts {
        let label = part[0].label.expect("four-way split is labeled");
        let subset: Vec<_> = part.iter().map(|r| pairs[r.id].clone()).collect();
        let path = PathBuf::from(format!("{}.{}", out.display(), label.suffix()));
        write_pairs(&path, &subset, &vocab)?;
    }
    println!("scored {} pairs over {} checkpoints; splits next to {}", records.len(), k, out.display());
    Ok(())
}

pub fn gradnorms(args: &Args) -> Result<(), CliError> {
    let config_path = args.one("config")?.to_string();
    let data_path = PathBuf::from(args.one("data")?);
    let out = PathBuf::from(args.one("out")?);
    let steps: u64 = args.require_parse("steps")?;
    let seed = args.opt_parse::<u64>("seed")?;
    args.finish()?;
    let (cfg, mut tc) = load_config(&config_path)?;
    tc.max_steps = steps;
    if let Some(seed) = seed {
        tc.seed = seed;
    }
    let vocab = Vocab::numeric(cfg.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &cfg)?;
    let mut rows = Vec::new();
    let mut observer = |obs: &mscnet::train::StepObservation| -> bool {
        rows.extend(record_grad_norms(obs.tape, obs.trace, obs.bound, obs.step));
        true
    };
    train_loop(&cfg, &tc, &pairs, None, Some(&mut observer))?;
    write_file(&out, &grad_norms_to_csv(&rows))?;
    println!("wrote {} trace rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn gradcheck(args: &Args) -> Result<(), CliError> {
    let config_path = args.one("config")?.to_string();
    let seed: u64 = args.parse_or("seed", 1u64)?;
    args.finish()?;
    let (cfg, _) = load_config(&config_path)?;
    let mut all_pass = true;
    let mut worst: f64 = 0.0;
    for s in 0..10 {
        for report in primitive_suite(seed.wrapping_add(s)) {
            worst = worst.max(report.max_err);
            if !report.pass {
                all_pass = false;
                println!("FAIL {} (seed {}): max rel err {:.3e}", report.name, seed + s, report.max_err);
            }
        }
    }
    println!("primitives: {} (worst rel err {:.3e}, tolerance {:.0e})",
        if all_pass { "ok" } else { "FAILED" }, worst, FD_TOLERANCE);
    let model_report = check_model(&cfg, seed, 4);
    println!(
        "model loss vs finite differences: {} (max rel err {:.3e} over {} components)",
        if model_report.pass { "ok" } else { "FAILED" },
        model_report.max_err,
        model_report.checked
    );
    if all_pass && model_report.pass {
        Ok(())
    } else {
        Err(CliError { code: 1, message: "gradient check failed".to_string() })
    }
}

pub fn decompose(args: &Args) -> Result<(), CliError> {
    let ckpt_path = args.one("ckpt")?.to_string();
    let data_path = PathBuf::from(args.one("data")?);
    let block: usize = args.require_parse("block")?;
    args.finish()?;
    let ckpt = Checkpoint::load(Path::new(&ckpt_path))?;
    let vocab = Vocab::numeric(ckpt.config.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &ckpt.config)?;
    let sample = &pairs[..pairs.len().min(8)];
    let batch = mscnet::data::Batch::from_pairs(sample);
    let d = grad_path_decompose(&ckpt.config, &ckpt.params, &batch, block, 0.1)?;
    println!("block {} gradient decomposition ({} pairs):", block, sample.len());
    for (consumer, grad) in &d.contributions {
        let name = match consumer {
            Consumer::NextEncoderBlock => "next-encoder-block",
            Consumer::DecoderCrossAttention => "decoder-cross-attention",
            Consumer::ContextUpdate => "context-update",
        };
        println!("  {:<24} |grad| = {:.6e}", name, grad.l2_norm());
    }
    println!("  {:<24} |grad| = {:.6e}", "full", d.full.l2_norm());
    println!("  relative residual = {:.3e}", d.relative_residual);
    Ok(())
}

pub fn attention(args: &Args) -> Result<(), CliError> {
    let ckpt_path = args.one("ckpt")?.to_string();
    let src = args.one("src")?.to_string();
    let tgt = args.one("tgt")?.to_string();
    let all = args.parse_or("all", false)?;
    args.finish()?;
    let ckpt = Checkpoint::load(Path::new(&ckpt_path))?;
    let vocab = Vocab::numeric(ckpt.config.vocab_size)?;
    let scope = if all { ExportScope::All } else { ExportScope::TopDecoderLayer };
    let dump = export_attention(&ckpt.config, &ckpt.params, &vocab, &src, &tgt, scope)?;
    print!("{}", dump.to_json());
    Ok(())
}

pub fn average(args: &Args) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = args.values("ckpts")?.iter().map(PathBuf::from).collect();
    let out = PathBuf::from(args.one("out")?);
    args.finish()?;
    let avg = average_checkpoints(&paths)?;
    avg.save(&out)?;
    println!("averaged {} checkpoints into {}", paths.len(), out.display());
    Ok(())
}

pub fn ablate(args: &Args) -> Result<(), CliError> {
    let config_path = args.one("config")?.to_string();
    let flag = args.one("flag")?.to_string();
    let data_path = PathBuf::from(args.one("data")?);
    let steps = args.opt_parse::<u64>("steps")?;
    args.finish()?;
    let (cfg, mut tc) = load_config(&config_path)?;
    if let Some(steps) = steps {
        tc.max_steps = steps;
    }
    let vocab = Vocab::numeric(cfg.vocab_size)?;
    let pairs = read_pairs(&data_path, &vocab)?;
    check_lengths(&pairs, &cfg)?;
    let rows = ablate_compare(&cfg, &tc, &pairs, &flag)?;
    println!("variant\tfinal_loss\ttoken_accuracy");
    for r in rows {
        println!("{}={}\t{:.6}\t{:.6}", r.flag, r.enabled, r.final_loss, r.token_accuracy);
    }
    Ok(())
}
