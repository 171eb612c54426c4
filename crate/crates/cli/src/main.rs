//! `msc` — train, decode, and analyze multiscale collaborative Transformers.
//!
//! Exit codes: 0 success, 1 usage or runtime failure, 2 missing input file,
//! 3 configuration violation. Output files never contain wall-clock data,
//! so reruns with the same seed are byte-for-byte reproducible.

mod verbs;

use std::process::ExitCode;

use mscnet::Error;

const USAGE: &str = "\
usage: msc <verb> [flags]

verbs:
  gen        --task T --vocab N --out DIR [--min-len A --max-len B
             --train N --valid N --test N --seed S]
  train      --config F --data D --out O [--steps N --seed S]
  decode     --ckpt C --input F [--beam B --lenpen A --max-len L]
  eval       --ckpt C --data D [--beam B --lenpen A --max-len L]
  difficulty --ckpt-dir DIR --k K --data D --out F
  gradnorms  --config F --data D --steps N --out F
  gradcheck  --config F [--seed S]
  decompose  --ckpt C --data D --block N
  attention  --ckpt C --src 'tokens' --tgt 'tokens' [--all true]
  average    --ckpts C1 [C2 ...] --out F
  ablate     --config F --flag NAME --data D [--steps N]
";

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.message);
            ExitCode::from(err.code)
        }
    }
}

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { code: 1, message: format!("{}\n\n{}", message.into(), USAGE) }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> CliError {
        let code = match &err {
            Error::MissingFile { .. } => 2,
            Error::Config { .. } => 3,
            _ => 1,
        };
        CliError { code, message: err.to_string() }
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let Some(verb) = argv.first() else {
        return Err(CliError::usage("missing verb"));
    };
    let args = Args::parse(&argv[1..])?;
    match verb.as_str() {
        "gen" => verbs::gen(&args),
        "train" => verbs::train(&args),
        "decode" => verbs::decode(&args),
        "eval" => verbs::eval(&args),
        "difficulty" => verbs::difficulty(&args),
        "gradnorms" => verbs::gradnorms(&args),
        "gradcheck" => verbs::gradcheck(&args),
        "decompose" => verbs::decompose(&args),
        "attention" => verbs::attention(&args),
        "average" => verbs::average(&args),
        "ablate" => verbs::ablate(&args),
        other => Err(CliError::usage(format!("unknown verb '{}'", other))),
    }
}

/// Flag parser: every flag is `--name` followed by one or more values.
pub struct Args {
    flags: Vec<(String, Vec<String>)>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl Args {
    fn parse(tokens: &[String]) -> Result<Args, CliError> {
        let mut flags: Vec<(String, Vec<String>)> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let tok = &tokens[i];
            let Some(name) = tok.strip_prefix("--") else {
                return Err(CliError::usage(format!("unexpected positional argument '{}'", tok)));
            };
            let mut values = Vec::new();
            i += 1;
            while i < tokens.len() && !tokens[i].starts_with("--") {
                values.push(tokens[i].clone());
                i += 1;
            }
            if values.is_empty() {
                return Err(CliError::usage(format!("flag --{} needs a value", name)));
            }
            if flags.iter().any(|(n, _)| n == name) {
                return Err(CliError::usage(format!("duplicate flag --{}", name)));
            }
            flags.push((name.to_string(), values));
        }
        Ok(Args { flags, consumed: std::cell::RefCell::new(Vec::new()) })
    }

    fn lookup(&self, name: &str) -> Option<&Vec<String>> {
        self.consumed.borrow_mut().push(name.to_string());
        self.flags.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn values(&self, name: &str) -> Result<&[String], CliError> {
        self.lookup(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| CliError::usage(format!("missing required flag --{}", name)))
    }

    pub fn one(&self, name: &str) -> Result<&str, CliError> {
        let values = self.values(name)?;
        if values.len() != 1 {
            return Err(CliError::usage(format!("flag --{} takes exactly one value", name)));
        }
        Ok(&values[0])
    }

    pub fn opt(&self, name: &str) -> Result<Option<&str>, CliError> {
        match self.lookup(name) {
            None => Ok(None),
            Some(v) if v.len() == 1 => Ok(Some(&v[0])),
            Some(_) => Err(CliError::usage(format!("flag --{} takes exactly one value", name))),
        }
    }

    pub fn opt_parse<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.opt(name)? {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::usage(format!("flag --{} has invalid value '{}'", name, v))),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, CliError> {
        Ok(self.opt_parse(name)?.unwrap_or(default))
    }

    pub fn require_parse<T: std::str::FromStr>(&self, name: &str) -> Result<T, CliError> {
        let v = self.one(name)?;
        v.parse()
            .map_err(|_| CliError::usage(format!("flag --{} has invalid value '{}'", name, v)))
    }

    /// Reject flags that no accessor asked about.
    pub fn finish(&self) -> Result<(), CliError> {
        let seen = self.consumed.borrow();
        for (name, _) in &self.flags {
            if !seen.iter().any(|s| s == name) {
                return Err(CliError::usage(format!("unknown flag --{}", name)));
            }
        }
        Ok(())
    }
}
