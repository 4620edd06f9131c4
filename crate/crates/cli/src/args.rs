use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use mixmem::matching::Matcher;
use mixmem::partition::IndexTriple;
use mixmem::pqp::FactorizeOptions;
use mixmem::sim::{Contamination, SimConfig};
use mixmem::{Error, FitOptions, Result};

/// Learn mixed membership models from categorical data with partitioned moment tensors.
#[derive(Debug, Parser)]
#[command(name = "mixmem", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a model and a dataset from it.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Aligned RMSE between an estimate and the true model.
    Eval(EvalArgs),
    /// Fraction of negative entries in an empirical block tensor.
    Negfrac(NegfracArgs),
    /// Fit runtime across partition counts.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report to this file instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = FactorizeOptions::default().max_iters)]
    pub max_iters: usize,
    #[arg(long, default_value_t = FactorizeOptions::default().rel_tol)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = FactorizeOptions::default().epsilon)]
    pub epsilon: f64,
    /// Random initializations per partition; the lowest objective wins.
    #[arg(long, default_value_t = FitOptions::default().restarts)]
    pub restarts: usize,
    /// procrustes or smallest-angle.
    #[arg(long, default_value = "procrustes")]
    pub matcher: Matcher,
    /// Concurrent partition factorizations [default: available parallelism].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// Exit with status 4 when any partition stops before converging.
    #[arg(long)]
    pub strict: bool,
}

impl SolverArgs {
    pub fn fit_options(&self, seed: u64) -> Result<FitOptions> {
        let factorize = FactorizeOptions {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            epsilon: self.epsilon,
            seed,
        };
        factorize.validate()?;
        if self.restarts == 0 {
            return Err(Error::Argument("restarts must be at least 1".into()));
        }
        Ok(FitOptions {
            factorize,
            restarts: self.restarts,
            matcher: self.matcher,
            workers: self.workers.map(|w| w as usize),
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = SimConfig::default().p)]
    pub p: usize,
    #[arg(long, default_value_t = SimConfig::default().k)]
    pub k: usize,
    /// Categories per variable.
    #[arg(long, default_value_t = SimConfig::default().d)]
    pub d: usize,
    /// Concentration of each component in the membership distribution.
    #[arg(long, default_value_t = SimConfig::default().alpha_h)]
    pub alpha_h: f64,
    /// Dirichlet parameter of each θ column, one value per category.
    #[arg(long, value_delimiter = ',')]
    pub theta_prior: Option<Vec<f64>>,
    #[arg(long, default_value_t = SimConfig::default().n)]
    pub n: usize,
    /// Fraction of entries (or rows) replaced by uniform noise.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// cells or rows.
    #[arg(long, default_value = "cells")]
    pub contamination: Contamination,
    /// Output dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    pub truth: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl SimulateArgs {
    pub fn config(&self) -> SimConfig {
        SimConfig {
            p: self.p,
            k: self.k,
            d: self.d,
            alpha_h: self.alpha_h,
            theta_prior: self.theta_prior.clone(),
            n: self.n,
            delta: self.delta,
            seed: self.common.seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct FitArgs {
    /// Input dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// Total concentration of the membership distribution.
    #[arg(long)]
    pub alpha0: f64,
    /// Partition count [default: about ⌈k/d_min⌉ non-anchor variables per mode].
    #[arg(long)]
    pub partitions: Option<usize>,
    /// Anchor variables per mode, e.g. `0,1:2,3:4,5`.
    #[arg(long, value_parser = parse_triple)]
    pub anchors: Option<IndexTriple>,
    /// Output model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// True model JSON; adds the aligned RMSE to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Estimated model JSON.
    #[arg(long)]
    pub estimate: PathBuf,
    /// True model JSON.
    #[arg(long)]
    pub truth: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct NegfracArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub alpha0: f64,
    /// Variables per mode of the block, e.g. `0:1:2`.
    #[arg(long, value_parser = parse_triple, default_value = "0:1:2")]
    pub block: IndexTriple,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub alpha0: f64,
    /// Partition counts to time, e.g. `5,10,20`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub partitions: Vec<usize>,
    /// Timed fits per partition count; the median is reported.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    #[arg(long, value_parser = parse_triple)]
    pub anchors: Option<IndexTriple>,
    /// True model JSON; adds the aligned RMSE of each fit.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

/// Parses `a,b:c:d,e` into three variable lists.
pub fn parse_triple(s: &str) -> std::result::Result<IndexTriple, String> {
    let modes: Vec<&str> = s.split(':').collect();
    if modes.len() != 3 {
        return Err(format!("expected three ':'-separated variable lists, got {}", modes.len()));
    }
    let mut out: IndexTriple = Default::default();
    for (slot, mode) in out.iter_mut().zip(modes) {
        *slot = mode
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
    }
    Ok(out)
}

/// Replaces `--config FILE` with the file's keys spelled as flags, placed right after the
/// subcommand so that flags given on the command line take precedence.
pub fn expand_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy().into_owned();
        if arg == "--config" {
            if i + 1 >= argv.len() {
                return Err(Error::Argument("--config needs a file".into()));
            }
            path = Some(PathBuf::from(argv.remove(i + 1)));
            argv.remove(i);
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let flags = config_flags(&path)?;
    let at = argv.len().min(2);
    argv.splice(at..at, flags);
    Ok(argv)
}

fn config_flags(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: format!("{}: {e}", path.display()),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::Parse { line: 1, message: format!("{}: expected a JSON object", path.display()) });
    };
    let mut flags = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => flags.push(flag.into()),
            other => {
                let text = flag_value(&other)
                    .ok_or_else(|| Error::Argument(format!("config key {key:?} has an unsupported value")))?;
                flags.push(flag.into());
                flags.push(text.into());
            }
        }
    }
    Ok(flags)
}

/// Scalars as text, flat arrays joined by ',', nested arrays (variable triples) by ':'.
fn flag_value(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) if items.iter().all(Value::is_array) => {
            let parts: Option<Vec<String>> = items.iter().map(flag_value).collect();
            Some(parts?.join(":"))
        }
        Value::Array(items) => {
            let parts: Option<Vec<String>> = items.iter().map(flag_value).collect();
            Some(parts?.join(","))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_parse() {
        assert_eq!(parse_triple("0,1:2:3,4").unwrap(), [vec![0, 1], vec![2], vec![3, 4]]);
        assert!(parse_triple("0:1").is_err());
        assert!(parse_triple("0:x:1").is_err());
    }

    #[test]
    fn config_values_become_flag_text() {
        let v: Value = serde_json::json!([[0, 1], [2], [3]]);
        assert_eq!(flag_value(&v).unwrap(), "0,1:2:3");
        assert_eq!(flag_value(&serde_json::json!([5, 10])).unwrap(), "5,10");
        assert_eq!(flag_value(&serde_json::json!(0.25)).unwrap(), "0.25");
        assert!(flag_value(&serde_json::json!({"a": 1})).is_none());
    }

    #[test]
    fn command_line_flags_follow_config_flags() {
        let dir = std::env::temp_dir().join(format!("mixmem-args-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{"n": 50, "strict": true, "report": null}"#).unwrap();
        let argv: Vec<OsString> = ["mixmem", "--config", path.to_str().unwrap(), "simulate", "--n", "7"]
            .iter()
            .map(OsString::from)
            .collect();
        let out = expand_config(argv).unwrap();
        let out: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(out, ["mixmem", "simulate", "--n", "50", "--strict", "--n", "7"]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
