use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use mixmem::io::{load_dataset_csv, load_model_json, save_dataset_csv, save_model_json};
use mixmem::moments::{block_tensor, negative_fraction};
use mixmem::partition::{build_partition_plan, default_anchors, default_partition_count, fit_partitioned, IndexTriple};
use mixmem::sim::{contaminate_with, rmse_aligned, sample_model, simulate_dataset};
use mixmem::{Dataset, Error, FitOptions, FitResult, ModelParams, PartitionPlan, Result};

use crate::args::{BenchArgs, Command, Common, EvalArgs, FitArgs, NegfracArgs, SimulateArgs};

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub seed: u64,
    pub params: Value,
    pub metrics: Metrics,
    pub partition_reports: Vec<PartitionReport>,
}

#[derive(Debug, Default, Serialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtimes: Option<Vec<RuntimeRow>>,
}

#[derive(Debug, Serialize)]
pub struct RuntimeRow {
    pub partitions: usize,
    /// Median wall-clock seconds over the repeats.
    pub seconds: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct PartitionReport {
    pub index: usize,
    pub variables: IndexTriple,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub permutation: Option<Vec<usize>>,
    pub valid: bool,
    pub repaired: bool,
    pub score: f64,
    pub anchor_bound: bool,
}

/// Runs one subcommand. `Err` carries the failure that decides the exit status; a strict
/// non-convergence failure still writes every output first.
pub fn run(command: Command) -> Result<()> {
    let (report, common, failure) = match command {
        Command::Simulate(a) => (simulate(&a)?, a.common, None),
        Command::Fit(a) => {
            let (report, failure) = fit(&a)?;
            (report, a.common, failure)
        }
        Command::Eval(a) => (eval(&a)?, a.common, None),
        Command::Negfrac(a) => (negfrac(&a)?, a.common, None),
        Command::Bench(a) => {
            let (report, failure) = bench(&a)?;
            (report, a.common, failure)
        }
    };
    emit(&report, &common)?;
    failure.map_or(Ok(()), Err)
}

fn emit(report: &Report, common: &Common) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    match &common.report {
        Some(path) => write_file(path, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn params_value(args: &impl Serialize) -> Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn simulate(a: &SimulateArgs) -> Result<Report> {
    let cfg = a.config();
    eprintln!("seed: {}", cfg.seed);
    let truth = sample_model(&cfg)?;
    let data = simulate_dataset(&truth, &cfg)?;
    let data = contaminate_with(&data, cfg.delta, cfg.seed, a.contamination)?;
    save_dataset_csv(&data, &a.data)?;
    save_model_json(&truth, None, &a.truth)?;
    eprintln!("wrote {} rows × {} variables to {}", data.n(), data.p(), a.data.display());
    Ok(Report {
        command: "simulate",
        seed: cfg.seed,
        params: params_value(a),
        metrics: Metrics::default(),
        partition_reports: Vec::new(),
    })
}

fn plan_for(
    data: &Dataset,
    k: usize,
    anchors: Option<IndexTriple>,
    partitions: Option<usize>,
    seed: u64,
) -> Result<PartitionPlan> {
    let anchors = match anchors {
        Some(a) => a,
        None => default_anchors(data.p(), k, data.categories())?,
    };
    let r = partitions.unwrap_or_else(|| default_partition_count(data.p(), k, data.categories(), &anchors));
    build_partition_plan(data.p(), k, data.categories(), Some(anchors), r, seed)
}

fn partition_reports(plan: &PartitionPlan, fit: &FitResult) -> Vec<PartitionReport> {
    plan.partitions()
        .iter()
        .enumerate()
        .map(|(s, sets)| PartitionReport {
            index: s,
            variables: sets.clone(),
            converged: fit.converged[s],
            iterations: fit.iterations[s],
            objective: fit.objectives[s],
            permutation: fit.reports[s].permutation.as_ref().map(|p| p.as_slice().to_vec()),
            valid: fit.reports[s].valid,
            repaired: fit.reports[s].repaired,
            score: fit.reports[s].score,
            anchor_bound: fit.anchor_bound[s],
        })
        .collect()
}

fn non_convergence(fit: &FitResult, max_iters: usize) -> Option<Error> {
    let stuck: Vec<usize> = (0..fit.converged.len()).filter(|&s| !fit.converged[s]).collect();
    (!stuck.is_empty()).then(|| {
        Error::Solver(format!("partitions {stuck:?} did not converge within {max_iters} iterations"))
    })
}

fn load_truth(path: Option<&Path>) -> Result<Option<ModelParams>> {
    path.map(|p| load_model_json(p).map(|doc| doc.params)).transpose()
}

fn fit(a: &FitArgs) -> Result<(Report, Option<Error>)> {
    let seed = a.common.seed;
    eprintln!("seed: {seed}");
    let opts = a.solver.fit_options(seed)?;
    let data = load_dataset_csv(&a.data)?;
    let truth = load_truth(a.truth.as_deref())?;
    let plan = plan_for(&data, a.k, a.anchors.clone(), a.partitions, seed)?;
    log::info!("fitting {} partitions", plan.r());
    let fit = fit_partitioned(&data, a.k, a.alpha0, &plan, &opts)?;
    save_model_json(&fit.params, Some(&fit.weights), &a.out)?;
    let rmse = truth.map(|t| rmse_aligned(&fit.params, &t)).transpose()?;
    if let Some(r) = rmse {
        eprintln!("rmse: {r}");
    }
    let failure = if a.solver.strict { non_convergence(&fit, a.solver.max_iters) } else { None };
    let report = Report {
        command: "fit",
        seed,
        params: params_value(a),
        metrics: Metrics { rmse, ..Metrics::default() },
        partition_reports: partition_reports(&plan, &fit),
    };
    Ok((report, failure))
}

fn eval(a: &EvalArgs) -> Result<Report> {
    eprintln!("seed: {}", a.common.seed);
    let est = load_model_json(&a.estimate)?.params;
    let truth = load_model_json(&a.truth)?.params;
    let rmse = rmse_aligned(&est, &truth)?;
    eprintln!("rmse: {rmse}");
    Ok(Report {
        command: "eval",
        seed: a.common.seed,
        params: params_value(a),
        metrics: Metrics { rmse: Some(rmse), ..Metrics::default() },
        partition_reports: Vec::new(),
    })
}

fn negfrac(a: &NegfracArgs) -> Result<Report> {
    eprintln!("seed: {}", a.common.seed);
    let data = load_dataset_csv(&a.data)?;
    let t = block_tensor(&data, &a.block[0], &a.block[1], &a.block[2], a.alpha0)?;
    let fraction = negative_fraction(&t);
    eprintln!("negative fraction: {fraction}");
    Ok(Report {
        command: "negfrac",
        seed: a.common.seed,
        params: params_value(a),
        metrics: Metrics { negative_fraction: Some(fraction), ..Metrics::default() },
        partition_reports: Vec::new(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn bench(a: &BenchArgs) -> Result<(Report, Option<Error>)> {
    let seed = a.common.seed;
    eprintln!("seed: {seed}");
    let opts: FitOptions = a.solver.fit_options(seed)?;
    let data = load_dataset_csv(&a.data)?;
    let truth = load_truth(a.truth.as_deref())?;
    let plans = a
        .partitions
        .iter()
        .map(|&r| plan_for(&data, a.k, a.anchors.clone(), Some(r), seed))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut failure = None;
    eprintln!("{:>10}  {:>10}  {:>12}", "partitions", "seconds", "rmse");
    for plan in &plans {
        let mut times = Vec::new();
        let mut last = None;
        for _ in 0..a.repeats {
            let start = Instant::now();
            let fit = fit_partitioned(&data, a.k, a.alpha0, plan, &opts)?;
            times.push(start.elapsed().as_secs_f64());
            last = Some(fit);
        }
        let fit = last.expect("at least one repeat");
        let rmse = truth.as_ref().map(|t| rmse_aligned(&fit.params, t)).transpose()?;
        let row = RuntimeRow { partitions: plan.r(), seconds: median(times), converged: fit.all_converged(), rmse };
        eprintln!(
            "{:>10}  {:>10.3}  {:>12}",
            row.partitions,
            row.seconds,
            row.rmse.map_or_else(|| "-".into(), |r| format!("{r:.6}"))
        );
        if a.solver.strict && failure.is_none() {
            failure = non_convergence(&fit, a.solver.max_iters);
        }
        rows.push(row);
    }
    let report = Report {
        command: "bench",
        seed,
        params: params_value(a),
        metrics: Metrics { runtimes: Some(rows), ..Metrics::default() },
        partition_reports: Vec::new(),
    };
    Ok((report, failure))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
