//! Partitioned estimation: split the variables into small groups that each share a fixed
//! set of anchor variables, factorize one block tensor per group, and use the anchors to
//! put every group's components in the same order.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{
    apply_permutation, check_procrustes_bound, normalize_columns, MatchReport, Matcher, Permutation,
};
use crate::moments::{block_tensor, population_block_tensor, stack_rows, Dataset, ModelParams};
use crate::pqp::{factorize_best_of, FactorizeOptions};
use crate::rng::{derive_seed, purpose, stream};
use crate::tensor::{Mode, Tensor3};

pub type IndexTriple = [Vec<usize>; 3];

/// Anchor sets plus one variable triple per partition. Every partition's mode-`m` set starts
/// with the mode-`m` anchors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    p: usize,
    anchors: IndexTriple,
    partitions: Vec<IndexTriple>,
}

impl PartitionPlan {
    /// Checks the plan invariants: anchors in every partition, pairwise disjoint sets within
    /// each triple, and every variable in `0..p` covered.
    pub fn new(p: usize, anchors: IndexTriple, partitions: Vec<IndexTriple>) -> Result<Self> {
        let plan = PartitionPlan { p, anchors, partitions };
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if self.partitions.is_empty() {
            return Err(Error::Plan("plan has no partitions".into()));
        }
        let mut covered = vec![false; self.p];
        for (u, triple) in self.partitions.iter().enumerate() {
            let mut seen = vec![false; self.p];
            for (m, set) in triple.iter().enumerate() {
                if set.is_empty() {
                    return Err(Error::Plan(format!("partition {u}, mode {}: empty set", m + 1)));
                }
                if !set.starts_with(&self.anchors[m]) {
                    return Err(Error::Plan(format!(
                        "partition {u}, mode {}: does not start with the anchors",
                        m + 1
                    )));
                }
                for &v in set {
                    if v >= self.p {
                        return Err(Error::Plan(format!("variable {v} out of range for p = {}", self.p)));
                    }
                    if std::mem::replace(&mut seen[v], true) {
                        return Err(Error::Plan(format!("partition {u}: variable {v} repeated")));
                    }
                    covered[v] = true;
                }
            }
        }
        if let Some(v) = covered.iter().position(|&c| !c) {
            return Err(Error::Plan(format!("variable {v} is in no partition")));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.partitions.len()
    }

    pub fn anchors(&self) -> &IndexTriple {
        &self.anchors
    }

    /// Anchors of all three modes in mode order.
    pub fn anchor_list(&self) -> Vec<usize> {
        self.anchors.concat()
    }

    pub fn partitions(&self) -> &[IndexTriple] {
        &self.partitions
    }

    /// The same plan with its partitions listed in a different order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        Permutation::new(order.to_vec())?;
        if order.len() != self.r() {
            return Err(Error::arg("order length differs from partition count"));
        }
        PartitionPlan::new(
            self.p,
            self.anchors.clone(),
            order.iter().map(|&u| self.partitions[u].clone()).collect(),
        )
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// First `⌈k/d_min⌉` variables for mode 1, the next as many for mode 2, and so on.
pub fn default_anchors(p: usize, k: usize, categories: &[usize]) -> Result<IndexTriple> {
    let d_min = categories.iter().copied().min().unwrap_or(0);
    if d_min == 0 || k == 0 {
        return Err(Error::arg("need k ≥ 1 and at least one variable with categories"));
    }
    let m = ceil_div(k, d_min);
    if 3 * m > p {
        return Err(Error::arg(format!("default anchors need {} variables, only {p} available", 3 * m)));
    }
    Ok([(0..m).collect(), (m..2 * m).collect(), (2 * m..3 * m).collect()])
}

/// Partition count giving roughly `max(1, ⌈k/d_min⌉)` non-anchor variables per mode in
/// each partition.
pub fn default_partition_count(p: usize, k: usize, categories: &[usize], anchors: &IndexTriple) -> usize {
    let d_min = categories.iter().copied().min().unwrap_or(1).max(1);
    let per_mode = ceil_div(k, d_min).max(1);
    let rest = p.saturating_sub(anchors.iter().map(Vec::len).sum());
    (rest / (3 * per_mode)).max(1)
}

/// Shuffles the non-anchor variables with a seeded stream and deals them round-robin: the
/// `s`-th shuffled variable goes to partition `s mod r`, mode `⌊s/r⌋ mod 3`.
pub fn build_partition_plan(
    p: usize,
    k: usize,
    categories: &[usize],
    anchors: Option<IndexTriple>,
    r: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if categories.len() != p {
        return Err(Error::arg(format!("{} category counts for p = {p}", categories.len())));
    }
    if r == 0 {
        return Err(Error::arg("partition count must be at least 1"));
    }
    let anchors = match anchors {
        Some(a) => a,
        None => default_anchors(p, k, categories)?,
    };
    let mut is_anchor = vec![false; p];
    for (m, set) in anchors.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Plan(format!("anchor set for mode {} is empty", m + 1)));
        }
        for &v in set {
            if v >= p {
                return Err(Error::arg(format!("anchor {v} out of range for p = {p}")));
            }
            if std::mem::replace(&mut is_anchor[v], true) {
                return Err(Error::arg(format!("anchor {v} appears more than once")));
            }
        }
        let rows: usize = set.iter().map(|&v| categories[v]).sum();
        if rows < k {
            return Err(Error::Plan(format!(
                "mode {} anchors have {rows} categories in total, fewer than k = {k}",
                m + 1
            )));
        }
    }
    let mut rest: Vec<usize> = (0..p).filter(|&v| !is_anchor[v]).collect();
    if r > rest.len().max(1) {
        return Err(Error::arg(format!(
            "{r} partitions requested but only {} non-anchor variables",
            rest.len()
        )));
    }
    rest.shuffle(&mut stream(seed, purpose::PLAN, 0));
    let mut partitions: Vec<IndexTriple> = vec![anchors.clone(); r];
    for (s, v) in rest.into_iter().enumerate() {
        partitions[s % r][(s / r) % 3].push(v);
    }
    PartitionPlan::new(p, anchors, partitions)
}

/// Where block tensors come from: data (empirical estimators) or a known model.
pub trait MomentSource: Sync {
    fn categories(&self) -> Vec<usize>;
    fn alpha0(&self) -> Option<f64>;
    fn block(&self, sets: &IndexTriple) -> Result<Tensor3>;
}

pub struct Empirical<'a> {
    pub data: &'a Dataset,
    pub alpha0: f64,
}

impl MomentSource for Empirical<'_> {
    fn categories(&self) -> Vec<usize> {
        self.data.categories().to_vec()
    }

    fn alpha0(&self) -> Option<f64> {
        Some(self.alpha0)
    }

    fn block(&self, sets: &IndexTriple) -> Result<Tensor3> {
        block_tensor(self.data, &sets[0], &sets[1], &sets[2], self.alpha0)
    }
}

pub struct Population<'a>(pub &'a ModelParams);

impl MomentSource for Population<'_> {
    fn categories(&self) -> Vec<usize> {
        self.0.categories()
    }

    fn alpha0(&self) -> Option<f64> {
        self.0.alpha0()
    }

    fn block(&self, sets: &IndexTriple) -> Result<Tensor3> {
        population_block_tensor(self.0, &sets[0], &sets[1], &sets[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub factorize: FactorizeOptions,
    pub restarts: usize,
    pub matcher: Matcher,
    /// Concurrent partition factorizations; `None` uses all available cores.
    pub workers: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            factorize: FactorizeOptions::default(),
            restarts: 3,
            matcher: Matcher::Procrustes,
            workers: None,
        }
    }
}

/// One partition's factorization sliced back into per-variable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutput {
    /// Column-stochastic `θ_j` for every variable in the partition.
    pub thetas: BTreeMap<usize, DMatrix<f64>>,
    pub weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

impl PartitionOutput {
    fn permuted(&self, psi: &Permutation) -> Result<PartitionOutput> {
        let thetas = self
            .thetas
            .iter()
            .map(|(&v, t)| Ok((v, apply_permutation(psi, t)?)))
            .collect::<Result<_>>()?;
        let weights = DVector::from_iterator(psi.len(), psi.as_slice().iter().map(|&h| self.weights[h]));
        Ok(PartitionOutput { thetas, weights, ..self.clone() })
    }
}

/// Stacked anchor parameters of one partition, columns scaled to unit Euclidean norm.
pub fn anchor_matrix(output: &PartitionOutput, anchors: &[usize]) -> Result<DMatrix<f64>> {
    let k = output.weights.len();
    let blocks = anchors
        .iter()
        .map(|v| {
            output
                .thetas
                .get(v)
                .ok_or_else(|| Error::arg(format!("partition output lacks anchor variable {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_columns(&stack_rows(blocks.into_iter(), k))
}

/// Result of [`stitch`]: the combined model, the permutation applied to each partition and
/// the matching reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub params: ModelParams,
    pub permutations: Vec<Permutation>,
    pub reports: Vec<MatchReport>,
    pub outputs: Vec<PartitionOutput>,
}

/// Aligns every partition to partition 0 via the stacked anchor matrices and merges the
/// per-variable blocks. Anchor variables take partition 0's estimate.
pub fn stitch(
    outputs: &[PartitionOutput],
    anchors: &[usize],
    matcher: Matcher,
    alpha0: Option<f64>,
) -> Result<Stitched> {
    let first = outputs.first().ok_or_else(|| Error::arg("nothing to stitch"))?;
    let k = first.weights.len();
    let reference = anchor_matrix(first, anchors)?;
    let identity = Permutation::identity(k);

    let mut permutations = Vec::with_capacity(outputs.len());
    let mut reports = Vec::with_capacity(outputs.len());
    let mut aligned = Vec::with_capacity(outputs.len());
    for (u, out) in outputs.iter().enumerate() {
        let report = if u == 0 {
            MatchReport {
                permutation: Some(identity.clone()),
                valid: true,
                repaired: false,
                score: 1.0,
            }
        } else {
            matcher.run(&reference, &identity, &anchor_matrix(out, anchors)?)?
        };
        let psi = report.permutation.clone().ok_or_else(|| Error::Matching {
            partition: u,
            reason: "anchor similarity matrix is rank deficient".into(),
        })?;
        if report.repaired {
            warn!("partition {u}: duplicate assignments repaired greedily");
        }
        aligned.push(out.permuted(&psi)?);
        permutations.push(psi);
        reports.push(report);
    }

    let mut merged: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    for out in &aligned {
        for (&v, theta) in &out.thetas {
            merged.entry(v).or_insert_with(|| theta.clone());
        }
    }
    let p = merged.keys().next_back().map_or(0, |&v| v + 1);
    if merged.len() != p {
        let missing = (0..p).find(|v| !merged.contains_key(v)).unwrap_or(0);
        return Err(Error::arg(format!("variable {missing} is in no partition output")));
    }
    let params = ModelParams::from_thetas(merged.into_values().collect(), alpha0)?;
    Ok(Stitched {
        params,
        permutations,
        reports,
        outputs: aligned,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Estimated `θ_j`; only `alpha0` is known, not the full concentration vector.
    pub params: ModelParams,
    pub reports: Vec<MatchReport>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub objectives: Vec<f64>,
    /// Absorbed CP column scales per partition, in the stitched component order.
    pub weights: Vec<DVector<f64>>,
    /// Partition 0's normalized stacked anchor parameters.
    pub anchor_matrix: DMatrix<f64>,
    /// Per partition, whether the Procrustes consistency condition held between its aligned
    /// anchor matrix and partition 0's.
    pub anchor_bound: Vec<bool>,
}

impl FitResult {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Seed for a partition, derived from its variable sets so that reordering a plan's
/// partitions does not change any single partition's factorization.
fn partition_seed(seed: u64, sets: &IndexTriple) -> u64 {
    let mut s = derive_seed(seed, purpose::PARTITION, 0);
    for (m, set) in sets.iter().enumerate() {
        s = derive_seed(s, purpose::PARTITION, m as u64 + 1);
        for &v in set {
            s = derive_seed(s, purpose::PARTITION, v as u64);
        }
    }
    s
}

/// Factorizes one partition's block tensor and slices the stacked factors per variable.
pub fn factorize_partition(
    source: &dyn MomentSource,
    sets: &IndexTriple,
    k: usize,
    opts: &FitOptions,
) -> Result<PartitionOutput> {
    let categories = source.categories();
    let block = source.block(sets)?;
    let fopts = FactorizeOptions {
        seed: partition_seed(opts.factorize.seed, sets),
        ..opts.factorize
    };
    let fit = factorize_best_of(&block, k, &fopts, opts.restarts)?;
    let mut thetas = BTreeMap::new();
    for mode in Mode::ALL {
        let factor = fit.factors.factor(mode);
        let mut row = 0;
        for &v in &sets[mode.index()] {
            let d = categories[v];
            let mut theta = factor.rows(row, d).into_owned();
            for mut col in theta.column_iter_mut() {
                let s: f64 = col.iter().sum();
                if s > 0.0 {
                    col /= s;
                } else {
                    col.fill(1.0 / d as f64);
                }
            }
            thetas.insert(v, theta);
            row += d;
        }
    }
    Ok(PartitionOutput {
        thetas,
        weights: fit.factors.weights.clone(),
        converged: fit.converged,
        iterations: fit.iterations,
        objective: fit.objective,
    })
}

/// Fits the model from data with the empirical block estimators.
pub fn fit_partitioned(
    data: &Dataset,
    k: usize,
    alpha0: f64,
    plan: &PartitionPlan,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_partitioned_with(&Empirical { data, alpha0 }, k, plan, opts)
}

const ANCHOR_RANK_TOL: f64 = 1e-6;

pub fn fit_partitioned_with(
    source: &dyn MomentSource,
    k: usize,
    plan: &PartitionPlan,
    opts: &FitOptions,
) -> Result<FitResult> {
    let categories = source.categories();
    if categories.len() != plan.p() {
        return Err(Error::arg(format!(
            "plan covers {} variables, data has {}",
            plan.p(),
            categories.len()
        )));
    }
    if let Some(j) = categories.iter().position(|&d| d < 2) {
        return Err(Error::Unsupported(format!(
            "variable {j} is numeric; partitioned fitting needs categorical variables"
        )));
    }
    if k == 0 || opts.restarts == 0 {
        return Err(Error::arg("k and restarts must be at least 1"));
    }
    opts.factorize.validate()?;

    let run = || {
        plan.partitions()
            .par_iter()
            .map(|sets| factorize_partition(source, sets, k, opts))
            .collect::<Result<Vec<_>>>()
    };
    let outputs = match opts.workers {
        Some(0) => return Err(Error::arg("workers must be at least 1")),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Solver(format!("cannot start worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    for (u, out) in outputs.iter().enumerate() {
        debug!(
            "partition {u}: objective {:.3e} after {} iterations (converged: {})",
            out.objective, out.iterations, out.converged
        );
    }

    let anchors = plan.anchor_list();
    let stitched = stitch(&outputs, &anchors, opts.matcher, source.alpha0())?;
    let reference = anchor_matrix(&stitched.outputs[0], &anchors)?;
    let sv = reference.singular_values();
    if sv.min() <= ANCHOR_RANK_TOL {
        warn!("anchor matrix is close to rank deficient (σ_k = {:.3e})", sv.min());
    }
    let mut anchor_bound = Vec::with_capacity(outputs.len());
    for (u, out) in stitched.outputs.iter().enumerate() {
        let aligned = anchor_matrix(out, &anchors)?;
        let ok = check_procrustes_bound(&reference, &aligned, &Permutation::identity(k))?.satisfied;
        if !ok {
            warn!("partition {u}: anchor estimates outside the Procrustes consistency bound");
        }
        anchor_bound.push(ok);
    }

    Ok(FitResult {
        params: stitched.params,
        reports: stitched.reports,
        converged: stitched.outputs.iter().map(|o| o.converged).collect(),
        iterations: stitched.outputs.iter().map(|o| o.iterations).collect(),
        objectives: stitched.outputs.iter().map(|o| o.objective).collect(),
        weights: stitched.outputs.iter().map(|o| o.weights.clone()).collect(),
        anchor_matrix: reference,
        anchor_bound,
    })
}
