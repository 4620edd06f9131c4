//! Synthetic data from the Dirichlet mixed membership model, uniform contamination and
//! permutation-aligned error.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{apply_permutation, match_procrustes, Permutation, BRUTE_FORCE_MAX_K};
use crate::moments::{Dataset, ModelParams};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub p: usize,
    pub k: usize,
    /// Categories per variable.
    pub d: usize,
    /// Concentration of every component in the membership distribution.
    pub alpha_h: f64,
    /// Dirichlet parameter for each `θ_j` column; `None` means 0.5 in every category.
    pub theta_prior: Option<Vec<f64>>,
    pub n: usize,
    /// Fraction of entries replaced by uniform noise.
    pub delta: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            p: 25,
            k: 3,
            d: 4,
            alpha_h: 0.1,
            theta_prior: None,
            n: 1000,
            delta: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::arg("p, k and n must be positive"));
        }
        if self.d < 2 {
            return Err(Error::Unsupported("simulation needs at least 2 categories".into()));
        }
        if !(self.alpha_h > 0.0 && self.alpha_h.is_finite()) {
            return Err(Error::arg("alpha_h must be positive"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::arg(format!("delta = {} is outside [0, 1]", self.delta)));
        }
        if let Some(prior) = &self.theta_prior {
            if prior.len() != self.d {
                return Err(Error::arg(format!("theta_prior has {} entries, d = {}", prior.len(), self.d)));
            }
            if prior.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::arg("theta_prior entries must be positive"));
            }
        }
        Ok(())
    }

    pub fn prior(&self) -> Vec<f64> {
        self.theta_prior.clone().unwrap_or_else(|| vec![0.5; self.d])
    }
}

/// `ln G` for `G ~ Gamma(a, 1)`. Small shapes use `G = G' · U^{1/a}` with `G' ~ Gamma(a+1)`,
/// evaluated in log space so draws never underflow to zero.
fn log_gamma_draw(rng: &mut impl Rng, a: f64) -> f64 {
    if a >= 1.0 {
        Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        g.ln() + u.ln() / a
    }
}

/// One draw from `Dir(alpha)`.
pub fn sample_dirichlet(rng: &mut impl Rng, alpha: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| log_gamma_draw(rng, a)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Index drawn with probabilities `probs` (which sum to one up to rounding).
fn categorical(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Draws every `θ_j` column from the configured prior; all components get concentration
/// `alpha_h`.
pub fn sample_model(cfg: &SimConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let prior = cfg.prior();
    let mut rng = stream(cfg.seed, purpose::MODEL, 0);
    let thetas = (0..cfg.p)
        .map(|_| {
            let mut theta = DMatrix::zeros(cfg.d, cfg.k);
            for h in 0..cfg.k {
                let col = sample_dirichlet(&mut rng, &prior);
                theta.set_column(h, &DVector::from_vec(col));
            }
            theta
        })
        .collect();
    ModelParams::new(thetas, DVector::from_element(cfg.k, cfg.alpha_h))
}

/// `n = cfg.n` samples: membership `x ~ Dir(α)`, then per variable a component
/// `h ~ Cat(x)` and a category `y ~ Cat(θ_j[:, h])`. Row `i` uses its own stream, so the
/// output does not depend on thread scheduling.
pub fn simulate_dataset(params: &ModelParams, cfg: &SimConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::arg("n must be positive"));
    }
    let alpha = params
        .alpha()
        .ok_or_else(|| Error::arg("simulation needs the full concentration vector"))?;
    let categories = params.categories();
    if let Some(j) = categories.iter().position(|&d| d < 2) {
        return Err(Error::Unsupported(format!("variable {j} is not categorical")));
    }
    let alpha: Vec<f64> = alpha.iter().copied().collect();
    let p = params.p();
    let rows: Vec<Vec<u32>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, purpose::ROWS, i as u64);
            let x = sample_dirichlet(&mut rng, &alpha);
            (0..p)
                .map(|j| {
                    let h = categorical(&mut rng, x.iter().copied());
                    categorical(&mut rng, params.theta(j).column(h).iter().copied()) as u32
                })
                .collect()
        })
        .collect();
    Dataset::new(categories, rows.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contamination {
    /// Replace `⌊δ·n·p⌋` individual entries.
    #[default]
    Cells,
    /// Replace every entry of `⌊δ·n⌋` rows.
    Rows,
}

impl std::str::FromStr for Contamination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cells" => Ok(Contamination::Cells),
            "rows" => Ok(Contamination::Rows),
            other => Err(Error::arg(format!("unknown contamination {other:?} (expected cells or rows)"))),
        }
    }
}

/// Replaces exactly `⌊δ·n·p⌋` entries, chosen uniformly without replacement, by uniform
/// draws over each variable's categories.
pub fn contaminate(data: &Dataset, delta: f64, seed: u64) -> Result<Dataset> {
    contaminate_with(data, delta, seed, Contamination::Cells)
}

pub fn contaminate_with(data: &Dataset, delta: f64, seed: u64, mode: Contamination) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::arg(format!("delta = {delta} is outside [0, 1]")));
    }
    let (n, p) = (data.n(), data.p());
    let units = match mode {
        Contamination::Cells => n * p,
        Contamination::Rows => n,
    };
    // the small offset keeps products like 0.29·100 from flooring to 28
    let count = ((delta * units as f64 + 1e-9).floor() as usize).min(units);
    let mut out = data.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = stream(seed, purpose::CONTAMINATE, 0);
    let mut chosen = rand::seq::index::sample(&mut rng, units, count).into_vec();
    chosen.sort_unstable();
    let categories = data.categories().to_vec();
    let values = out.values_mut();
    let mut replace = |cell: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        values[cell] = rng.random_range(0..categories[cell % p] as u32);
    };
    for unit in chosen {
        match mode {
            Contamination::Cells => replace(unit, &mut rng),
            Contamination::Rows => (0..p).for_each(|j| replace(unit * p + j, &mut rng)),
        }
    }
    Ok(out)
}

fn check_comparable(est: &ModelParams, truth: &ModelParams) -> Result<()> {
    if est.k() != truth.k() || est.categories() != truth.categories() {
        return Err(Error::arg(format!(
            "cannot compare a model with k = {} and categories {:?} to one with k = {} and categories {:?}",
            est.k(),
            est.categories(),
            truth.k(),
            truth.categories()
        )));
    }
    Ok(())
}

/// The single column permutation of `est` that best matches `truth` on the stacked
/// parameters: exhaustive least squares for `k ≤ 8`, Procrustes matching beyond.
pub fn align(est: &ModelParams, truth: &ModelParams) -> Result<Permutation> {
    check_comparable(est, truth)?;
    let (e, t) = (est.stacked(), truth.stacked());
    let k = truth.k();
    if k > BRUTE_FORCE_MAX_K {
        let report = match_procrustes(&t, &Permutation::identity(k), &e)?;
        return Ok(report.permutation.unwrap_or_else(|| Permutation::identity(k)));
    }
    // ‖ψE − T‖² = ‖E‖² + ‖T‖² − 2 Σ_s ⟨E_ψs, T_s⟩
    let inner = e.transpose() * t;
    let best = (0..k)
        .permutations(k)
        .map(|psi| {
            let score: f64 = psi.iter().enumerate().map(|(s, &r)| inner[(r, s)]).sum();
            (score, psi)
        })
        .fold((f64::NEG_INFINITY, Vec::new()), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
    Permutation::new(best.1)
}

/// Root-mean-square difference over all `θ` entries after [`align`].
pub fn rmse_aligned(est: &ModelParams, truth: &ModelParams) -> Result<f64> {
    let psi = align(est, truth)?;
    let diff = apply_permutation(&psi, &est.stacked())? - truth.stacked();
    Ok((diff.norm_squared() / diff.len() as f64).sqrt())
}
