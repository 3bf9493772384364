//! Basket puts on decoupled binomial trees.
//!
//! Correlated log-prices `X = G Y` are driven by `m` independent
//! Rendleman-Bartter walks in `Y`. Values on the `(k+1)^m` outcome grid of step
//! `k` are held as MPS with one site per asset, and one backward step is a
//! per-site multiplication by the transposed conditional matrix.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binomial::ExerciseStyle;
use crate::error::{Error, Result};
use crate::report::{Method, PriceReport};
use crate::tensor::{Mps, SiteTensor, DEFAULT_DENSE_CAP};
use crate::ttcross::{ttcross_approximate, CrossConfig, FnGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayoffKind {
    Min,
    Max,
    Avg,
}

impl std::str::FromStr for PayoffKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min" => Ok(PayoffKind::Min),
            "max" => Ok(PayoffKind::Max),
            "avg" | "mean" => Ok(PayoffKind::Avg),
            other => Err(format!("unknown payoff kind `{other}`")),
        }
    }
}

impl PayoffKind {
    /// Put payoff on the reduced basket value.
    pub fn put(self, strike: f64, prices: &[f64]) -> f64 {
        let basket = match self {
            PayoffKind::Min => prices.iter().copied().fold(f64::INFINITY, f64::min),
            PayoffKind::Max => prices.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PayoffKind::Avg => prices.iter().sum::<f64>() / prices.len() as f64,
        };
        (strike - basket).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketSpec {
    pub s0: Vec<f64>,
    pub strike: f64,
    pub rate: f64,
    pub vols: Vec<f64>,
    /// Row-major `m x m` correlation matrix.
    pub corr: Vec<Vec<f64>>,
    pub expiry: f64,
    pub steps: usize,
    pub payoff: PayoffKind,
    pub style: ExerciseStyle,
}

/// `m x m` matrix with unit diagonal and `rho` everywhere else.
pub fn uniform_correlation(m: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { rho }).collect())
        .collect()
}

/// Parses a whitespace- or comma-separated square matrix, one row per line.
/// Blank lines and `#` comments are ignored.
pub fn parse_correlation_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(|line| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::InvalidSpec(format!("bad correlation entry `{t}`")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::InvalidSpec("correlation matrix must be square".into()));
    }
    Ok(rows)
}

impl BasketSpec {
    /// `m` assets at 100 with vol 0.5 and pairwise correlation 1/3, strike 100,
    /// rate 0.1, expiry 1.
    pub fn standard(m: usize, steps: usize, payoff: PayoffKind, style: ExerciseStyle) -> Self {
        Self {
            s0: vec![100.0; m],
            strike: 100.0,
            rate: 0.1,
            vols: vec![0.5; m],
            corr: uniform_correlation(m, 1.0 / 3.0),
            expiry: 1.0,
            steps,
            payoff,
            style,
        }
    }

    pub fn assets(&self) -> usize {
        self.s0.len()
    }

    pub fn dt(&self) -> f64 {
        self.expiry / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.s0.len();
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if m == 0 {
            return bad("at least one asset is required".into());
        }
        if self.vols.len() != m || self.corr.len() != m || self.corr.iter().any(|r| r.len() != m) {
            return bad(format!("s0, vols and corr must all describe {m} assets"));
        }
        if self.s0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("initial prices must be positive".into());
        }
        if self.vols.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("volatilities must be positive".into());
        }
        if !(self.strike >= 0.0 && self.strike.is_finite()) || !self.rate.is_finite() {
            return bad("strike must be non-negative and rate finite".into());
        }
        if !(self.expiry > 0.0 && self.expiry.is_finite()) || self.steps == 0 {
            return bad("expiry and step count must be positive".into());
        }
        for i in 0..m {
            if (self.corr[i][i] - 1.0).abs() > 1e-12 {
                return bad(format!("corr[{i}][{i}] must be 1"));
            }
            for j in 0..i {
                if !self.corr[i][j].is_finite() || (self.corr[i][j] - self.corr[j][i]).abs() > 1e-12 {
                    return bad(format!("corr is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledModel {
    /// Lower-triangular Cholesky factor of the covariance.
    pub g: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub y0: DVector<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub dt: f64,
}

impl DecoupledModel {
    /// Decoupled coordinate of asset `i` after `k` steps with `j` up moves.
    pub fn outcome(&self, i: usize, k: usize, j: usize) -> f64 {
        self.y0[i] + (k - j) as f64 * self.d[i] + j as f64 * self.u[i]
    }

    /// Prices `exp(G Y)` at decoupled coordinates `y`.
    pub fn prices(&self, y: &[f64]) -> Vec<f64> {
        let m = y.len();
        (0..m)
            .map(|i| (0..=i).map(|j| self.g[(i, j)] * y[j]).sum::<f64>().exp())
            .collect()
    }
}

/// Unpivoted Cholesky; reports the first leading minor that is not positive.
fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    let mut g = DMatrix::zeros(m, m);
    for j in 0..m {
        let diag = a[(j, j)] - (0..j).map(|k| g[(j, k)] * g[(j, k)]).sum::<f64>();
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        g[(j, j)] = diag.sqrt();
        for i in j + 1..m {
            let s = a[(i, j)] - (0..j).map(|k| g[(i, k)] * g[(j, k)]).sum::<f64>();
            g[(i, j)] = s / g[(j, j)];
        }
    }
    Ok(g)
}

pub fn decouple(spec: &BasketSpec) -> Result<DecoupledModel> {
    spec.validate()?;
    let m = spec.assets();
    let cov = DMatrix::from_fn(m, m, |i, j| spec.vols[i] * spec.vols[j] * spec.corr[i][j]);
    let g = cholesky(&cov)?;
    let drift = DVector::from_fn(m, |i, _| spec.rate - 0.5 * spec.vols[i] * spec.vols[i]);
    let logs = DVector::from_fn(m, |i, _| spec.s0[i].ln());
    let solve = |b: &DVector<f64>| {
        g.solve_lower_triangular(b)
            .ok_or(Error::NotPositiveDefinite { minor: m })
    };
    let alpha = solve(&drift)?;
    let y0 = solve(&logs)?;
    let dt = spec.dt();
    let root = dt.sqrt();
    Ok(DecoupledModel {
        u: alpha.iter().map(|a| a * dt + root).collect(),
        d: alpha.iter().map(|a| a * dt - root).collect(),
        g,
        alpha,
        y0,
        dt,
    })
}

/// Decoupled coordinates of every outcome of step `k`, indexed `[asset][label]`.
fn outcome_table(model: &DecoupledModel, k: usize) -> Vec<Vec<f64>> {
    (0..model.u.len())
        .map(|i| (0..=k).map(|j| model.outcome(i, k, j)).collect())
        .collect()
}

fn payoff_from_table(spec: &BasketSpec, model: &DecoupledModel, table: &[Vec<f64>], labels: &[usize]) -> f64 {
    let y: Vec<f64> = labels.iter().zip(table).map(|(&j, row)| row[j]).collect();
    spec.payoff.put(spec.strike, &model.prices(&y))
}

pub fn basket_payoff(labels: &[usize], model: &DecoupledModel, spec: &BasketSpec, k: usize) -> Result<f64> {
    if labels.len() != spec.assets() {
        return Err(Error::IndexLength {
            expected: spec.assets(),
            got: labels.len(),
        });
    }
    if let Some(site) = labels.iter().position(|&j| j > k) {
        return Err(Error::IndexOutOfRange {
            site,
            index: labels[site],
            dim: k + 1,
        });
    }
    Ok(payoff_from_table(spec, model, &outcome_table(model, k), labels))
}

/// `(k+1) x k` matrix with `1/2` at rows `j` and `j+1` of column `j`.
pub fn conditional_prob_matrix(k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("conditional matrices start at step 1".into()));
    }
    Ok(DMatrix::from_fn(k + 1, k, |row, col| {
        if row == col || row == col + 1 {
            0.5
        } else {
            0.0
        }
    }))
}

/// `C(n, y) / 2^n` for `y = 0..=n`, computed in log space.
pub fn binomial_weights(n: usize) -> Vec<f64> {
    let mut ln_c = 0.0f64;
    let ln2n = n as f64 * std::f64::consts::LN_2;
    (0..=n)
        .map(|y| {
            if y > 0 {
                ln_c += ((n - y + 1) as f64).ln() - (y as f64).ln();
            }
            (ln_c - ln2n).exp()
        })
        .collect()
}

/// MPS approximation of a function on the step grid plus any cross diagnostics.
#[derive(Debug, Clone)]
pub struct GridApprox {
    pub mps: Mps,
    pub warnings: Vec<String>,
}

fn approximate_grid<F>(m: usize, k: usize, cfg: &CrossConfig, f: F) -> Result<GridApprox>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if m == 1 {
        let values = (0..=k).map(|j| f(&[j])).collect();
        return Ok(GridApprox {
            mps: Mps::from_tensors(vec![SiteTensor::from_vector(values)?])?,
            warnings: Vec::new(),
        });
    }
    let result = ttcross_approximate(&FnGrid::new(vec![k + 1; m], f), cfg)?;
    let mut warnings = Vec::new();
    if !result.converged {
        warnings.push(format!(
            "step {k}: ttcross stopped after {} passes (relative change {:.3e})",
            result.passes, result.last_change
        ));
    }
    Ok(GridApprox {
        mps: result.mps,
        warnings,
    })
}

/// Payoff of step `k` as an MPS: exact for a single asset, TT-cross otherwise.
pub fn payoff_to_mps(spec: &BasketSpec, model: &DecoupledModel, k: usize, cfg: &CrossConfig) -> Result<GridApprox> {
    spec.validate()?;
    cfg.validate()?;
    let table = outcome_table(model, k);
    approximate_grid(spec.assets(), k, cfg, |labels| payoff_from_table(spec, model, &table, labels))
}

fn backward_step(value: &Mps, k: usize) -> Result<Mps> {
    let pt = conditional_prob_matrix(k)?.transpose();
    value.apply_site_matrices(&vec![pt; value.len()])
}

fn single_point(mps: &Mps) -> f64 {
    mps.evaluate_unchecked(&vec![0; mps.len()])
}

/// European price along both routes: `(recursive, terminal contraction)`.
pub fn european_basket_routes(spec: &BasketSpec, cfg: &CrossConfig) -> Result<(f64, f64, Vec<String>)> {
    let model = decouple(spec)?;
    let n = spec.steps;
    let step_cfg = CrossConfig {
        seed: cfg.seed.wrapping_add(n as u64),
        ..*cfg
    };
    let payoff = payoff_to_mps(spec, &model, n, &step_cfg)?;
    let discount = (-spec.rate * spec.expiry).exp();

    let mut value = payoff.mps.clone();
    for k in (1..=n).rev() {
        value = backward_step(&value, k)?;
    }
    let recursive = discount * single_point(&value);

    let weights = vec![binomial_weights(n); spec.assets()];
    let terminal = discount * payoff.mps.contract_vectors(&weights)?;
    Ok((recursive, terminal, payoff.warnings))
}

fn finish(mut report: PriceReport, cfg: &CrossConfig, start: Instant, warnings: Vec<String>) -> PriceReport {
    report.bond_dim = Some(cfg.max_bond);
    report.n_sweeps = Some(cfg.n_sweeps);
    report.seed = Some(cfg.seed);
    report.wall_time = start.elapsed().as_secs_f64();
    report.warnings = warnings;
    report
}

pub fn price_european_basket(spec: &BasketSpec, cfg: &CrossConfig) -> Result<PriceReport> {
    let start = Instant::now();
    let (recursive, terminal, mut warnings) = european_basket_routes(spec, cfg)?;
    if (recursive - terminal).abs() > 1e-9 * recursive.abs().max(1.0) {
        warnings.push(format!(
            "recursive ({recursive}) and terminal-contraction ({terminal}) prices disagree"
        ));
    }
    Ok(finish(PriceReport::new(Method::Ttcross, recursive), cfg, start, warnings))
}

/// Backward induction with early exercise; the grid of every step is
/// re-approximated by TT-cross seeded with `cfg.seed + step`.
pub fn price_american_basket(spec: &BasketSpec, cfg: &CrossConfig) -> Result<PriceReport> {
    let start = Instant::now();
    let model = decouple(spec)?;
    let n = spec.steps;
    let m = spec.assets();
    let step_cfg = |k: usize| CrossConfig {
        seed: cfg.seed.wrapping_add(k as u64),
        ..*cfg
    };
    let disc = (-spec.rate * model.dt).exp();
    let first = payoff_to_mps(spec, &model, n, &step_cfg(n))?;
    let mut warnings = first.warnings;
    let mut value = first.mps;
    for k in (1..=n).rev() {
        let cont = backward_step(&value, k)?;
        let table = outcome_table(&model, k - 1);
        let target = |labels: &[usize]| {
            let hold = disc * cont.evaluate_unchecked(labels);
            hold.max(payoff_from_table(spec, &model, &table, labels))
        };
        if k == 1 {
            let price = target(&vec![0; m]);
            return Ok(finish(PriceReport::new(Method::Ttcross, price), cfg, start, warnings));
        }
        let next = approximate_grid(m, k - 1, &step_cfg(k - 1), target)?;
        warnings.extend(next.warnings);
        value = next.mps;
    }
    // n = 0 is rejected by validation
    unreachable!("the backward loop returns at step 1")
}

pub fn price_basket(spec: &BasketSpec, cfg: &CrossConfig) -> Result<PriceReport> {
    match spec.style {
        ExerciseStyle::European => price_european_basket(spec, cfg),
        ExerciseStyle::American => price_american_basket(spec, cfg),
    }
}

/// Averages neighbours along `axis` of a row-major array, shrinking it by one.
fn contract_axis(values: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = Vec::with_capacity(outer * (len - 1) * inner);
    for o in 0..outer {
        let block = &values[o * len * inner..(o + 1) * len * inner];
        for j in 0..len - 1 {
            let (lo, hi) = (&block[j * inner..(j + 1) * inner], &block[(j + 1) * inner..(j + 2) * inner]);
            out.extend(lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)));
        }
    }
    out
}

fn grid_payoffs(spec: &BasketSpec, model: &DecoupledModel, k: usize) -> Vec<f64> {
    let m = spec.assets();
    let table = outcome_table(model, k);
    let total = (k + 1).pow(m as u32);
    let mut labels = vec![0usize; m];
    (0..total)
        .map(|mut flat| {
            for i in (0..m).rev() {
                labels[i] = flat % (k + 1);
                flat /= k + 1;
            }
            payoff_from_table(spec, model, &table, &labels)
        })
        .collect()
}

/// Dense backward induction over the full outcome grid.
pub fn basket_bruteforce_with_cap(spec: &BasketSpec, cap: usize) -> Result<f64> {
    let model = decouple(spec)?;
    let n = spec.steps;
    let m = spec.assets();
    let required = (n as u128 + 1).checked_pow(m as u32).unwrap_or(u128::MAX);
    if required > cap as u128 {
        return Err(Error::BruteForceRefused {
            required,
            allowed: cap as u128,
        });
    }
    let disc = (-spec.rate * model.dt).exp();
    let mut values = grid_payoffs(spec, &model, n);
    for k in (1..=n).rev() {
        let mut shape = vec![k + 1; m];
        for axis in 0..m {
            values = contract_axis(&values, &shape, axis);
            shape[axis] = k;
        }
        match spec.style {
            ExerciseStyle::European => values.iter_mut().for_each(|v| *v *= disc),
            ExerciseStyle::American => {
                let exercise = grid_payoffs(spec, &model, k - 1);
                values
                    .iter_mut()
                    .zip(exercise)
                    .for_each(|(v, e)| *v = (disc * *v).max(e));
            }
        }
    }
    Ok(values[0])
}

pub fn price_basket_bruteforce(spec: &BasketSpec) -> Result<PriceReport> {
    let start = Instant::now();
    let price = basket_bruteforce_with_cap(spec, DEFAULT_DENSE_CAP)?;
    let mut report = PriceReport::new(Method::Bruteforce, price);
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}
