//! Arithmetic-average Asian options on the N-step binomial path model.
//!
//! Four engines share one payoff: exhaustive enumeration, TT-cross on the
//! weighted payoff `p(x) v_A(x)`, a variational binary filter contracted
//! against the exact bond-2 payoff MPS, and plain Monte Carlo.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binomial::{validate_market, OptionRight, Scheme, SchemeParams};
use crate::error::{Error, Result};
use crate::report::{Method, PriceReport};
use crate::tensor::{Mps, SiteTensor};
use crate::ttcross::{ttcross_approximate, CrossConfig, CrossResult, FnGrid};

/// Largest step count the enumeration oracle accepts.
pub const BRUTE_FORCE_MAX_STEPS: usize = 25;

const MC_CHUNK: u64 = 1 << 13;

fn default_right() -> OptionRight {
    OptionRight::Call
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsianSpec {
    pub s0: f64,
    pub strike: f64,
    pub rate: f64,
    pub vol: f64,
    pub expiry: f64,
    pub steps: usize,
    pub scheme: Scheme,
    #[serde(default = "default_right")]
    pub right: OptionRight,
}

impl AsianSpec {
    /// S0 = K = 100, r = 0.1, vol = 0.5, T = 1, CRR call.
    pub fn standard(steps: usize) -> Self {
        Self {
            s0: 100.0,
            strike: 100.0,
            rate: 0.1,
            vol: 0.5,
            expiry: 1.0,
            steps,
            scheme: Scheme::Crr,
            right: OptionRight::Call,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_market(self.s0, self.strike, self.vol, self.expiry, self.steps)?;
        self.params().map(|_| ())
    }

    pub fn dt(&self) -> f64 {
        self.expiry / self.steps as f64
    }

    pub fn params(&self) -> Result<SchemeParams> {
        self.scheme.params(self.rate, self.vol, self.dt())
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.expiry).exp()
    }

    /// Payoff before the floor: `mean - K` for calls, `K - mean` for puts.
    fn relaxed(&self, mean: f64) -> f64 {
        match self.right {
            OptionRight::Call => mean - self.strike,
            OptionRight::Put => self.strike - mean,
        }
    }
}

/// Running mean of `S_1..S_N` along `bits` and the path probability.
fn walk(bits: impl Iterator<Item = bool>, n: usize, s0: f64, params: &SchemeParams) -> (f64, f64) {
    let (mut s, mut sum, mut prob) = (s0, 0.0, 1.0);
    for up in bits {
        if up {
            s *= params.u;
            prob *= params.p_u;
        } else {
            s *= params.d;
            prob *= params.p_d();
        }
        sum += s;
    }
    (sum / n as f64, prob)
}

pub fn asian_path_payoff(bits: &[u8], spec: &AsianSpec) -> Result<f64> {
    spec.validate()?;
    if bits.len() != spec.steps {
        return Err(Error::IndexLength {
            expected: spec.steps,
            got: bits.len(),
        });
    }
    if let Some(position) = bits.iter().position(|&b| b > 1) {
        return Err(Error::NonBinary {
            position,
            value: bits[position] as usize,
        });
    }
    let params = spec.params()?;
    let (mean, _) = walk(bits.iter().map(|&b| b == 1), spec.steps, spec.s0, &params);
    Ok(spec.relaxed(mean).max(0.0))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Undiscounted `sum_x p(x) v_A(x)` over all `2^N` paths under `params`.
pub fn asian_expectation_exhaustive(spec: &AsianSpec, params: &SchemeParams) -> Result<f64> {
    let n = spec.steps;
    if n > BRUTE_FORCE_MAX_STEPS {
        return Err(Error::BruteForceRefused {
            required: 1u128 << n,
            allowed: 1u128 << BRUTE_FORCE_MAX_STEPS,
        });
    }
    fn descend(spec: &AsianSpec, params: &SchemeParams, left: usize, s: f64, sum: f64, prob: f64) -> f64 {
        if left == 0 {
            return prob * spec.relaxed(sum / spec.steps as f64).max(0.0);
        }
        let up = s * params.u;
        let down = s * params.d;
        descend(spec, params, left - 1, up, sum + up, prob * params.p_u)
            + descend(spec, params, left - 1, down, sum + down, prob * params.p_d())
    }
    let head = n.min(10);
    let partials: Vec<f64> = (0..1u32 << head)
        .into_par_iter()
        .map(|mask| {
            let bits = (0..head).map(|k| (mask >> (head - 1 - k)) & 1 == 1);
            let (mut s, mut sum, mut prob) = (spec.s0, 0.0, 1.0);
            for up in bits {
                if up {
                    s *= params.u;
                    prob *= params.p_u;
                } else {
                    s *= params.d;
                    prob *= params.p_d();
                }
                sum += s;
            }
            descend(spec, params, n - head, s, sum, prob)
        })
        .collect();
    Ok(partials.iter().sum())
}

pub fn price_asian_bruteforce(spec: &AsianSpec) -> Result<PriceReport> {
    spec.validate()?;
    let params = spec.params()?;
    let (expectation, wall_time) = timed(|| asian_expectation_exhaustive(spec, &params))?;
    let mut report = PriceReport::new(Method::Bruteforce, spec.discount() * expectation);
    report.wall_time = wall_time;
    Ok(report)
}

/// Runs TT-cross on `x -> p(x) v_A(x)` over `{0,1}^N`.
pub fn asian_cross(spec: &AsianSpec, cfg: &CrossConfig) -> Result<CrossResult> {
    spec.validate()?;
    cfg.validate()?;
    let params = spec.params()?;
    let n = spec.steps;
    let spec = *spec;
    let grid = FnGrid::new(vec![2; n], move |x: &[usize]| {
        let (mean, prob) = walk(x.iter().map(|&b| b == 1), n, spec.s0, &params);
        prob * spec.relaxed(mean).max(0.0)
    });
    ttcross_approximate(&grid, cfg)
}

fn cross_warnings(result: &CrossResult) -> Vec<String> {
    let mut warnings = Vec::new();
    if !result.converged {
        warnings.push(format!(
            "ttcross stopped after {} passes without converging (relative change {:.3e})",
            result.passes, result.last_change
        ));
    }
    if result.maxvol_warnings > 0 {
        warnings.push(format!(
            "maxvol hit its iteration cap in {} passes",
            result.maxvol_warnings
        ));
    }
    warnings
}

pub fn price_asian_ttcross(spec: &AsianSpec, cfg: &CrossConfig) -> Result<PriceReport> {
    let (result, wall_time) = timed(|| asian_cross(spec, cfg))?;
    let mut report = PriceReport::new(Method::Ttcross, spec.discount() * result.mps.sum_all());
    report.bond_dim = Some(cfg.max_bond);
    report.n_sweeps = Some(cfg.n_sweeps);
    report.seed = Some(cfg.seed);
    report.wall_time = wall_time;
    report.warnings = cross_warnings(&result);
    Ok(report)
}

/// Bond-2 MPS whose value at `x` is `p(x)` times the unfloored payoff.
///
/// The state `[a, b]` carries the probability-weighted current price share
/// `S_k / N` and the weighted partial sum; step `k` multiplies it by
/// `[[f p, f p], [0, p]]` with `f` the price factor and `p` the step probability.
pub fn build_exact_payoff_mps(spec: &AsianSpec) -> Result<Mps> {
    spec.validate()?;
    let params = spec.params()?;
    let n = spec.steps;
    let share = spec.s0 / n as f64;
    let start = match spec.right {
        OptionRight::Call => [share, -spec.strike],
        OptionRight::Put => [-share, spec.strike],
    };
    let step = |x: usize| {
        let (f, p) = if x == 1 { (params.u, params.p_u) } else { (params.d, params.p_d()) };
        [[f * p, f * p], [0.0, p]]
    };
    let sites = (0..n)
        .map(|k| {
            let left = if k == 0 { 1 } else { 2 };
            let right = if k + 1 == n { 1 } else { 2 };
            SiteTensor::from_fn((left, 2, right), |a, x, b| {
                let m = step(x);
                let row = if k == 0 {
                    [start[0] * m[0][0] + start[1] * m[1][0], start[0] * m[0][1] + start[1] * m[1][1]]
                } else {
                    m[a]
                };
                if k + 1 == n {
                    row[1]
                } else {
                    row[b]
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mps::from_tensors(sites)
}

/// Binary MPS in mixed form: sites left of `center` map each `(alpha, x)` to at
/// most one outgoing class, sites right of it map each `(x, beta)` to at most one
/// incoming class, and the center is an arbitrary 0/1 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFilterMps {
    sites: Vec<SiteTensor>,
    center: usize,
}

impl BinaryFilterMps {
    pub fn new(sites: Vec<SiteTensor>, center: usize) -> Result<Self> {
        let mps = Mps::from_tensors(sites)?;
        if center >= mps.len() {
            return Err(Error::InvalidArgument(format!(
                "center {center} outside a chain of {} sites",
                mps.len()
            )));
        }
        let sites = mps.into_sites();
        for (k, site) in sites.iter().enumerate() {
            if site.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("site {k} has a non-binary entry")));
            }
            let (l, p, r) = site.shape();
            if k < center {
                for a in 0..l {
                    for x in 0..p {
                        if (0..r).map(|b| site.get(a, x, b)).sum::<f64>() > 1.0 {
                            return Err(Error::InvalidArgument(format!(
                                "left site {k} maps ({a}, {x}) to several classes"
                            )));
                        }
                    }
                }
            } else if k > center {
                for x in 0..p {
                    for b in 0..r {
                        if (0..l).map(|a| site.get(a, x, b)).sum::<f64>() > 1.0 {
                            return Err(Error::InvalidArgument(format!(
                                "right site {k} maps ({x}, {b}) to several classes"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { sites, center })
    }

    /// Bond-1 filter equal to one everywhere.
    pub fn all_ones(n: usize) -> Result<Self> {
        let sites = (0..n)
            .map(|_| SiteTensor::from_vector(vec![1.0, 1.0]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sites, 0)
    }

    pub fn sites(&self) -> &[SiteTensor] {
        &self.sites
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn to_mps(&self) -> Mps {
        Mps::from_tensors(self.sites.clone()).expect("filter bonds are validated on construction")
    }
}

fn slice(site: &SiteTensor, x: usize) -> DMatrix<f64> {
    DMatrix::from_fn(site.left_dim(), site.right_dim(), |a, b| site.get(a, x, b))
}

fn transfer_left(env: &DMatrix<f64>, psi: &SiteTensor, b: &SiteTensor) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(psi.right_dim(), b.right_dim());
    for x in 0..psi.phys_dim() {
        out += slice(psi, x).transpose() * env * slice(b, x);
    }
    out
}

fn transfer_right(env: &DMatrix<f64>, psi: &SiteTensor, b: &SiteTensor) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(psi.left_dim(), b.left_dim());
    for x in 0..psi.phys_dim() {
        out += slice(psi, x) * env * slice(b, x).transpose();
    }
    out
}

/// `G^x = left_env * B^x * right_env^T`, one matrix per physical value.
pub fn center_gradient(
    left_env: &DMatrix<f64>,
    right_env: &DMatrix<f64>,
    b_site: &SiteTensor,
) -> Result<Vec<DMatrix<f64>>> {
    if left_env.ncols() != b_site.left_dim() || right_env.ncols() != b_site.right_dim() {
        return Err(Error::ShapeMismatch(format!(
            "environments {}x{} and {}x{} do not fit a site of shape {:?}",
            left_env.nrows(),
            left_env.ncols(),
            right_env.nrows(),
            right_env.ncols(),
            b_site.shape()
        )));
    }
    Ok((0..b_site.phys_dim())
        .map(|x| left_env * slice(b_site, x) * right_env.transpose())
        .collect())
}

/// Indicator of a strictly positive gradient; zero gradients are excluded.
pub fn variational_center_update(
    left_env: &DMatrix<f64>,
    right_env: &DMatrix<f64>,
    b_site: &SiteTensor,
) -> Result<SiteTensor> {
    let grad = center_gradient(left_env, right_env, b_site)?;
    SiteTensor::from_fn(
        (left_env.nrows(), b_site.phys_dim(), right_env.nrows()),
        |a, x, b| if grad[x][(a, b)] > 0.0 { 1.0 } else { 0.0 },
    )
}

fn positive_mass(row: &[f64]) -> f64 {
    row.iter().map(|v| v.max(0.0)).sum()
}

fn merged_mass(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x + y).max(0.0)).sum()
}

/// Greedily reduces the rows of `a` to at most `target_rows` by merging or
/// dropping, maximizing the retained positive mass at each step.
///
/// Returns `(l, m)` with `l` a 0/1 matrix of shape `R x G` whose rows each hold
/// at most one 1, and `m` the `G x C` sums of the grouped rows. Groups are
/// ordered by their smallest original row.
pub fn greedy_binary_decompose(a: &DMatrix<f64>, target_rows: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if target_rows == 0 {
        return Err(Error::InvalidArgument("target_rows must be >= 1".into()));
    }
    let (r, c) = a.shape();
    let mut vals: Vec<Option<Vec<f64>>> = (0..r)
        .map(|i| Some(a.row(i).iter().copied().collect()))
        .collect();
    let mut members: Vec<Vec<usize>> = (0..r).map(|i| vec![i]).collect();
    let mut rowvals: Vec<f64> = vals.iter().map(|v| positive_mass(v.as_ref().unwrap())).collect();
    let mut mergevals = DMatrix::<f64>::from_element(r, r, f64::NEG_INFINITY);
    for i in 0..r {
        for j in i + 1..r {
            let (vi, vj) = (vals[i].as_ref().unwrap(), vals[j].as_ref().unwrap());
            mergevals[(i, j)] = merged_mass(vi, vj) - rowvals[i] - rowvals[j];
        }
    }
    let mut active = r;
    while active > target_rows {
        let mut drop = None;
        for i in (0..r).filter(|&i| vals[i].is_some()) {
            if drop.is_none_or(|d: usize| rowvals[i] < rowvals[d]) {
                drop = Some(i);
            }
        }
        let drop = drop.expect("active rows remain");
        let mut best: Option<(usize, usize)> = None;
        for i in (0..r).filter(|&i| vals[i].is_some()) {
            for j in (i + 1..r).filter(|&j| vals[j].is_some()) {
                if best.is_none_or(|(bi, bj)| mergevals[(i, j)] > mergevals[(bi, bj)]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("at least two active rows");
        if -mergevals[(i, j)] < rowvals[drop] {
            let vj = vals[j].take().unwrap();
            let vi = vals[i].as_mut().unwrap();
            vi.iter_mut().zip(&vj).for_each(|(x, y)| *x += y);
            let moved = std::mem::take(&mut members[j]);
            members[i].extend(moved);
            rowvals[i] = positive_mass(vi);
            let vi = vals[i].clone().unwrap();
            for k in (0..r).filter(|&k| k != i && vals[k].is_some()) {
                let (lo, hi) = (k.min(i), k.max(i));
                mergevals[(lo, hi)] = merged_mass(&vi, vals[k].as_ref().unwrap()) - rowvals[i] - rowvals[k];
            }
        } else {
            vals[drop] = None;
            members[drop].clear();
        }
        active -= 1;
    }
    let kept: Vec<usize> = (0..r).filter(|&i| vals[i].is_some()).collect();
    let mut l = DMatrix::zeros(r, kept.len());
    let mut m = DMatrix::zeros(kept.len(), c);
    for (g, &i) in kept.iter().enumerate() {
        for &row in &members[i] {
            l[(row, g)] = 1.0;
        }
        m.row_mut(g).copy_from_slice(vals[i].as_ref().unwrap());
    }
    Ok((l, m))
}

/// `e^{-rT} sum_x psi(x) p(x) (payoff relaxed)(x)` for a given filter.
pub fn filter_price(spec: &AsianSpec, filter: &BinaryFilterMps) -> Result<f64> {
    let b = build_exact_payoff_mps(spec)?;
    if filter.sites.len() != b.len() {
        return Err(Error::IndexLength {
            expected: b.len(),
            got: filter.sites.len(),
        });
    }
    Ok(spec.discount() * overlap(&filter.sites, b.sites()))
}

fn overlap(psi: &[SiteTensor], b: &[SiteTensor]) -> f64 {
    let mut env = DMatrix::from_element(1, 1, 1.0);
    for (p, s) in psi.iter().zip(b) {
        env = transfer_left(&env, p, s);
    }
    env[(0, 0)]
}

#[derive(Debug, Clone)]
pub struct VariationalOutcome {
    /// Filter at the end of the best pass.
    pub filter: BinaryFilterMps,
    /// Discounted price of `filter`.
    pub price: f64,
    /// Discounted price after every pass, in order.
    pub pass_prices: Vec<f64>,
}

fn random_right_site<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> Result<SiteTensor> {
    let (l, p, r) = shape;
    let mut data = vec![0.0; l * p * r];
    for x in 0..p {
        for b in 0..r {
            let ones: Vec<usize> = (0..l).filter(|_| rng.gen::<bool>()).collect();
            if !ones.is_empty() {
                let a = ones[rng.gen_range(0..ones.len())];
                data[(a * p + x) * r + b] = 1.0;
            }
        }
    }
    SiteTensor::new(shape, data)
}

/// Bond dimension between site `k` and `k+1`: capped by the number of suffixes.
fn bond_cap(n: usize, k: usize, bond_dim: usize) -> usize {
    let suffix_bits = n - 1 - k;
    if suffix_bits >= usize::BITS as usize - 1 {
        bond_dim
    } else {
        bond_dim.min(1 << suffix_bits)
    }
}

/// Runs `n_sweeps` left-to-right passes, each followed by a right-to-left pass.
pub fn variational_filter(spec: &AsianSpec, bond_dim: usize, n_sweeps: usize, seed: u64) -> Result<VariationalOutcome> {
    spec.validate()?;
    if bond_dim == 0 {
        return Err(Error::InvalidArgument("bond_dim must be >= 1".into()));
    }
    if n_sweeps == 0 {
        return Err(Error::InvalidArgument("n_sweeps must be >= 1".into()));
    }
    let b = build_exact_payoff_mps(spec)?;
    let b = b.sites();
    let n = b.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = Vec::with_capacity(n);
    psi.push(SiteTensor::new((1, 2, bond_cap(n, 0, bond_dim)), vec![1.0; 2 * bond_cap(n, 0, bond_dim)])?);
    for k in 1..n {
        let shape = (bond_cap(n, k - 1, bond_dim), 2, if k + 1 == n { 1 } else { bond_cap(n, k, bond_dim) });
        psi.push(random_right_site(shape, &mut rng)?);
    }

    let one = || DMatrix::from_element(1, 1, 1.0);
    let discount = spec.discount();
    let mut pass_prices = Vec::with_capacity(2 * n_sweeps);
    let mut best: Option<(f64, BinaryFilterMps)> = None;
    for pass in 0..2 * n_sweeps {
        let forward = pass % 2 == 0;
        if forward {
            let mut renvs = vec![one(); n + 1];
            for k in (1..n).rev() {
                renvs[k] = transfer_right(&renvs[k + 1], &psi[k], &b[k]);
            }
            let mut lenv = one();
            for c in 0..n {
                if c + 1 == n {
                    psi[c] = variational_center_update(&lenv, &renvs[c + 1], &b[c])?;
                    break;
                }
                let grad = center_gradient(&lenv, &renvs[c + 1], &b[c])?;
                let (dl, dr) = (lenv.nrows(), renvs[c + 1].nrows());
                let a = DMatrix::from_fn(2 * dl, dr, |row, beta| grad[row % 2][(row / 2, beta)]);
                let (l, _) = greedy_binary_decompose(&a, bond_dim)?;
                psi[c] = SiteTensor::from_fn((dl, 2, l.ncols()), |alpha, x, g| l[(alpha * 2 + x, g)])?;
                lenv = transfer_left(&lenv, &psi[c], &b[c]);
            }
        } else {
            let mut lenvs = vec![one(); n];
            for k in 1..n {
                lenvs[k] = transfer_left(&lenvs[k - 1], &psi[k - 1], &b[k - 1]);
            }
            let mut renv = one();
            for c in (0..n).rev() {
                if c == 0 {
                    psi[c] = variational_center_update(&lenvs[0], &renv, &b[c])?;
                    break;
                }
                let grad = center_gradient(&lenvs[c], &renv, &b[c])?;
                let (dl, dr) = (lenvs[c].nrows(), renv.nrows());
                let a = DMatrix::from_fn(2 * dr, dl, |row, alpha| grad[row / dr][(alpha, row % dr)]);
                let (l, _) = greedy_binary_decompose(&a, bond_dim)?;
                psi[c] = SiteTensor::from_fn((l.ncols(), 2, dr), |g, x, beta| l[(x * dr + beta, g)])?;
                renv = transfer_right(&renv, &psi[c], &b[c]);
            }
        }
        let price = discount * overlap(&psi, b);
        pass_prices.push(price);
        if best.as_ref().is_none_or(|(p, _)| price > *p) {
            let center = if forward { n - 1 } else { 0 };
            best = Some((price, BinaryFilterMps::new(psi.clone(), center)?));
        }
    }
    let (price, filter) = best.expect("at least one pass runs");
    Ok(VariationalOutcome {
        filter,
        price,
        pass_prices,
    })
}

pub fn price_asian_variational(spec: &AsianSpec, bond_dim: usize, n_sweeps: usize, seed: u64) -> Result<PriceReport> {
    let (outcome, wall_time) = timed(|| variational_filter(spec, bond_dim, n_sweeps, seed))?;
    let mut report = PriceReport::new(Method::Variational, outcome.price);
    report.bond_dim = Some(bond_dim);
    report.n_sweeps = Some(n_sweeps);
    report.seed = Some(seed);
    report.wall_time = wall_time;
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    const EMPTY: Self = Self {
        count: 0.0,
        mean: 0.0,
        m2: 0.0,
    };

    fn push(&mut self, v: f64) {
        self.count += 1.0;
        let delta = v - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (v - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + delta * other.count / count,
            m2: self.m2 + other.m2 + delta * delta * self.count * other.count / count,
        }
    }
}

/// Monte Carlo estimate under explicit scheme parameters; returns `(mean, std_error)`
/// of the discounted payoff.
pub fn asian_montecarlo_with(spec: &AsianSpec, params: &SchemeParams, n_samples: u64, seed: u64) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
    }
    let n = spec.steps;
    let discount = spec.discount();
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let len = MC_CHUNK.min(n_samples - chunk * MC_CHUNK);
            let mut acc = Moments::EMPTY;
            for _ in 0..len {
                let (mean, _) = walk((0..n).map(|_| rng.gen::<f64>() < params.p_u), n, spec.s0, params);
                acc.push(discount * spec.relaxed(mean).max(0.0));
            }
            acc
        })
        .collect();
    let total = parts.into_iter().fold(Moments::EMPTY, Moments::merge);
    let variance = (total.m2 / (total.count - 1.0)).max(0.0);
    Ok((total.mean, (variance / total.count).sqrt()))
}

pub fn price_asian_montecarlo(spec: &AsianSpec, n_samples: u64, seed: u64) -> Result<PriceReport> {
    spec.validate()?;
    let params = spec.params()?;
    let ((price, std_error), wall_time) = timed(|| asian_montecarlo_with(spec, &params, n_samples, seed))?;
    let mut report = PriceReport::new(Method::Montecarlo, price);
    report.n_samples = Some(n_samples);
    report.seed = Some(seed);
    report.std_error = Some(std_error);
    report.wall_time = wall_time;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binomial::{path_price_product, path_probability, SchemeTag};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn bits_of(mask: usize, n: usize) -> Vec<u8> {
        (0..n).map(|k| ((mask >> (n - 1 - k)) & 1) as u8).collect()
    }

    fn flat_rb(steps: usize) -> AsianSpec {
        AsianSpec {
            vol: 0.0,
            scheme: Scheme::Rb,
            ..AsianSpec::standard(steps)
        }
    }

    fn closed_form_mean(spec: &AsianSpec) -> f64 {
        let p = spec.params().unwrap();
        let g = p.p_u * p.u + p.p_d() * p.d;
        (1..=spec.steps).map(|i| g.powi(i as i32)).sum::<f64>() * spec.s0 / spec.steps as f64
    }

    #[test]
    fn payoff_with_zero_strike_is_path_mean() {
        let spec = AsianSpec {
            strike: 0.0,
            ..AsianSpec::standard(4)
        };
        let p = spec.params().unwrap();
        let bits = [1, 0, 0, 1];
        let mean = path_price_product(&bits, 100.0, &p).unwrap().iter().sum::<f64>() / 4.0;
        let v = asian_path_payoff(&bits, &spec).unwrap();
        assert!(v > 0.0);
        assert_relative_eq!(v, mean, max_relative = 1e-15);
    }

    #[test]
    fn all_down_path_at_the_money_is_worthless() {
        let spec = AsianSpec::standard(6);
        assert_eq!(asian_path_payoff(&[0; 6], &spec).unwrap(), 0.0);
    }

    #[test]
    fn three_step_hand_expansion() {
        let spec = AsianSpec::standard(3);
        let p = spec.params().unwrap();
        let (s, u, d) = (spec.s0, p.u, p.d);
        let expected = ((s * u + s * u * d + s * u * u * d) / 3.0 - spec.strike).max(0.0);
        assert!(expected > 0.0);
        assert_relative_eq!(asian_path_payoff(&[1, 0, 1], &spec).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn payoff_rejects_bad_bits() {
        let spec = AsianSpec::standard(3);
        assert!(matches!(asian_path_payoff(&[1, 2, 0], &spec), Err(Error::NonBinary { position: 1, .. })));
        assert!(matches!(asian_path_payoff(&[1, 0], &spec), Err(Error::IndexLength { .. })));
    }

    #[test]
    fn put_flag_reverses_the_payoff() {
        let spec = AsianSpec {
            right: OptionRight::Put,
            ..AsianSpec::standard(5)
        };
        let p = spec.params().unwrap();
        let mean = path_price_product(&[0; 5], 100.0, &p).unwrap().iter().sum::<f64>() / 5.0;
        assert_relative_eq!(asian_path_payoff(&[0; 5], &spec).unwrap(), 100.0 - mean, max_relative = 1e-14);
    }

    #[test]
    fn one_step_bruteforce_matches_two_paths() {
        let spec = AsianSpec::standard(1);
        let p = spec.params().unwrap();
        let expected = spec.discount()
            * (p.p_u * (100.0 * p.u - 100.0).max(0.0) + (1.0 - p.p_u) * (100.0 * p.d - 100.0).max(0.0));
        assert_relative_eq!(price_asian_bruteforce(&spec).unwrap().price, expected, max_relative = 1e-14);
    }

    #[test]
    fn zero_strike_bruteforce_matches_factorized_expectation() {
        let spec = AsianSpec {
            strike: 0.0,
            ..AsianSpec::standard(12)
        };
        let dt = spec.dt();
        let geometric: f64 = (1..=12).map(|i| (spec.rate * i as f64 * dt).exp()).sum::<f64>() * spec.s0 / 12.0;
        let price = price_asian_bruteforce(&spec).unwrap().price;
        assert_relative_eq!(price, spec.discount() * geometric, max_relative = 1e-12);

        let p = spec.params().unwrap();
        let naive: f64 = (0..1 << 12)
            .map(|m| {
                let bits = bits_of(m, 12);
                path_probability(&bits, p.p_u) * asian_path_payoff(&bits, &spec).unwrap()
            })
            .sum();
        assert_relative_eq!(price, spec.discount() * naive, max_relative = 1e-12);
    }

    #[test]
    fn bruteforce_refuses_large_n() {
        let err = price_asian_bruteforce(&AsianSpec::standard(26)).unwrap_err();
        assert_eq!(
            err,
            Error::BruteForceRefused {
                required: 1 << 26,
                allowed: 1 << 25
            }
        );
    }

    #[test]
    fn ttcross_zero_strike_matches_closed_form() {
        let spec = AsianSpec {
            strike: 0.0,
            ..AsianSpec::standard(16)
        };
        let report = price_asian_ttcross(&spec, &CrossConfig::with_bond(4, 3)).unwrap();
        let expected = spec.discount() * closed_form_mean(&spec);
        assert_relative_eq!(report.price, expected, max_relative = 1e-6);
        assert_eq!(report.method, Method::Ttcross);
        assert_eq!(report.bond_dim, Some(4));
    }

    #[test]
    fn ttcross_deterministic_path_is_exact_at_bond_one() {
        let spec = flat_rb(10);
        let report = price_asian_ttcross(&spec, &CrossConfig::with_bond(1, 0)).unwrap();
        let exact = price_asian_bruteforce(&spec).unwrap().price;
        assert!((report.price - exact).abs() <= 1e-12, "{} vs {exact}", report.price);
    }

    #[test]
    fn ttcross_close_to_bruteforce_at_moderate_n() {
        let spec = AsianSpec::standard(12);
        let exact = price_asian_bruteforce(&spec).unwrap().price;
        let report = price_asian_ttcross(&spec, &CrossConfig::with_bond(32, 1)).unwrap();
        assert!((report.price - exact).abs() / exact < 1e-2, "{} vs {exact}", report.price);
    }

    #[test]
    fn payoff_mps_matches_paths_exhaustively() {
        for spec in [AsianSpec::standard(3), AsianSpec { right: OptionRight::Put, ..AsianSpec::standard(3) }] {
            let mps = build_exact_payoff_mps(&spec).unwrap();
            let p = spec.params().unwrap();
            for m in 0..8 {
                let bits = bits_of(m, 3);
                let mean = path_price_product(&bits, spec.s0, &p).unwrap().iter().sum::<f64>() / 3.0;
                let relaxed = match spec.right {
                    OptionRight::Call => mean - spec.strike,
                    OptionRight::Put => spec.strike - mean,
                };
                let idx: Vec<usize> = bits.iter().map(|&b| b as usize).collect();
                let expected = path_probability(&bits, p.p_u) * relaxed;
                assert!((mps.evaluate(&idx).unwrap() - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn payoff_mps_all_up_value() {
        let spec = AsianSpec::standard(7);
        let p = spec.params().unwrap();
        let mps = build_exact_payoff_mps(&spec).unwrap();
        let mean = (1..=7).map(|i| p.u.powi(i)).sum::<f64>() * 100.0 / 7.0;
        assert_relative_eq!(
            mps.evaluate(&[1; 7]).unwrap(),
            p.p_u.powi(7) * (mean - 100.0),
            max_relative = 1e-13
        );
    }

    #[test]
    fn payoff_mps_sum_and_bond() {
        let spec = AsianSpec::standard(30);
        let mps = build_exact_payoff_mps(&spec).unwrap();
        assert_eq!(mps.bond_dim(), 2);
        let dt = spec.dt();
        let expected = (1..=30).map(|i| (spec.rate * i as f64 * dt).exp()).sum::<f64>() * 100.0 / 30.0 - 100.0;
        assert_relative_eq!(mps.sum_all(), expected, max_relative = 1e-12);
    }

    #[test]
    fn single_step_payoff_mps() {
        let spec = AsianSpec::standard(1);
        let p = spec.params().unwrap();
        let mps = build_exact_payoff_mps(&spec).unwrap();
        assert_relative_eq!(mps.evaluate(&[1]).unwrap(), p.p_u * (100.0 * p.u - 100.0), max_relative = 1e-14);
        assert_relative_eq!(mps.evaluate(&[0]).unwrap(), p.p_d() * (100.0 * p.d - 100.0), max_relative = 1e-14);
    }

    fn site(shape: (usize, usize, usize), values: &[f64]) -> SiteTensor {
        SiteTensor::new(shape, values.to_vec()).unwrap()
    }

    #[test]
    fn center_update_signs() {
        let id = DMatrix::<f64>::identity(2, 2);
        let pos = site((2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]);
        let v = variational_center_update(&id, &id, &pos).unwrap();
        assert!(v.data().iter().all(|&e| e == 1.0));

        let neg = site((2, 2, 2), &[-1.0; 8]);
        let v = variational_center_update(&id, &id, &neg).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));

        let mixed = [1.0, -1.0, 0.0, 2.0, -3.0, 4.0, 5.0, -0.1];
        let v = variational_center_update(&id, &id, &site((2, 2, 2), &mixed)).unwrap();
        let expected: Vec<f64> = mixed.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(v.data(), expected.as_slice());
    }

    #[test]
    fn center_update_contracts_environments() {
        let left = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let right = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        // G^x[0, beta] = B^x[0, beta] - B^x[1, beta]
        let b = site((2, 2, 2), &[3.0, 1.0, 0.0, 0.0, 2.0, 5.0, 1.0, 2.0]);
        let g = center_gradient(&left, &right, &b).unwrap();
        assert_eq!(g[0], DMatrix::from_row_slice(1, 2, &[1.0, -4.0]));
        assert_eq!(g[1], DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]));
        let v = variational_center_update(&left, &right, &b).unwrap();
        assert_eq!(v.shape(), (1, 2, 2));
        assert_eq!(v.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(center_gradient(&DMatrix::zeros(1, 3), &right, &b).is_err());
    }

    #[test]
    fn greedy_identity_when_no_compression_needed() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (l, m) = greedy_binary_decompose(&a, 3).unwrap();
        assert_eq!(l, DMatrix::identity(3, 3));
        assert_eq!(m, a);
    }

    #[test]
    fn greedy_drops_the_cheap_row() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        let (l, m) = greedy_binary_decompose(&a, 1).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_eq!(m, DMatrix::from_row_slice(1, 2, &[3.0, 4.0]));
        assert_eq!(positive_mass(m.as_slice()), 7.0);
    }

    #[test]
    fn greedy_takes_a_free_merge() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 1.0, -0.5]);
        let (l, m) = greedy_binary_decompose(&a, 1).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(m, DMatrix::from_row_slice(1, 2, &[2.0, -1.0]));
    }

    #[test]
    fn greedy_rejects_zero_target() {
        let a = DMatrix::from_element(2, 2, 1.0);
        assert!(greedy_binary_decompose(&a, 0).is_err());
    }

    #[test]
    fn all_ones_filter_prices_the_unfloored_payoff() {
        let spec = AsianSpec::standard(20);
        let filter = BinaryFilterMps::all_ones(20).unwrap();
        let price = filter_price(&spec, &filter).unwrap();
        let expected = spec.discount() * (closed_form_mean(&spec) - spec.strike);
        assert_relative_eq!(price, expected, max_relative = 1e-12);
        assert!(price <= price_asian_bruteforce(&spec).unwrap().price);
    }

    #[test]
    fn filter_constraints_are_checked() {
        let two = site((1, 2, 2), &[1.0, 1.0, 1.0, 0.0]);
        let last = site((2, 2, 1), &[1.0, 0.0, 0.0, 1.0]);
        assert!(BinaryFilterMps::new(vec![two.clone(), last.clone()], 1).is_err());
        assert!(BinaryFilterMps::new(vec![two.clone(), last.clone()], 0).is_ok());
        let shared = site((2, 2, 1), &[1.0, 0.0, 1.0, 0.0]);
        assert!(BinaryFilterMps::new(vec![two.clone(), shared], 0).is_err());
        let fractional = site((2, 2, 1), &[0.5, 0.0, 0.0, 1.0]);
        assert!(BinaryFilterMps::new(vec![two, fractional], 0).is_err());
    }

    #[test]
    fn variational_single_step_is_exact() {
        let spec = AsianSpec::standard(1);
        let v = price_asian_variational(&spec, 1, 1, 0).unwrap();
        let exact = price_asian_bruteforce(&spec).unwrap().price;
        assert_relative_eq!(v.price, exact, max_relative = 1e-14);
    }

    #[test]
    fn variational_filter_is_valid_and_priced_consistently() {
        let spec = AsianSpec::standard(10);
        let out = variational_filter(&spec, 4, 2, 9).unwrap();
        assert_eq!(out.pass_prices.len(), 4);
        assert!(out.filter.to_mps().bond_dim() <= 4);
        let again = BinaryFilterMps::new(out.filter.sites().to_vec(), out.filter.center()).unwrap();
        assert_relative_eq!(filter_price(&spec, &again).unwrap(), out.price, max_relative = 1e-12);
        assert_eq!(out.price, out.pass_prices.iter().cloned().fold(f64::MIN, f64::max));
    }

    #[test]
    fn montecarlo_flat_path_is_exact() {
        let spec = flat_rb(8);
        let report = price_asian_montecarlo(&spec, 1000, 5).unwrap();
        let exact = price_asian_bruteforce(&spec).unwrap().price;
        assert_eq!(report.std_error, Some(0.0));
        assert_relative_eq!(report.price, exact, max_relative = 1e-12);
    }

    #[test]
    fn montecarlo_certain_up_moves() {
        let spec = AsianSpec::standard(6);
        let p = spec.params().unwrap();
        let forced = SchemeParams {
            p_u: 1.0,
            tag: SchemeTag::Crr,
            ..p
        };
        let (price, se) = asian_montecarlo_with(&spec, &forced, 500, 1).unwrap();
        let expected = spec.discount() * asian_path_payoff(&[1; 6], &spec).unwrap();
        assert_relative_eq!(price, expected, max_relative = 1e-12);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn montecarlo_is_seeded_and_rejects_tiny_samples() {
        let spec = AsianSpec::standard(10);
        let a = price_asian_montecarlo(&spec, 20_000, 3).unwrap();
        let b = price_asian_montecarlo(&spec, 20_000, 3).unwrap();
        assert_eq!(a.price, b.price);
        assert_eq!(a.std_error, b.std_error);
        assert!(price_asian_montecarlo(&spec, 1, 3).is_err());
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn payoff_mps_sum_identity(s0 in 10.0f64..200.0, k in 0.0f64..200.0, r in 0.0f64..0.2,
                                   vol in 0.25f64..0.8, n in 1usize..48) {
            let spec = AsianSpec { s0, strike: k, rate: r, vol, expiry: 1.0, steps: n,
                                   scheme: Scheme::Crr, right: OptionRight::Call };
            let dt = spec.dt();
            let expected = (1..=n).map(|i| (r * i as f64 * dt).exp()).sum::<f64>() * s0 / n as f64 - k;
            let got = build_exact_payoff_mps(&spec).unwrap().sum_all();
            prop_assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }

        #[test]
        fn greedy_respects_constraints(vals in proptest::collection::vec(-5.0f64..5.0, 24), target in 1usize..6) {
            let a = DMatrix::from_row_slice(6, 4, &vals);
            let (l, m) = greedy_binary_decompose(&a, target).unwrap();
            prop_assert!(l.ncols() <= target);
            prop_assert!(l.iter().all(|&v| v == 0.0 || v == 1.0));
            for i in 0..6 {
                prop_assert!(l.row(i).sum() <= 1.0);
            }
            let recon = l.transpose() * &a;
            prop_assert!((recon - &m).abs().max() <= 1e-12);
        }

        #[test]
        fn variational_is_a_lower_bound(seed in 0u64..1000, bond in 1usize..9, n in 2usize..11) {
            let spec = AsianSpec::standard(n);
            let exact = price_asian_bruteforce(&spec).unwrap().price;
            let v = price_asian_variational(&spec, bond, 2, seed).unwrap().price;
            prop_assert!(v <= exact + 1e-9);
        }
    }
}
