//! Tensor-train cross interpolation of black-box grid functions.
//!
//! Two-site sweeps: at every bond the superblock
//! `f(left pivots x x_k x x_{k+1} x right pivots)` is sampled, its rank is
//! truncated by SVD, and new pivots are chosen with maxvol on the kept
//! singular vectors. Cores are stored in skeleton form `U U[piv]^-1`, so
//! every core has an identity submatrix on its pivot rows.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Mps, SiteTensor};

/// Quasi-dominance slack accepted by [`maxvol`].
pub const MAXVOL_DELTA: f64 = 0.01;
/// Row-swap budget for [`maxvol`].
pub const MAXVOL_MAX_ITER: usize = 100;
/// Number of random index tuples used by the convergence probe.
pub const PROBE_COUNT: usize = 1024;
/// Singular values below this fraction of the largest one are discarded.
const SVD_CUTOFF: f64 = 1e-13;
const RANK_FLOOR: f64 = 1e-12;

/// A deterministic real function on a rectangular integer grid.
pub trait GridFunction: Sync {
    fn dims(&self) -> &[usize];

    /// Evaluates every point of the batch; results must keep input order.
    fn eval_batch(&self, points: &[Vec<usize>]) -> Result<Vec<f64>>;
}

/// Wraps a pointwise closure; batches are evaluated in parallel.
pub struct FnGrid<F> {
    dims: Vec<usize>,
    f: F,
}

impl<F> FnGrid<F>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    pub fn new(dims: Vec<usize>, f: F) -> Self {
        Self { dims, f }
    }
}

impl<F> GridFunction for FnGrid<F>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn eval_batch(&self, points: &[Vec<usize>]) -> Result<Vec<f64>> {
        let values: Vec<f64> = points.par_iter().map(|p| (self.f)(p)).collect();
        match values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Eval(format!("non-finite value at {:?}", points[i]))),
            None => Ok(values),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossConfig {
    pub max_bond: usize,
    /// Maximum number of passes; each pass runs in one direction.
    pub n_sweeps: usize,
    /// Relative max-change of the probe values between passes that stops the loop.
    pub tol: f64,
    pub seed: u64,
    /// Largest batch handed to one `eval_batch` call.
    pub batch_cap: usize,
}

impl Default for CrossConfig {
    fn default() -> Self {
        Self {
            max_bond: 16,
            n_sweeps: 10,
            tol: 1e-8,
            seed: 0,
            batch_cap: 1 << 16,
        }
    }
}

impl CrossConfig {
    pub fn with_bond(max_bond: usize, seed: u64) -> Self {
        Self {
            max_bond,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_bond == 0 {
            return Err(Error::InvalidArgument("max_bond must be >= 1".into()));
        }
        if self.n_sweeps == 0 {
            return Err(Error::InvalidArgument("n_sweeps must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.batch_cap == 0 {
            return Err(Error::InvalidArgument("batch_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maxvol {
    /// Selected rows; row `rows[j]` is paired with column `j`.
    pub rows: Vec<usize>,
    pub converged: bool,
}

/// Picks `r` rows of an `n x r` matrix whose submatrix is quasi-dominant:
/// every entry of `mat * sub^-1` is bounded by `1 + MAXVOL_DELTA`.
pub fn maxvol(mat: &DMatrix<f64>) -> Result<Maxvol> {
    let (n, r) = mat.shape();
    if r == 0 {
        return Ok(Maxvol {
            rows: vec![],
            converged: true,
        });
    }
    if n < r {
        return Err(Error::ShapeMismatch(format!(
            "maxvol needs at least as many rows as columns, got {n}x{r}"
        )));
    }
    let sv = mat.clone().svd(false, false).singular_values;
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if !(smax > 0.0) || smin <= RANK_FLOOR * smax {
        return Err(Error::RankDeficient {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }

    let mut rows = initial_pivots(mat);
    let sub = mat.select_rows(&rows);
    let inv = sub
        .try_inverse()
        .ok_or(Error::RankDeficient { ratio: 0.0 })?;
    let mut b = mat * inv;
    let mut converged = false;
    for _ in 0..MAXVOL_MAX_ITER {
        let (i, j) = argmax_abs(&b);
        let pivot = b[(i, j)];
        if pivot.abs() <= 1.0 + MAXVOL_DELTA {
            converged = true;
            break;
        }
        rows[j] = i;
        let col = b.column(j).clone_owned();
        let mut row = b.row(i).clone_owned();
        row[j] -= 1.0;
        b -= col * (row / pivot);
    }
    if !converged {
        let (i, j) = argmax_abs(&b);
        converged = b[(i, j)].abs() <= 1.0 + MAXVOL_DELTA;
    }
    Ok(Maxvol { rows, converged })
}

fn argmax_abs(m: &DMatrix<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut val = -1.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > val {
                val = a;
                best = (i, j);
            }
        }
    }
    best
}

/// Gaussian elimination with partial (row) pivoting; returns the pivot rows.
fn initial_pivots(mat: &DMatrix<f64>) -> Vec<usize> {
    let (n, r) = mat.shape();
    let mut work = mat.clone();
    let mut used = vec![false; n];
    let mut rows = Vec::with_capacity(r);
    for j in 0..r {
        let mut best = usize::MAX;
        let mut val = -1.0;
        for i in 0..n {
            if !used[i] && work[(i, j)].abs() > val {
                val = work[(i, j)].abs();
                best = i;
            }
        }
        used[best] = true;
        rows.push(best);
        let p = work[(best, j)];
        if p == 0.0 {
            continue;
        }
        for i in 0..n {
            if used[i] {
                continue;
            }
            let factor = work[(i, j)] / p;
            if factor != 0.0 {
                for c in j..r {
                    work[(i, c)] -= factor * work[(best, c)];
                }
            }
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct CrossResult {
    pub mps: Mps,
    pub passes: usize,
    pub converged: bool,
    /// Relative probe change after the last pass (infinite after a single pass).
    pub last_change: f64,
    pub evaluations: usize,
    /// Passes in which some maxvol call stopped at its iteration cap.
    pub maxvol_warnings: usize,
    interpolation_points: Vec<Vec<usize>>,
}

impl CrossResult {
    /// Full index tuples at which the returned MPS reproduces `f` by construction.
    pub fn interpolation_points(&self) -> &[Vec<usize>] {
        &self.interpolation_points
    }
}

enum Direction {
    LeftToRight,
    RightToLeft,
}

struct Sweeper<'a, G: GridFunction + ?Sized> {
    f: &'a G,
    dims: Vec<usize>,
    cfg: CrossConfig,
    left_sets: Vec<Vec<Vec<usize>>>,
    right_sets: Vec<Vec<Vec<usize>>>,
    evaluations: usize,
    maxvol_stalled: bool,
}

impl<'a, G: GridFunction + ?Sized> Sweeper<'a, G> {
    fn eval(&mut self, points: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(self.cfg.batch_cap) {
            let vals = self.f.eval_batch(chunk)?;
            if vals.len() != chunk.len() {
                return Err(Error::Eval(format!(
                    "batch of {} points returned {} values",
                    chunk.len(),
                    vals.len()
                )));
            }
            out.extend(vals);
        }
        self.evaluations += points.len();
        Ok(out)
    }

    /// Superblock at the bond between sites `k` and `k + 1`.
    fn superblock(&mut self, k: usize) -> Result<(DMatrix<f64>, Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let rows: Vec<Vec<usize>> = self.left_sets[k]
            .iter()
            .flat_map(|p| {
                (0..self.dims[k]).map(move |x| {
                    let mut v = p.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
        let cols: Vec<Vec<usize>> = (0..self.dims[k + 1])
            .flat_map(|x| {
                self.right_sets[k + 2].iter().map(move |s| {
                    let mut v = Vec::with_capacity(s.len() + 1);
                    v.push(x);
                    v.extend_from_slice(s);
                    v
                })
            })
            .collect();
        let points: Vec<Vec<usize>> = rows
            .iter()
            .flat_map(|r| {
                cols.iter().map(move |c| {
                    let mut v = Vec::with_capacity(r.len() + c.len());
                    v.extend_from_slice(r);
                    v.extend_from_slice(c);
                    v
                })
            })
            .collect();
        let vals = self.eval(&points)?;
        let s = DMatrix::from_row_slice(rows.len(), cols.len(), &vals);
        Ok((s, rows, cols))
    }

    /// Truncated SVD + maxvol: returns the skeleton factor `U U[piv]^-1` and the pivots.
    fn skeleton(&mut self, s: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let svd = s.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let sv = &svd.singular_values;
        let top = sv.iter().cloned().fold(0.0, f64::max);
        let numerical = if top > 0.0 {
            sv.iter().filter(|&&x| x > SVD_CUTOFF * top).count()
        } else {
            0
        };
        let rank = numerical.clamp(1, self.cfg.max_bond.min(u.ncols()));
        // nalgebra does not promise sorted singular values
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
        let basis = u.select_columns(&order[..rank]);
        let mv = maxvol(&basis)?;
        self.maxvol_stalled |= !mv.converged;
        let inv = basis
            .select_rows(&mv.rows)
            .try_inverse()
            .ok_or(Error::RankDeficient { ratio: 0.0 })?;
        Ok((basis * inv, mv.rows))
    }

    fn pass(&mut self, dir: Direction) -> Result<(Mps, Vec<Vec<usize>>)> {
        let n = self.dims.len();
        let mut cores: Vec<Option<SiteTensor>> = vec![None; n];
        let mut exact_points = Vec::new();
        match dir {
            Direction::LeftToRight => {
                for k in 0..n - 1 {
                    let (s, rows, _) = self.superblock(k)?;
                    let (factor, piv) = self.skeleton(&s)?;
                    let (dl, d, r) = (self.left_sets[k].len(), self.dims[k], piv.len());
                    cores[k] = Some(SiteTensor::from_fn((dl, d, r), |a, x, b| factor[(a * d + x, b)])?);
                    self.left_sets[k + 1] = piv.iter().map(|&i| rows[i].clone()).collect();
                    if k == n - 2 {
                        let dn = self.dims[n - 1];
                        cores[n - 1] = Some(SiteTensor::from_fn((r, dn, 1), |a, x, _| s[(piv[a], x)])?);
                        for prefix in &self.left_sets[n - 1] {
                            for x in 0..dn {
                                let mut p = prefix.clone();
                                p.push(x);
                                exact_points.push(p);
                            }
                        }
                    }
                }
            }
            Direction::RightToLeft => {
                for k in (0..n - 1).rev() {
                    let (s, _, cols) = self.superblock(k)?;
                    let (factor, piv) = self.skeleton(&s.transpose())?;
                    let (d, dr, r) = (self.dims[k + 1], self.right_sets[k + 2].len(), piv.len());
                    cores[k + 1] = Some(SiteTensor::from_fn((r, d, dr), |a, x, b| factor[(x * dr + b, a)])?);
                    self.right_sets[k + 1] = piv.iter().map(|&j| cols[j].clone()).collect();
                    if k == 0 {
                        let d0 = self.dims[0];
                        cores[0] = Some(SiteTensor::from_fn((1, d0, r), |_, x, b| s[(x, piv[b])])?);
                        for suffix in &self.right_sets[1] {
                            for x in 0..d0 {
                                let mut p = vec![x];
                                p.extend_from_slice(suffix);
                                exact_points.push(p);
                            }
                        }
                    }
                }
            }
        }
        let mps = Mps::from_tensors(cores.into_iter().map(|c| c.expect("core built")).collect())?;
        Ok((mps, exact_points))
    }
}

/// Cross-approximates `f` by an MPS with bond dimension at most `cfg.max_bond`.
pub fn ttcross_approximate<G: GridFunction + ?Sized>(f: &G, cfg: &CrossConfig) -> Result<CrossResult> {
    cfg.validate()?;
    let dims = f.dims().to_vec();
    if dims.is_empty() {
        return Err(Error::InvalidArgument("grid function has no dimensions".into()));
    }
    if let Some(k) = dims.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("dimension {k} is empty")));
    }
    let n = dims.len();

    if n == 1 {
        let points: Vec<Vec<usize>> = (0..dims[0]).map(|x| vec![x]).collect();
        let mut sweeper = Sweeper {
            f,
            dims: dims.clone(),
            cfg: *cfg,
            left_sets: vec![],
            right_sets: vec![],
            evaluations: 0,
            maxvol_stalled: false,
        };
        let vals = sweeper.eval(&points)?;
        return Ok(CrossResult {
            mps: Mps::from_tensors(vec![SiteTensor::from_vector(vals)?])?,
            passes: 1,
            converged: true,
            last_change: 0.0,
            evaluations: sweeper.evaluations,
            maxvol_warnings: 0,
            interpolation_points: points,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random_tuple = |rng: &mut ChaCha8Rng| -> Vec<usize> { dims.iter().map(|&d| rng.gen_range(0..d)).collect() };
    let seeds: Vec<Vec<usize>> = (0..cfg.max_bond).map(|_| random_tuple(&mut rng)).collect();
    let probes: Vec<Vec<usize>> = (0..PROBE_COUNT).map(|_| random_tuple(&mut rng)).collect();

    let mut right_sets = vec![Vec::new(); n + 1];
    right_sets[n] = vec![vec![]];
    for (k, set) in right_sets.iter_mut().enumerate().take(n).skip(1) {
        for t in &seeds {
            let suffix = t[k..].to_vec();
            if !set.contains(&suffix) {
                set.push(suffix);
            }
        }
    }
    let mut left_sets = vec![Vec::new(); n + 1];
    left_sets[0] = vec![vec![]];

    let mut sweeper = Sweeper {
        f,
        dims: dims.clone(),
        cfg: *cfg,
        left_sets,
        right_sets,
        evaluations: 0,
        maxvol_stalled: false,
    };

    let mut previous: Option<Vec<f64>> = None;
    let mut result = None;
    let mut maxvol_warnings = 0;
    for pass in 0..cfg.n_sweeps {
        sweeper.maxvol_stalled = false;
        let dir = if pass % 2 == 0 {
            Direction::LeftToRight
        } else {
            Direction::RightToLeft
        };
        let (mps, points) = sweeper.pass(dir)?;
        if sweeper.maxvol_stalled {
            maxvol_warnings += 1;
        }
        let values: Vec<f64> = probes.iter().map(|p| mps.evaluate_unchecked(p)).collect();
        let change = match &previous {
            Some(old) => relative_change(old, &values),
            None => f64::INFINITY,
        };
        let converged = change < cfg.tol;
        result = Some((mps, pass + 1, converged, change, points));
        if converged {
            break;
        }
        previous = Some(values);
    }
    let (mps, passes, converged, last_change, interpolation_points) = result.expect("at least one pass");
    Ok(CrossResult {
        mps,
        passes,
        converged,
        last_change,
        evaluations: sweeper.evaluations,
        maxvol_warnings,
        interpolation_points,
    })
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    let scale = new.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = old
        .iter()
        .zip(new)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        (0..n)
            .flat_map(|first| {
                subsets(n, k - 1)
                    .into_iter()
                    .filter(move |rest| rest.iter().all(|&r| r > first))
                    .map(move |mut rest| {
                        rest.insert(0, first);
                        rest
                    })
            })
            .collect()
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort();
        v
    }

    #[test]
    fn maxvol_column_vector_picks_largest() {
        let m = DMatrix::from_column_slice(3, 1, &[3.0, -5.0, 2.0]);
        assert_eq!(maxvol(&m).unwrap().rows, vec![1]);
    }

    #[test]
    fn maxvol_matches_volume_enumeration() {
        let m = DMatrix::<f64>::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.1, 0.1]);
        let best = subsets(3, 2)
            .into_iter()
            .max_by(|a, b| {
                let da = m.select_rows(a).determinant().abs();
                let db = m.select_rows(b).determinant().abs();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(best, vec![0, 1]);
        let mv = maxvol(&m).unwrap();
        assert!(mv.converged);
        assert_eq!(sorted(mv.rows), best);
    }

    #[test]
    fn maxvol_rejects_rank_deficient() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(matches!(maxvol(&m), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn maxvol_is_quasi_dominant_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = DMatrix::from_fn(40, 6, |_, _| rng.gen_range(-1.0..1.0));
            let mv = maxvol(&m).unwrap();
            assert!(mv.converged);
            let b = &m * m.select_rows(&mv.rows).try_inverse().unwrap();
            assert!(b.iter().all(|v| v.abs() <= 1.0 + MAXVOL_DELTA + 1e-12));
        }
    }

    #[test]
    fn separable_function_is_exact_at_bond_one() {
        let dims = vec![3, 2, 4, 2, 5, 3];
        let f = FnGrid::new(dims.clone(), |x: &[usize]| {
            x.iter().enumerate().map(|(k, &v)| 1.0 + 0.3 * v as f64 + 0.1 * k as f64).product()
        });
        let res = ttcross_approximate(&f, &CrossConfig::with_bond(1, 4)).unwrap();
        assert_eq!(res.mps.bond_dim(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: Vec<usize> = dims.iter().map(|&d| rng.gen_range(0..d)).collect();
            let exact: f64 = x.iter().enumerate().map(|(k, &v)| 1.0 + 0.3 * v as f64 + 0.1 * k as f64).product();
            let approx = res.mps.evaluate(&x).unwrap();
            assert!((approx - exact).abs() <= 1e-10 * exact.abs());
        }
    }

    #[test]
    fn single_site_and_unit_dimensions() {
        let f = FnGrid::new(vec![4], |x: &[usize]| x[0] as f64 * 2.0);
        let res = ttcross_approximate(&f, &CrossConfig::default()).unwrap();
        assert_eq!(res.mps.to_dense().unwrap(), vec![0.0, 2.0, 4.0, 6.0]);

        let g = FnGrid::new(vec![1, 3, 1, 2], |x: &[usize]| 1.0 + x[1] as f64 * x[3] as f64);
        let res = ttcross_approximate(&g, &CrossConfig::with_bond(4, 0)).unwrap();
        for x1 in 0..3 {
            for x3 in 0..2 {
                let v = res.mps.evaluate(&[0, x1, 0, x3]).unwrap();
                assert!((v - (1.0 + (x1 * x3) as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn propagates_evaluation_failures() {
        let f = FnGrid::new(vec![2, 2, 2], |x: &[usize]| if x == [1, 1, 1] { f64::NAN } else { 1.0 });
        let err = ttcross_approximate(&f, &CrossConfig::with_bond(4, 0)).unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }

    #[test]
    fn rejects_invalid_config() {
        let f = FnGrid::new(vec![2, 2], |_: &[usize]| 1.0);
        let cfg = CrossConfig {
            max_bond: 0,
            ..CrossConfig::default()
        };
        assert!(matches!(ttcross_approximate(&f, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_pass_reports_unconverged() {
        let f = FnGrid::new(vec![2; 6], |x: &[usize]| x.iter().sum::<usize>() as f64);
        let cfg = CrossConfig {
            n_sweeps: 1,
            ..CrossConfig::with_bond(4, 0)
        };
        let res = ttcross_approximate(&f, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.passes, 1);
    }

    #[test]
    fn batch_cap_splits_calls() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting {
            dims: Vec<usize>,
            largest: AtomicUsize,
        }
        impl GridFunction for Counting {
            fn dims(&self) -> &[usize] {
                &self.dims
            }
            fn eval_batch(&self, points: &[Vec<usize>]) -> Result<Vec<f64>> {
                self.largest.fetch_max(points.len(), Ordering::Relaxed);
                Ok(points.iter().map(|p| p.iter().sum::<usize>() as f64).collect())
            }
        }
        let f = Counting {
            dims: vec![3; 5],
            largest: AtomicUsize::new(0),
        };
        let cfg = CrossConfig {
            batch_cap: 7,
            ..CrossConfig::with_bond(3, 2)
        };
        let res = ttcross_approximate(&f, &cfg).unwrap();
        assert!(f.largest.load(Ordering::Relaxed) <= 7);
        assert!((res.mps.evaluate(&[2, 1, 0, 2, 2]).unwrap() - 7.0).abs() < 1e-10);
    }
}
