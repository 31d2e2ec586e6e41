//! Linear readout trained by ridge regression, plus the NMSE score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-6;

/// Feature rows and target rows with the wash/train/eval split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub n_wash: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, n_wash: usize, n_train: usize, n_eval: usize) -> Result<Self> {
        let ds = Self { x, y, n_wash, n_train, n_eval };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(Error::DimensionMismatch { expected: self.x.len(), got: self.y.len() });
        }
        let need = self.n_wash + self.n_train + self.n_eval;
        if need > self.x.len() {
            return Err(Error::TooShort { needed: need, got: self.x.len() });
        }
        check_rectangular(&self.x)?;
        check_rectangular(&self.y)?;
        if self.x.iter().chain(&self.y).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn train_range(&self) -> std::ops::Range<usize> {
        self.n_wash..self.n_wash + self.n_train
    }

    pub fn eval_range(&self) -> std::ops::Range<usize> {
        let start = self.n_wash + self.n_train;
        start..start + self.n_eval
    }
}

fn check_rectangular(rows: &[Vec<f64>]) -> Result<usize> {
    let width = rows.first().map_or(0, Vec::len);
    for r in rows {
        if r.len() != width {
            return Err(Error::DimensionMismatch { expected: width, got: r.len() });
        }
    }
    Ok(width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutWeights {
    /// Row-major `(features × outputs)`.
    pub w_out: Vec<Vec<f64>>,
    pub ridge_lambda: f64,
    pub train_start: usize,
    pub train_end: usize,
}

impl ReadoutWeights {
    pub fn zeros(features: usize, outputs: usize) -> Self {
        Self {
            w_out: vec![vec![0.0; outputs]; features],
            ridge_lambda: 0.0,
            train_start: 0,
            train_end: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_out.len()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.first().map_or(0, Vec::len)
    }

    pub fn norm(&self) -> f64 {
        self.w_out.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sufficient statistics of a ridge problem: `XᵀX`, `XᵀY` and the column norms of `X`.
#[derive(Debug, Clone)]
pub struct Normal {
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
}

impl Normal {
    pub fn from_rows(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        let p = check_rectangular(x)?;
        let k = check_rectangular(y)?;
        let xm = DMatrix::from_fn(x.len(), p, |i, j| x[i][j]);
        let ym = DMatrix::from_fn(y.len(), k, |i, j| y[i][j]);
        Ok(Self {
            gram: xm.tr_mul(&xm),
            rhs: xm.tr_mul(&ym),
        })
    }

    pub fn add(&mut self, other: &Normal) -> Result<()> {
        if self.gram.shape() != other.gram.shape() || self.rhs.shape() != other.rhs.shape() {
            return Err(Error::DimensionMismatch { expected: self.gram.nrows(), got: other.gram.nrows() });
        }
        self.gram += &other.gram;
        self.rhs += &other.rhs;
        Ok(())
    }

    pub fn sub(&self, other: &Normal) -> Normal {
        Normal {
            gram: &self.gram - &other.gram,
            rhs: &self.rhs - &other.rhs,
        }
    }

    /// Solves `(XᵀX + λI) W = XᵀY`.
    ///
    /// Columns are scaled to unit norm first (`M = S XᵀX S + λS²`, `W = S Z`)
    /// so the Cholesky pivots are comparable across sensors with very
    /// different units.
    pub fn solve(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("ridge lambda must be finite and >= 0, got {lambda}")));
        }
        let p = self.gram.nrows();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let d = self.gram[(j, j)];
                if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }
            })
            .collect();
        let mut m = DMatrix::from_fn(p, p, |i, j| self.gram[(i, j)] * scale[i] * scale[j]);
        for j in 0..p {
            m[(j, j)] += lambda * scale[j] * scale[j];
        }
        let mut z = DMatrix::from_fn(p, self.rhs.ncols(), |i, j| self.rhs[(i, j)] * scale[i]);
        let l = cholesky(&mut m, lambda == 0.0)?;
        cholesky_solve(&l, &mut z);
        for i in 0..p {
            for j in 0..z.ncols() {
                z[(i, j)] *= scale[i];
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("ridge solution is not finite".into()));
        }
        Ok(z)
    }
}

/// In-place lower Cholesky; reports the first pivot that collapses.
fn cholesky(m: &mut DMatrix<f64>, strict: bool) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max);
    let tol = if strict { 1e-12 * max_diag.max(f64::MIN_POSITIVE) } else { 0.0 };
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return Err(Error::RankDeficient { dimension: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

fn to_weights(w: DMatrix<f64>, lambda: f64, start: usize, end: usize) -> ReadoutWeights {
    ReadoutWeights {
        w_out: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
        ridge_lambda: lambda,
        train_start: start,
        train_end: end,
    }
}

/// Ridge fit on arbitrary rows (no split bookkeeping).
pub fn fit_rows(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<ReadoutWeights> {
    let w = Normal::from_rows(x, y)?.solve(lambda)?;
    Ok(to_weights(w, lambda, 0, x.len()))
}

/// Ridge fit on the training rows of `ds` only.
pub fn fit_ridge(ds: &Dataset, lambda: f64) -> Result<ReadoutWeights> {
    ds.validate()?;
    if ds.n_train == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let r = ds.train_range();
    let w = Normal::from_rows(&ds.x[r.clone()], &ds.y[r.clone()])?.solve(lambda)?;
    Ok(to_weights(w, lambda, r.start, r.end))
}

pub const LAMBDA_GRID: [f64; 9] = [1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Picks λ from `grid` by NMSE on the last 10% of training rows (fitted on
/// the first 90%), then refits on all training rows. Returns the weights and
/// the `(λ, validation NMSE)` table.
pub fn fit_ridge_search(ds: &Dataset, grid: &[f64]) -> Result<(ReadoutWeights, Vec<(f64, f64)>)> {
    ds.validate()?;
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    let r = ds.train_range();
    let n_val = (ds.n_train / 10).max(1);
    if ds.n_train < n_val + 1 {
        return Err(Error::TooShort { needed: n_val + 1, got: ds.n_train });
    }
    let split = r.end - n_val;
    let fit_part = Normal::from_rows(&ds.x[r.start..split], &ds.y[r.start..split])?;
    let val_part = Normal::from_rows(&ds.x[split..r.end], &ds.y[split..r.end])?;
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let score = match fit_part.solve(lambda) {
            Ok(w) => {
                let w = to_weights(w, lambda, r.start, split);
                let pred = predict_rows(&w, &ds.x[split..r.end])?;
                nmse_multi(&pred, &ds.y[split..r.end]).unwrap_or(f64::INFINITY)
            }
            Err(_) => f64::INFINITY,
        };
        table.push((lambda, score));
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((lambda, score));
        }
    }
    let lambda = best.map(|b| b.0).unwrap_or(DEFAULT_LAMBDA);
    let mut full = fit_part;
    full.add(&val_part)?;
    let w = full.solve(lambda)?;
    Ok((to_weights(w, lambda, r.start, r.end), table))
}

/// `ŷ = W_outᵀ x`.
pub fn predict(w: &ReadoutWeights, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.feature_dim() {
        return Err(Error::DimensionMismatch { expected: w.feature_dim(), got: x.len() });
    }
    let mut out = vec![0.0; w.output_dim()];
    for (xi, row) in x.iter().zip(&w.w_out) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    Ok(out)
}

pub fn predict_rows(w: &ReadoutWeights, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| predict(w, x)).collect()
}

/// Mean squared error over the population variance of `targets`.
pub fn nmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    if targets.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: targets.len() });
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// NMSE averaged over output columns.
pub fn nmse_multi(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: targets.len(), got: predictions.len() });
    }
    let k = targets.first().map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for c in 0..k {
        let p: Vec<f64> = predictions.iter().map(|r| r[c]).collect();
        let t: Vec<f64> = targets.iter().map(|r| r[c]).collect();
        total += nmse(&p, &t)?;
    }
    Ok(total / k as f64)
}

/// Relative residual `‖(XᵀX + λI)W − XᵀY‖ / ‖XᵀY‖` (Frobenius).
pub fn normal_equation_residual(x: &[Vec<f64>], y: &[Vec<f64>], w: &ReadoutWeights) -> Result<f64> {
    let n = Normal::from_rows(x, y)?;
    let wm = DMatrix::from_fn(w.feature_dim(), w.output_dim(), |i, j| w.w_out[i][j]);
    let mut lhs = &n.gram * &wm;
    lhs += &wm * w.ridge_lambda;
    Ok((lhs - &n.rhs).norm() / n.rhs.norm().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_system(rows: usize, cols: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let mut r: Vec<f64> = (0..cols - 1).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                r.push(1.0);
                r
            })
            .collect();
        let y = x
            .iter()
            .map(|r| vec![r.iter().enumerate().map(|(i, v)| v * (i as f64 - 3.0)).sum::<f64>() + rng.random::<f64>()])
            .collect();
        (x, y)
    }

    #[test]
    fn hand_solved_line() {
        let x = vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, 1.0]];
        let y = vec![vec![2.0], vec![4.0], vec![6.0]];
        let w = fit_rows(&x, &y, 0.0).unwrap();
        assert!((w.w_out[0][0] - 2.0).abs() < 1e-12);
        assert!(w.w_out[1][0].abs() < 1e-12);
    }

    #[test]
    fn square_system_interpolates() {
        let x = vec![vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.5, -1.0, 1.0]];
        let y = vec![vec![1.0, 0.0], vec![-2.0, 1.0], vec![0.25, 3.0]];
        let w = fit_rows(&x, &y, 0.0).unwrap();
        let pred = predict_rows(&w, &x).unwrap();
        for (p, t) in pred.iter().flatten().zip(y.iter().flatten()) {
            assert!((p - t).abs() < 1e-10);
        }
    }

    #[test]
    fn normal_equations_hold_on_random_system() {
        let (x, y) = random_system(1000, 21, 3);
        let w = fit_rows(&x, &y, 1e-6).unwrap();
        assert!(normal_equation_residual(&x, &y, &w).unwrap() <= 1e-8);
    }

    #[test]
    fn heavy_regularization_shrinks_to_zero() {
        let (x, y) = random_system(200, 5, 9);
        let w = fit_rows(&x, &y, 1e9).unwrap();
        assert!(w.norm() < 1e-5, "norm {}", w.norm());
        let w = fit_rows(&x, &y, 1e13).unwrap();
        assert!(w.norm() < 1e-6);
    }

    #[test]
    fn rank_deficiency_names_dimension() {
        let x = vec![vec![1.0, 2.0, 1.0], vec![2.0, 4.0, 1.0], vec![3.0, 6.0, 1.0], vec![5.0, 10.0, 1.0]];
        let y = vec![vec![1.0]; 4];
        match fit_rows(&x, &y, 0.0) {
            Err(Error::RankDeficient { dimension }) => assert_eq!(dimension, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(fit_rows(&x, &y, 1e-3).is_ok());
    }

    #[test]
    fn eval_rows_do_not_leak_into_training() {
        let (x, y) = random_system(300, 4, 1);
        let ds = Dataset::new(x.clone(), y.clone(), 50, 200, 50).unwrap();
        let w1 = fit_ridge(&ds, 1e-6).unwrap();
        let mut y2 = y;
        for r in &mut y2[250..] {
            r[0] = 1e6;
        }
        let mut x2 = x;
        for r in &mut x2[..50] {
            r[0] = -7.0;
        }
        let w2 = fit_ridge(&Dataset::new(x2, y2, 50, 200, 50).unwrap(), 1e-6).unwrap();
        assert_eq!(w1.w_out, w2.w_out);
        assert_eq!((w1.train_start, w1.train_end), (50, 250));
    }

    #[test]
    fn predict_basics() {
        let w = ReadoutWeights::zeros(3, 2);
        assert_eq!(predict(&w, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let mut w = ReadoutWeights::zeros(3, 1);
        w.w_out[2][0] = 0.7;
        assert_eq!(predict(&w, &[0.0, 0.0, 1.0]).unwrap(), vec![0.7]);
        assert!(matches!(predict(&w, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn nmse_reference_points() {
        let t = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        let m = t.iter().sum::<f64>() / 4.0;
        assert!((nmse(&[m; 4], &t).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(nmse(&[1.0, 1.0], &[3.0, 3.0]), Err(Error::DegenerateTarget)));
        assert!(matches!(nmse(&[1.0], &[3.0]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn lambda_search_reports_full_grid() {
        let (x, y) = random_system(500, 6, 4);
        let ds = Dataset::new(x, y, 0, 400, 100).unwrap();
        let (w, table) = fit_ridge_search(&ds, &LAMBDA_GRID).unwrap();
        assert_eq!(table.len(), LAMBDA_GRID.len());
        assert!(LAMBDA_GRID.contains(&w.ridge_lambda));
        let best = table.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        assert_eq!(table.iter().find(|t| t.0 == w.ridge_lambda).unwrap().1, best);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shrinkage_is_monotone(seed in 0u64..1000, a in -8.0f64..2.0, b in 0.1f64..4.0) {
            let (x, y) = random_system(60, 5, seed);
            let l1 = 10f64.powf(a);
            let l2 = l1 * 10f64.powf(b);
            let w1 = fit_rows(&x, &y, l1).unwrap();
            let w2 = fit_rows(&x, &y, l2).unwrap();
            prop_assert!(w1.norm() >= w2.norm() * (1.0 - 1e-9));
        }

        #[test]
        fn row_order_is_irrelevant(seed in 0u64..1000, rot in 1usize..59) {
            let (x, y) = random_system(60, 5, seed);
            let w1 = fit_rows(&x, &y, 1e-6).unwrap();
            let mut xr = x.clone();
            let mut yr = y.clone();
            xr.rotate_left(rot);
            yr.rotate_left(rot);
            xr.reverse();
            yr.reverse();
            let w2 = fit_rows(&xr, &yr, 1e-6).unwrap();
            for (a, b) in w1.w_out.iter().flatten().zip(w2.w_out.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
            }
        }
    }
}
