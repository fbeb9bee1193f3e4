//! Gaussian-process time-series DSL: grammar, covariance and likelihood
//! semantics, and posterior-predictive forecasting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::grammar::{Grammar, TerminalDist};
use crate::sexpr::{Atom, Expr};
use crate::synthesis::LikelihoodModel;

/// Observation noise added to every diagonal entry of a covariance matrix.
pub const JITTER: f64 = 0.01;

pub const BASE_KERNELS: [&str; 5] = ["const", "wn", "lin", "se", "per"];
pub const OPERATORS: [&str; 3] = ["+", "*", "cp"];

/// The kernel grammar: five base kernels at 0.14 each, `+` and `*` at 0.135,
/// change points at 0.03, and unit-rate exponential parameters.
pub fn gp_grammar() -> Grammar {
    Grammar::builder()
        .start("K")
        .rule("K", "const", 0.14, &["H"])
        .rule("K", "wn", 0.14, &["H"])
        .rule("K", "lin", 0.14, &["H"])
        .rule("K", "se", 0.14, &["H"])
        .rule("K", "per", 0.14, &["H", "H"])
        .rule("K", "+", 0.135, &["K", "K"])
        .rule("K", "*", 0.135, &["K", "K"])
        .rule("K", "cp", 0.03, &["H", "K", "K"])
        .terminal("H", "gamma", 1.0, TerminalDist::gamma(1.0, 1.0))
        .build()
        .expect("built-in grammar has a start symbol")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("unknown kernel tag `{0}`")]
    UnknownTag(String),
    #[error("`{tag}` expects {expected} children, found {found}")]
    Arity { tag: String, expected: usize, found: usize },
    #[error("parameter node must be `(gamma v)` with v > 0, found {0}")]
    BadParameter(String),
}

#[derive(Debug, Error)]
pub enum GpError {
    #[error("covariance matrix is not positive definite for kernel {0}")]
    NotPositiveDefinite(String),
    #[error("time series needs at least one point with matching xs and ys (got {xs} xs, {ys} ys)")]
    BadSeries { xs: usize, ys: usize },
    #[error("time series contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Typed view of a validated kernel expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Const(f64),
    WhiteNoise(f64),
    Linear(f64),
    SquaredExp(f64),
    Periodic { length: f64, period: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
    ChangePoint { location: f64, left: Box<Kernel>, right: Box<Kernel> },
}

fn param(e: &Expr) -> Result<f64, KernelError> {
    let mut atoms = e.atoms();
    match (e.tag(), atoms.next(), atoms.next(), e.child_count()) {
        ("gamma", Some(Atom::Num(v)), None, 0) if *v > 0.0 => Ok(*v),
        _ => Err(KernelError::BadParameter(e.to_string())),
    }
}

impl Kernel {
    pub fn from_expr(e: &Expr) -> Result<Kernel, KernelError> {
        let kids: Vec<&Expr> = e.children().collect();
        let arity = |expected: usize| {
            if kids.len() == expected && e.atoms().next().is_none() {
                Ok(())
            } else {
                Err(KernelError::Arity {
                    tag: e.tag().to_string(),
                    expected,
                    found: kids.len(),
                })
            }
        };
        Ok(match e.tag() {
            "const" => {
                arity(1)?;
                Kernel::Const(param(kids[0])?)
            }
            "wn" => {
                arity(1)?;
                Kernel::WhiteNoise(param(kids[0])?)
            }
            "lin" => {
                arity(1)?;
                Kernel::Linear(param(kids[0])?)
            }
            "se" => {
                arity(1)?;
                Kernel::SquaredExp(param(kids[0])?)
            }
            "per" => {
                arity(2)?;
                Kernel::Periodic {
                    length: param(kids[0])?,
                    period: param(kids[1])?,
                }
            }
            "+" => {
                arity(2)?;
                Kernel::Sum(Box::new(Kernel::from_expr(kids[0])?), Box::new(Kernel::from_expr(kids[1])?))
            }
            "*" => {
                arity(2)?;
                Kernel::Product(Box::new(Kernel::from_expr(kids[0])?), Box::new(Kernel::from_expr(kids[1])?))
            }
            "cp" => {
                arity(3)?;
                Kernel::ChangePoint {
                    location: param(kids[0])?,
                    left: Box::new(Kernel::from_expr(kids[1])?),
                    right: Box::new(Kernel::from_expr(kids[2])?),
                }
            }
            other => return Err(KernelError::UnknownTag(other.to_string())),
        })
    }

    pub fn cov(&self, x: f64, y: f64) -> f64 {
        match self {
            Kernel::Const(v) => *v,
            Kernel::WhiteNoise(v) => {
                if x == y {
                    *v
                } else {
                    0.0
                }
            }
            Kernel::Linear(v) => (x - v) * (y - v),
            Kernel::SquaredExp(v) => (-(x - y).powi(2) / v).exp(),
            Kernel::Periodic { length, period } => {
                let s = (2.0 * PI / period * (x - y).abs()).sin();
                (-2.0 / length * s * s).exp()
            }
            Kernel::Sum(a, b) => a.cov(x, y) + b.cov(x, y),
            Kernel::Product(a, b) => a.cov(x, y) * b.cov(x, y),
            Kernel::ChangePoint { location, left, right } => {
                let dx = sigmoid_switch(x, *location);
                let dy = sigmoid_switch(y, *location);
                (1.0 - dx) * (1.0 - dy) * left.cov(x, y) + dx * dy * right.cov(x, y)
            }
        }
    }

    /// `n x n` covariance of `xs` plus [`JITTER`] on the diagonal.
    pub fn cov_matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        let n = xs.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let c = self.cov(xs[i], xs[j]);
                m[(i, j)] = c;
                m[(j, i)] = c;
            }
            m[(i, i)] += JITTER;
        }
        m
    }

    /// Cross covariance between `xs` (rows) and `zs` (columns), no jitter.
    pub fn cross_cov(&self, xs: &[f64], zs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), zs.len(), |i, j| self.cov(xs[i], zs[j]))
    }
}

/// Change-point switch `0.5 (1 + tanh(10 (x - v)))`. The left kernel of a
/// `cp` applies below the location and the right kernel above it.
pub fn sigmoid_switch(x: f64, location: f64) -> f64 {
    0.5 * (1.0 + (10.0 * (x - location)).tanh())
}

/// Paired time points and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TimeSeries {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, GpError> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(GpError::BadSeries {
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        Ok(TimeSeries { xs, ys })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Split into the first `n` points and the rest.
    pub fn split_at(&self, n: usize) -> (TimeSeries, TimeSeries) {
        (
            TimeSeries {
                xs: self.xs[..n].to_vec(),
                ys: self.ys[..n].to_vec(),
            },
            TimeSeries {
                xs: self.xs[n..].to_vec(),
                ys: self.ys[n..].to_vec(),
            },
        )
    }

    pub fn concat(&self, other: &TimeSeries) -> TimeSeries {
        TimeSeries {
            xs: self.xs.iter().chain(&other.xs).copied().collect(),
            ys: self.ys.iter().chain(&other.ys).copied().collect(),
        }
    }
}

/// Affine rescaling of a series: xs min-max to `[0, 1]`, ys to zero mean and
/// unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub x_min: f64,
    pub x_span: f64,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Standardizer {
    pub fn fit(ts: &TimeSeries) -> Self {
        let x_min = ts.xs.iter().copied().fold(f64::INFINITY, f64::min);
        let x_max = ts.xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = ts.len() as f64;
        let y_mean = ts.ys.iter().sum::<f64>() / n;
        let var = ts.ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        Standardizer {
            x_min,
            x_span: if x_max > x_min { x_max - x_min } else { 1.0 },
            y_mean,
            y_sd: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }

    pub fn x(&self, x: f64) -> f64 {
        (x - self.x_min) / self.x_span
    }

    pub fn y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_sd
    }

    pub fn y_back(&self, y: f64) -> f64 {
        y * self.y_sd + self.y_mean
    }

    pub fn apply(&self, ts: &TimeSeries) -> TimeSeries {
        TimeSeries {
            xs: ts.xs.iter().map(|&x| self.x(x)).collect(),
            ys: ts.ys.iter().map(|&y| self.y(y)).collect(),
        }
    }
}

/// Multivariate normal log density of `y` with the given mean and covariance.
pub fn mvn_logpdf(mean: &DVector<f64>, cov: &DMatrix<f64>, y: &DVector<f64>) -> Option<f64> {
    let n = y.len();
    let chol = cov.clone().cholesky()?;
    let r = y - mean;
    let z = chol.l().solve_lower_triangular(&r)?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Some(-0.5 * z.dot(&z) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln())
}

/// Log marginal likelihood of the observations under a zero-mean GP.
pub fn gp_loglik(kernel: &Kernel, ts: &TimeSeries) -> Result<f64, GpError> {
    let cov = kernel.cov_matrix(&ts.xs);
    let y = DVector::from_column_slice(&ts.ys);
    mvn_logpdf(&DVector::zeros(ts.len()), &cov, &y)
        .ok_or_else(|| GpError::NotPositiveDefinite(format!("{kernel:?}")))
}

/// Upper bound on the likelihood of `n` observations:
/// `|C + 0.01 I| >= 0.01^n`, so the density is at most `(2 pi 0.01)^(-n/2)`.
pub fn log_likelihood_bound(n: usize) -> f64 {
    -0.5 * n as f64 * (2.0 * PI * JITTER).ln()
}

/// Predictive distribution of new observations at probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPredictive {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GpPredictive {
    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }

    pub fn logpdf(&self, ys: &[f64]) -> Option<f64> {
        mvn_logpdf(&self.mean, &self.cov, &DVector::from_column_slice(ys))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let root = match self.cov.clone().cholesky() {
            Some(c) => c.l(),
            None => psd_sqrt(&self.cov),
        };
        (&self.mean + root * z).iter().copied().collect()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Condition on `train` and predict observations at `probe_xs`.
pub fn gp_predict(kernel: &Kernel, train: &TimeSeries, probe_xs: &[f64]) -> Result<GpPredictive, GpError> {
    let k = kernel.cov_matrix(&train.xs);
    let chol = k
        .cholesky()
        .ok_or_else(|| GpError::NotPositiveDefinite(format!("{kernel:?}")))?;
    let k_star = kernel.cross_cov(&train.xs, probe_xs);
    let k_ss = kernel.cov_matrix(probe_xs);
    let y = DVector::from_column_slice(&train.ys);
    let alpha = chol.solve(&y);
    let mean = k_star.transpose() * alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k_star)
        .expect("cholesky factor is nonsingular");
    let mut cov = k_ss - v.transpose() * v;
    cov = (&cov + cov.transpose()) * 0.5;
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
    }
    Ok(GpPredictive { mean, cov })
}

/// Log density of held-out observations given the training data.
pub fn gp_heldout_loglik(kernel: &Kernel, train: &TimeSeries, test: &TimeSeries) -> Result<f64, GpError> {
    let pred = gp_predict(kernel, train, &test.xs)?;
    pred.logpdf(&test.ys)
        .ok_or_else(|| GpError::NotPositiveDefinite(format!("{kernel:?}")))
}

/// The GP likelihood as a synthesis target. Invalid programs score `-inf`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GpLikelihood;

impl LikelihoodModel for GpLikelihood {
    type Data = TimeSeries;

    fn log_likelihood(&self, program: &Expr, data: &TimeSeries) -> f64 {
        Kernel::from_expr(program)
            .ok()
            .and_then(|k| gp_loglik(&k, data).ok())
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn log_bound(&self, data: &TimeSeries) -> f64 {
        log_likelihood_bound(data.len())
    }
}

/// Pooled forecast of an ensemble at a set of probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub probe_xs: Vec<f64>,
    /// Per-member predictive distributions, in ensemble order.
    pub members: Vec<GpPredictive>,
    pub mean: Vec<f64>,
    /// Variance of the equally weighted mixture of member predictives.
    pub var: Vec<f64>,
}

pub fn ensemble_forecast<'a>(
    kernels: impl IntoIterator<Item = &'a Kernel>,
    train: &TimeSeries,
    probe_xs: &[f64],
) -> Result<EnsembleForecast, GpError> {
    let members = kernels
        .into_iter()
        .map(|k| gp_predict(k, train, probe_xs))
        .collect::<Result<Vec<_>, _>>()?;
    let p = probe_xs.len();
    let count = members.len().max(1) as f64;
    let mut mean = vec![0.0; p];
    let mut second = vec![0.0; p];
    for m in &members {
        for j in 0..p {
            mean[j] += m.mean[j] / count;
            second[j] += (m.cov[(j, j)] + m.mean[j].powi(2)) / count;
        }
    }
    let var = (0..p).map(|j| (second[j] - mean[j].powi(2)).max(0.0)).collect();
    Ok(EnsembleForecast {
        probe_xs: probe_xs.to_vec(),
        members,
        mean,
        var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::parse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k(text: &str) -> Kernel {
        Kernel::from_expr(&parse(text).unwrap()).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng) -> Kernel {
        let g = gp_grammar();
        Kernel::from_expr(&g.sample(g.start_symbol(), rng).unwrap()).unwrap()
    }

    fn random_series(rng: &mut ChaCha8Rng, n: usize) -> TimeSeries {
        let xs = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let ys = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        TimeSeries::new(xs, ys).unwrap()
    }

    #[test]
    fn grammar_is_valid_and_normalized() {
        let g = gp_grammar();
        assert!(g.validate().is_valid(), "{}", g.validate());
        let k = g.nonterminal("K").unwrap();
        let total: f64 = g.rules_for(k).map(|r| r.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn base_kernel_formulas() {
        assert!((k("(lin (gamma 1.2))").cov(2.0, 3.0) - 1.44).abs() < 1e-12);
        let wn = k("(wn (gamma 0.7))");
        assert_eq!(wn.cov(1.5, 1.5), 0.7);
        assert_eq!(wn.cov(1.5, 1.6), 0.0);
        assert_eq!(k("(per (gamma 2) (gamma 5))").cov(3.0, 3.0), 1.0);
        assert!((k("(se (gamma 2))").cov(0.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn arity_and_parameter_checks() {
        let bad = |t: &str| Kernel::from_expr(&parse(t).unwrap()).unwrap_err();
        assert!(matches!(bad("(per (gamma 1))"), KernelError::Arity { .. }));
        assert!(matches!(bad("(se (gamma -1))"), KernelError::BadParameter(_)));
        assert!(matches!(bad("(partition)"), KernelError::UnknownTag(_)));
    }

    #[test]
    fn sums_and_products_are_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_kernel(&mut rng);
            let b = random_kernel(&mut rng);
            let s = Kernel::Sum(Box::new(a.clone()), Box::new(b.clone()));
            let p = Kernel::Product(Box::new(a.clone()), Box::new(b.clone()));
            let (x, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            assert!((s.cov(x, y) - (a.cov(x, y) + b.cov(x, y))).abs() < 1e-12);
            assert!((p.cov(x, y) - a.cov(x, y) * b.cov(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn change_point_switches_between_kernels() {
        let cp = k("(cp (gamma 5) (lin (gamma 1)) (se (gamma 2)))");
        let left = k("(lin (gamma 1))");
        let right = k("(se (gamma 2))");
        // |10 (x - 5)| >= 20 on both sides.
        assert!((cp.cov(2.0, 2.5) - left.cov(2.0, 2.5)).abs() < 1e-6);
        assert!((cp.cov(8.0, 7.5) - right.cov(8.0, 7.5)).abs() < 1e-6);
    }

    #[test]
    fn unit_matrix_and_scalar_likelihood() {
        let c = k("(const (gamma 1))");
        let m = c.cov_matrix(&[0.3]);
        assert_eq!(m[(0, 0)], 1.01);
        let ts = TimeSeries::new(vec![0.3], vec![0.0]).unwrap();
        let ll = gp_loglik(&c, &ts).unwrap();
        let oracle = -0.5 * (2.0 * PI * 1.01).ln();
        assert!((ll - oracle).abs() < 1e-12);
        assert!((ll - -0.92391).abs() < 1e-5);
    }

    #[test]
    fn covariance_matrix_is_symmetric_and_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let kern = random_kernel(&mut rng);
            let n = rng.random_range(1..=50);
            let ts = random_series(&mut rng, n);
            let m = kern.cov_matrix(ts.xs());
            assert_eq!(m, m.transpose());
            assert!(m.clone().cholesky().is_some(), "{kern:?}");
        }
    }

    #[test]
    fn likelihood_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let kern = random_kernel(&mut rng);
            let n = rng.random_range(1..=20);
            let ts = random_series(&mut rng, n);
            let m = kern.cov_matrix(ts.xs());
            // LU rather than try_inverse: small sizes use cofactor formulas.
            let inv = m.clone().lu().try_inverse().unwrap();
            let det = m.determinant();
            let y = DVector::from_column_slice(ts.ys());
            let naive = -0.5 * (y.transpose() * &inv * &y)[(0, 0)] - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * PI).ln();
            let fast = gp_loglik(&kern, &ts).unwrap();
            if det.is_normal() && naive.is_finite() {
                assert!((fast - naive).abs() < 1e-8 * naive.abs().max(1.0), "{fast} vs {naive}");
            }
        }
    }

    #[test]
    fn corrected_bound_always_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let kern = random_kernel(&mut rng);
            let n = rng.random_range(1..=20);
            let ts = random_series(&mut rng, n);
            assert!(gp_loglik(&kern, &ts).unwrap() <= log_likelihood_bound(n) + 1e-9);
        }
    }

    #[test]
    fn ten_is_not_a_bound_beyond_one_point() {
        // Two distinct points at y = 0 under near-zero white noise: the
        // density is (2 pi (v + 0.01))^-1, above 10 once v is small.
        let ts = TimeSeries::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let ll = gp_loglik(&k("(wn (gamma 0.0001))"), &ts).unwrap();
        assert!(ll > 10f64.ln());
        assert!(ll <= log_likelihood_bound(2));
    }

    #[test]
    fn white_noise_probe_at_training_point_shrinks() {
        let v = 0.7;
        let kern = Kernel::WhiteNoise(v);
        let train = TimeSeries::new(vec![1.0, 2.0], vec![3.0, -1.0]).unwrap();
        let pred = gp_predict(&kern, &train, &[1.0]).unwrap();
        // Scalar conditioning: cov(y*, y) / var(y) * y = v / (v + 0.01) * y.
        assert!((pred.mean[0] - v / (v + JITTER) * 3.0).abs() < 1e-12);
        let var = v + JITTER - v * v / (v + JITTER);
        assert!((pred.cov[(0, 0)] - var).abs() < 1e-12);
    }

    #[test]
    fn large_constant_kernel_predicts_sample_mean() {
        let c = 1e4;
        let kern = Kernel::Const(c);
        let ys = vec![1.0, 2.5, 0.5, 3.0, 2.0, 1.5, 2.2, 0.8, 1.9, 2.6];
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let train = TimeSeries::new(xs, ys.clone()).unwrap();
        let pred = gp_predict(&kern, &train, &[20.0, -3.0]).unwrap();
        let mean = ys.iter().sum::<f64>() / 10.0;
        // Analytic posterior of a shared constant: n c / (n c + 0.01) * ybar.
        let oracle = 10.0 * c / (10.0 * c + JITTER) * mean;
        for j in 0..2 {
            assert!((pred.mean[j] - mean).abs() < 0.01 * mean);
            assert!((pred.mean[j] - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn far_probe_reverts_to_prior_variance() {
        let kern = k("(se (gamma 0.5))");
        let train = TimeSeries::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.0, -1.0]).unwrap();
        let pred = gp_predict(&kern, &train, &[100.0]).unwrap();
        assert!((pred.cov[(0, 0)] - (1.0 + JITTER)).abs() < 1e-9);
        assert!(pred.mean[0].abs() < 1e-9);
    }

    #[test]
    fn chain_rule_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let kern = random_kernel(&mut rng);
            let n = rng.random_range(2..=20);
            let all = random_series(&mut rng, n);
            let cut = rng.random_range(1..n);
            let (train, test) = all.split_at(cut);
            let joint = gp_loglik(&kern, &all).unwrap();
            let parts = gp_loglik(&kern, &train).unwrap() + gp_heldout_loglik(&kern, &train, &test).unwrap();
            assert!((joint - parts).abs() < 1e-6 * joint.abs().max(1.0), "{joint} vs {parts} for {kern:?}");
        }
    }

    #[test]
    fn predictive_covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let kern = random_kernel(&mut rng);
            let train = random_series(&mut rng, 10);
            let probes: Vec<f64> = (0..6).map(|i| i as f64 * 1.3).collect();
            let pred = gp_predict(&kern, &train, &probes).unwrap();
            assert!((&pred.cov - pred.cov.transpose()).amax() < 1e-9);
            assert!(pred.variances().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn standardizer_inverts() {
        let ts = TimeSeries::new(vec![10.0, 20.0, 30.0], vec![5.0, 7.0, 12.0]).unwrap();
        let s = Standardizer::fit(&ts);
        let z = s.apply(&ts);
        assert_eq!(z.xs(), &[0.0, 0.5, 1.0]);
        assert!(z.ys().iter().sum::<f64>().abs() < 1e-12);
        assert!((s.y_back(z.ys()[2]) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn series_validation() {
        assert!(TimeSeries::new(vec![], vec![]).is_err());
        assert!(TimeSeries::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(matches!(TimeSeries::new(vec![f64::NAN], vec![1.0]), Err(GpError::NonFinite)));
    }
}
