//! Quadratic empirical risk
//! `F_S(w) = (1/n) sum_i 0.5 (x_i^T w - y_i)^2 = 0.5 w^T A w + b^T w + c`
//! with an optional ridge term `0.5 * ridge * |w|^2`.
//!
//! `A = (1/n) sum_i x_i x_i^T` is never formed above [`EXPLICIT_DIM_THRESHOLD`];
//! products go through the samples instead.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Largest dimension for which `A` is materialized and diagonalized exactly.
pub const EXPLICIT_DIM_THRESHOLD: usize = 2048;

#[derive(Debug)]
pub struct QuadraticProblem {
    data: Arc<Dataset>,
    ridge: f64,
    b: Vec<f64>,
    c: f64,
    gram: OnceLock<DMatrix<f64>>,
}

impl Clone for QuadraticProblem {
    fn clone(&self) -> Self {
        QuadraticProblem {
            data: Arc::clone(&self.data),
            ridge: self.ridge,
            b: self.b.clone(),
            c: self.c,
            gram: self.gram.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMethod {
    PowerIteration,
    ExplicitEigen,
    Declared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstants {
    /// Smoothness: largest eigenvalue of `A + ridge I`.
    pub mu: f64,
    /// Strong convexity: smallest eigenvalue of `A + ridge I` (0 if unknown).
    pub lambda: f64,
    pub method: SpectralMethod,
    pub iterations: usize,
    pub tolerance: f64,
    /// Full spectrum of `A + ridge I`, descending; only for the explicit method.
    pub spectrum: Option<Vec<f64>>,
}

impl SpectralConstants {
    pub fn declared(mu: f64, lambda: f64) -> Result<Self> {
        if !(mu > 0.0 && lambda >= 0.0 && lambda <= mu) {
            return Err(Error::InvalidArgument(format!(
                "declared constants need 0 <= lambda <= mu, mu > 0 (got mu={mu}, lambda={lambda})"
            )));
        }
        Ok(SpectralConstants {
            mu,
            lambda,
            method: SpectralMethod::Declared,
            iterations: 0,
            tolerance: 0.0,
            spectrum: None,
        })
    }
}

pub fn build_problem(data: Arc<Dataset>, ridge: f64) -> Result<QuadraticProblem> {
    QuadraticProblem::new(data, ridge)
}

impl QuadraticProblem {
    pub fn new(data: Arc<Dataset>, ridge: f64) -> Result<Self> {
        if data.n() == 0 {
            return Err(Error::EmptyInput);
        }
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let n = data.n() as f64;
        let mut b = vec![0.0; data.dim()];
        let mut c = 0.0;
        for s in data.samples() {
            s.features.axpy(-s.label / n, &mut b);
            c += s.label * s.label;
        }
        c /= 2.0 * n;
        Ok(QuadraticProblem { data, ridge, b, c, gram: OnceLock::new() })
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `|b|`, the realized value used for `r`.
    pub fn b_norm(&self) -> f64 {
        norm(&self.b)
    }

    pub fn is_explicit(&self) -> bool {
        self.dim() <= EXPLICIT_DIM_THRESHOLD
    }

    /// Dense `A` (without ridge), built on first use; `None` above the threshold.
    pub fn gram(&self) -> Option<&DMatrix<f64>> {
        if !self.is_explicit() {
            return None;
        }
        Some(self.gram.get_or_init(|| {
            let d = self.dim();
            let n = self.n() as f64;
            let mut a = DMatrix::zeros(d, d);
            for s in self.data.samples() {
                for (i, xi) in s.features.iter() {
                    for (j, xj) in s.features.iter() {
                        a[(i, j)] += xi * xj;
                    }
                }
            }
            a /= n;
            a
        }))
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: w.len() });
        }
        Ok(())
    }

    /// `(A + ridge I) v`
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        let mut out = vec![0.0; self.dim()];
        if let Some(a) = self.gram() {
            for (r, o) in out.iter_mut().enumerate() {
                *o = a.row(r).iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            }
        } else {
            let n = self.n() as f64;
            for s in self.data.samples() {
                s.features.axpy(s.features.dot(v) / n, &mut out);
            }
        }
        axpy(self.ridge, v, &mut out);
        Ok(out)
    }

    /// `v^T (A + ridge I) v`, accumulated through the samples so it stays >= 0.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        self.check_dim(v)?;
        let n = self.n() as f64;
        let mut acc = 0.0;
        for s in self.data.samples() {
            let p = s.features.dot(v);
            acc += p * p;
        }
        Ok(acc / n + self.ridge * dot(v, v))
    }

    /// `0.5 (x_i^T w - y_i)^2`; the ridge term is not part of the per-sample loss.
    pub fn sample_loss(&self, w: &[f64], i: usize) -> Result<f64> {
        self.check_dim(w)?;
        Ok(self.data.sample(i)?.loss(w))
    }

    /// `x_i (x_i^T w - y_i) + ridge w`
    pub fn sample_gradient(&self, w: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let s = self.data.sample(i)?;
        let mut g = vec![0.0; self.dim()];
        s.features.axpy(s.features.dot(w) - s.label, &mut g);
        axpy(self.ridge, w, &mut g);
        Ok(g)
    }

    /// Adds `scale * x_i (x_i^T w - y_i)` to `out` (no ridge, no checks).
    #[inline]
    pub(crate) fn accumulate_data_gradient(&self, w: &[f64], i: usize, scale: f64, out: &mut [f64]) {
        let s = &self.data.samples()[i];
        s.features.axpy(scale * (s.features.dot(w) - s.label), out);
    }

    /// `0.5 w^T (A + ridge I) w + b^T w + c`, in one pass over the samples.
    pub fn full_loss(&self, w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        let data_loss: f64 = self.data.samples().iter().map(|s| s.loss(w)).sum::<f64>() / self.n() as f64;
        Ok(data_loss + 0.5 * self.ridge * dot(w, w))
    }

    /// Mean data loss without ridge (the loss used for generalization gaps).
    pub fn data_loss(&self, w: &[f64]) -> Result<f64> {
        self.data.mean_loss(w)
    }

    /// `(A + ridge I) w + b`, in one pass over the samples.
    pub fn full_gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut g = vec![0.0; self.dim()];
        self.full_gradient_into(w, &mut g);
        Ok(g)
    }

    pub(crate) fn full_gradient_into(&self, w: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        let inv_n = 1.0 / self.n() as f64;
        for i in 0..self.n() {
            self.accumulate_data_gradient(w, i, inv_n, g);
        }
        axpy(self.ridge, w, g);
    }

    /// Smoothness / strong-convexity constants of `A + ridge I`.
    ///
    /// Exact symmetric eigendecomposition when `d <= EXPLICIT_DIM_THRESHOLD`
    /// (the spectrum is kept); power iteration otherwise, with the smallest
    /// eigenvalue taken as `ridge` when `n < d` and from a shifted power
    /// iteration on `mu I - A` when `n >= d`.
    pub fn estimate_spectral(&self, tol: f64, max_iter: usize, seed: u64) -> Result<SpectralConstants> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {tol}")));
        }
        if let Some(a) = self.gram() {
            let d = self.dim();
            let m = a + DMatrix::identity(d, d) * self.ridge;
            let eig = SymmetricEigen::new(m);
            let mut spectrum: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
            spectrum.sort_by(|x, y| y.total_cmp(x));
            let mu = spectrum[0];
            let lambda = spectrum[d - 1].max(self.ridge).min(mu);
            return Ok(SpectralConstants {
                mu,
                lambda,
                method: SpectralMethod::ExplicitEigen,
                iterations: 0,
                tolerance: 0.0,
                spectrum: Some(spectrum),
            });
        }

        let (mu, it_mu) = power_iteration(|v| self.apply(v).expect("dimension checked"), self.dim(), tol, max_iter, seed)?;
        let (lambda, it_lambda) = if self.n() < self.dim() {
            (self.ridge, 0)
        } else {
            let (top, it) = power_iteration(
                |v| {
                    let av = self.apply(v).expect("dimension checked");
                    v.iter().zip(av).map(|(x, ax)| mu * x - ax).collect()
                },
                self.dim(),
                tol,
                max_iter,
                seed.wrapping_add(1),
            )?;
            ((mu - top).clamp(self.ridge, mu), it)
        };
        Ok(SpectralConstants {
            mu,
            lambda,
            method: SpectralMethod::PowerIteration,
            iterations: it_mu + it_lambda,
            tolerance: tol,
            spectrum: None,
        })
    }
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration on the
/// Rayleigh quotient, stopping when its relative change drops below `tol`.
pub fn power_iteration(
    mut op: impl FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut est = 0.0;
    for it in 1..=max_iter {
        let u = op(&v);
        let rayleigh = dot(&v, &u);
        let nu = norm(&u);
        if nu == 0.0 {
            return Ok((0.0, it));
        }
        v = u.into_iter().map(|x| x / nu).collect();
        if it > 1 && (rayleigh - est).abs() <= tol * rayleigh.abs().max(f64::MIN_POSITIVE) {
            return Ok((rayleigh, it));
        }
        est = rayleigh;
    }
    Err(Error::NonConvergence { iterations: max_iter, last_estimate: est })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if alpha != 0.0 {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_libsvm, synth_quadratic, SpectrumSpec};

    fn tiny() -> Arc<Dataset> {
        // x=2,y=1 and x=0,y=3 (the zero feature is stored explicitly)
        Arc::new(parse_libsvm("1 1:2\n3 1:0\n".as_bytes(), None).unwrap())
    }

    #[test]
    fn tiny_problem_constants() {
        let p = build_problem(tiny(), 0.0).unwrap();
        assert_eq!(p.gram().unwrap()[(0, 0)], 2.0);
        assert_eq!(p.b(), &[-1.0]);
        assert_eq!(p.c(), 2.5);
        let pr = build_problem(tiny(), 0.1).unwrap();
        assert!((pr.apply(&[1.0]).unwrap()[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::new("e", 1, vec![]).unwrap();
        assert!(matches!(build_problem(Arc::new(ds), 0.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn sample_loss_and_gradient() {
        let p = build_problem(tiny(), 0.0).unwrap();
        assert_eq!(p.sample_loss(&[1.0], 0).unwrap(), 0.5);
        assert_eq!(p.sample_loss(&[0.0], 1).unwrap(), 4.5);
        assert_eq!(p.sample_gradient(&[1.0], 0).unwrap(), vec![2.0]);
        assert_eq!(p.sample_gradient(&[0.0], 0).unwrap(), vec![-2.0]);
        assert!(matches!(p.sample_loss(&[1.0], 2), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(p.sample_gradient(&[1.0], 5), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn full_loss_and_gradient_tiny() {
        let p = build_problem(tiny(), 0.0).unwrap();
        assert_eq!(p.full_loss(&[0.0]).unwrap(), p.c());
        assert_eq!(p.full_gradient(&[0.0]).unwrap(), p.b().to_vec());
        assert!((p.full_loss(&[1.0]).unwrap() - 2.5).abs() < 1e-15);
        assert!((p.full_gradient(&[1.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(p.full_loss(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_sample_gradient_is_full_gradient() {
        let ds = synth_quadratic(6, 40, &SpectrumSpec::Uniform { min: 0.1, max: 2.0 }, 0.5, 4).unwrap();
        let p = build_problem(Arc::new(ds), 0.3).unwrap();
        let w: Vec<f64> = (0..6).map(|k| (k as f64 * 0.7).sin()).collect();
        let mut mean = vec![0.0; 6];
        for i in 0..p.n() {
            axpy(1.0 / p.n() as f64, &p.sample_gradient(&w, i).unwrap(), &mut mean);
        }
        let full = p.full_gradient(&w).unwrap();
        for (a, b) in mean.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let ds = synth_quadratic(5, 30, &SpectrumSpec::Uniform { min: 0.2, max: 1.5 }, 0.3, 8).unwrap();
        let p = build_problem(Arc::new(ds), 0.05).unwrap();
        let w: Vec<f64> = (0..5).map(|k| 0.3 * k as f64 - 0.5).collect();
        let g = p.full_gradient(&w).unwrap();
        let eps = 1e-5;
        for j in 0..5 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += eps;
            wm[j] -= eps;
            let fd = (p.full_loss(&wp).unwrap() - p.full_loss(&wm).unwrap()) / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-6, "component {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn closed_form_matches_operator() {
        let ds = synth_quadratic(7, 25, &SpectrumSpec::Geometric { max: 3.0, ratio: 0.6 }, 0.2, 2).unwrap();
        let p = build_problem(Arc::new(ds), 0.2).unwrap();
        let w: Vec<f64> = (0..7).map(|k| (k as f64).cos()).collect();
        let aw = p.apply(&w).unwrap();
        let closed = 0.5 * dot(&w, &aw) + dot(p.b(), &w) + p.c();
        let direct = p.full_loss(&w).unwrap();
        assert!((closed - direct).abs() < 1e-10 * direct.abs().max(1.0));
        assert!((p.quad_form(&w).unwrap() - dot(&w, &aw)).abs() < 1e-10);
    }

    #[test]
    fn spectral_one_dimensional() {
        let p = build_problem(tiny(), 0.0).unwrap();
        let sc = p.estimate_spectral(1e-10, 1000, 0).unwrap();
        assert_eq!(sc.method, SpectralMethod::ExplicitEigen);
        assert!((sc.mu - 2.0).abs() < 1e-12);
        assert!((sc.lambda - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_concentrates_on_declared_spectrum() {
        let ds = synth_quadratic(3, 20_000, &SpectrumSpec::Explicit { values: vec![1.0, 0.5, 0.1] }, 0.0, 3).unwrap();
        let p = build_problem(Arc::new(ds), 0.0).unwrap();
        let sc = p.estimate_spectral(1e-10, 1000, 0).unwrap();
        assert!((sc.mu - 1.0).abs() < 0.1, "mu = {}", sc.mu);
        let spec = sc.spectrum.unwrap();
        assert_eq!(spec.len(), 3);
        assert!((spec[2] - 0.1).abs() < 0.02);
    }

    #[test]
    fn ridge_floors_rank_deficient_spectrum() {
        let ds = synth_quadratic(8, 4, &SpectrumSpec::Uniform { min: 0.5, max: 1.0 }, 0.1, 1).unwrap();
        let p = build_problem(Arc::new(ds), 0.3).unwrap();
        let sc = p.estimate_spectral(1e-10, 1000, 0).unwrap();
        assert!((sc.lambda - 0.3).abs() < 1e-10, "lambda = {}", sc.lambda);
    }

    #[test]
    fn power_iteration_agrees_with_eigen() {
        let ds = synth_quadratic(6, 200, &SpectrumSpec::Geometric { max: 2.0, ratio: 0.3 }, 0.0, 9).unwrap();
        let p = build_problem(Arc::new(ds), 0.1).unwrap();
        let exact = p.estimate_spectral(1e-12, 10, 0).unwrap();
        let (mu, _) = power_iteration(|v| p.apply(v).unwrap(), 6, 1e-12, 10_000, 1).unwrap();
        assert!((mu - exact.mu).abs() < 1e-6 * exact.mu);
    }

    #[test]
    fn power_iteration_non_convergence_reports_estimate() {
        // two nearly equal top eigenvalues converge slowly
        let op = |v: &[f64]| vec![v[0], 0.999_999 * v[1]];
        match power_iteration(op, 2, 1e-16, 3, 0) {
            Err(Error::NonConvergence { iterations, last_estimate }) => {
                assert_eq!(iterations, 3);
                assert!(last_estimate > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
