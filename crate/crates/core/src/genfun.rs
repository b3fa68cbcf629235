//! Coefficients of `pi(x) = (I - I x + eta A x^{tau+1})^{-1}`.
//!
//! `A` is symmetric, so `pi` diagonalizes with it and each eigenvalue `a_j`
//! contributes the scalar series `c_j` with `c_j[t] = 1` for `t <= tau` and
//! `c_j[t] = c_j[t-1] - eta a_j c_j[t-tau-1]` afterwards. Operator norms are
//! maxima over channels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack for the coefficient inequalities.
pub const LEMMA_TOL: f64 = 1e-9;

/// `(tau + 1) ln(2 (tau + 1))`.
pub fn t0(tau: usize) -> f64 {
    let k = (tau + 1) as f64;
    k * (2.0 * k).ln()
}

/// `ceil(t0)`, the index where the decay phase starts.
pub fn t0_index(tau: usize) -> usize {
    t0(tau).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffTable {
    pub eta: f64,
    pub tau: usize,
    pub eigenvalues: Vec<f64>,
    /// Per-channel coefficients `c_j[0..=T]`; empty when built by [`pi_norms`].
    pub coeffs: Vec<Vec<f64>>,
    /// `max_j |c_j[t]|`
    pub norms: Vec<f64>,
    /// `max_j sqrt(a_j) |c_j[t]|`
    pub weighted_norms: Vec<f64>,
    /// `norm_prefix[k] = sum_{i<k} norms[i]`, length `T + 2`.
    pub norm_prefix: Vec<f64>,
    pub weighted_prefix: Vec<f64>,
    /// The spectrum is known to be partial, so norms are lower bounds.
    pub partial_spectrum: bool,
}

impl CoeffTable {
    /// Largest `t` in the table.
    pub fn horizon(&self) -> usize {
        self.norms.len() - 1
    }

    pub fn t0(&self) -> f64 {
        t0(self.tau)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn validate(spectrum: &[f64], eta: f64, horizon: usize) -> Result<()> {
    if spectrum.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    if let Some(a) = spectrum.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("eigenvalue {a} is not a finite nonnegative number")));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    Ok(())
}

/// Scalar coefficient series of `1 / (1 - x + alpha x^{tau+1})`, `t = 0..=horizon`.
pub fn channel_coeffs(alpha: f64, tau: usize, horizon: usize) -> Vec<f64> {
    let mut c = vec![1.0; horizon + 1];
    for t in tau + 1..=horizon {
        c[t] = c[t - 1] - alpha * c[t - tau - 1];
    }
    c
}

/// Full table, keeping every channel.
pub fn pi_coeffs(spectrum: &[f64], eta: f64, tau: usize, horizon: usize) -> Result<CoeffTable> {
    build(spectrum, eta, tau, horizon, true)
}

/// Same as [`pi_coeffs`] but drops the per-channel series after folding them
/// into the norm sequences.
pub fn pi_norms(spectrum: &[f64], eta: f64, tau: usize, horizon: usize) -> Result<CoeffTable> {
    build(spectrum, eta, tau, horizon, false)
}

fn build(spectrum: &[f64], eta: f64, tau: usize, horizon: usize, keep: bool) -> Result<CoeffTable> {
    validate(spectrum, eta, horizon)?;
    let channels: Vec<Vec<f64>> =
        spectrum.par_iter().map(|&a| channel_coeffs(eta * a, tau, horizon)).collect();

    // max is exact and order-free, so the fold is deterministic
    let mut norms = vec![0.0f64; horizon + 1];
    let mut weighted = vec![0.0f64; horizon + 1];
    for (c, &a) in channels.iter().zip(spectrum) {
        let s = a.sqrt();
        for t in 0..=horizon {
            let v = c[t].abs();
            norms[t] = norms[t].max(v);
            weighted[t] = weighted[t].max(s * v);
        }
    }

    Ok(CoeffTable {
        eta,
        tau,
        eigenvalues: spectrum.to_vec(),
        coeffs: if keep { channels } else { Vec::new() },
        norm_prefix: prefix(&norms),
        weighted_prefix: prefix(&weighted),
        norms,
        weighted_norms: weighted,
        partial_spectrum: false,
    })
}

fn prefix(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for x in v {
        acc += x;
        out.push(acc);
    }
    out
}

/// `(S1, S2)`: sums of `norms[i]` and `weighted_norms[i]` over `i = 0..=t-tau-1`.
pub fn weighted_partial_sums(table: &CoeffTable, t: usize) -> Result<(f64, f64)> {
    if t <= table.tau {
        return Err(Error::InvalidArgument(format!("t = {t} must exceed tau = {}", table.tau)));
    }
    if t > table.horizon() {
        return Err(Error::InvalidArgument(format!("t = {t} beyond table horizon {}", table.horizon())));
    }
    let k = t - table.tau;
    Ok((table.norm_prefix[k], table.weighted_prefix[k]))
}

/// Cauchy product of `c` with `kappa = (1, -1, 0, ..., 0, alpha)` (the last entry
/// at position `tau + 1`), truncated to `c.len()`.
pub fn convolve_with_kappa(c: &[f64], alpha: f64, tau: usize) -> Vec<f64> {
    let mut kappa = vec![0.0; tau + 2];
    kappa[0] = 1.0;
    kappa[1] -= 1.0;
    kappa[tau + 1] += alpha;
    (0..c.len())
        .map(|t| {
            kappa.iter().enumerate().take(t + 1).map(|(k, &kv)| kv * c[t - k]).sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub checked: usize,
    /// Indices `t` where the inequality failed (first 32).
    pub failed_at: Vec<usize>,
    pub failures: usize,
    /// `min_t (bound - value)`; negative means violated.
    pub worst_margin: f64,
    pub worst_t: Option<usize>,
}

impl CheckOutcome {
    fn not_applicable(name: &str) -> Self {
        CheckOutcome {
            name: name.into(),
            status: CheckStatus::NotApplicable,
            checked: 0,
            failed_at: Vec::new(),
            failures: 0,
            worst_margin: f64::INFINITY,
            worst_t: None,
        }
    }

    fn run(name: &str, ts: impl Iterator<Item = usize>, mut margin: impl FnMut(usize) -> f64) -> Self {
        let mut out = CheckOutcome::not_applicable(name);
        for t in ts {
            let m = margin(t);
            out.checked += 1;
            if m < out.worst_margin || out.worst_t.is_none() {
                out.worst_margin = m;
                out.worst_t = Some(t);
            }
            if !(m >= -LEMMA_TOL) {
                out.failures += 1;
                if out.failed_at.len() < 32 {
                    out.failed_at.push(t);
                }
            }
        }
        out.status = if out.failures == 0 { CheckStatus::Pass } else { CheckStatus::Fail };
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub eta: f64,
    pub tau: usize,
    pub mu: f64,
    pub t0: f64,
    pub horizon: usize,
    /// `norms[t] <= 1` for all `t` when `eta <= 1/(mu tau)`, `tau >= 1`.
    pub uniform: CheckOutcome,
    /// `norms[t] <= 1` for `t < ceil(t0)` when `eta <= 1/(20 mu (tau+1))`.
    pub early: CheckOutcome,
    /// `norms[t] <= 3 max_j (1 - eta a_j)^{t+1}` for `t >= ceil(t0)`, same regime.
    pub decay: CheckOutcome,
}

impl VerificationReport {
    pub fn checks(&self) -> [&CheckOutcome; 3] {
        [&self.uniform, &self.early, &self.decay]
    }

    /// Overall status: `Fail` if any applicable check failed, `NotApplicable`
    /// if none applied.
    pub fn status(&self) -> CheckStatus {
        let checks = self.checks();
        if checks.iter().any(|c| c.status == CheckStatus::Fail) {
            CheckStatus::Fail
        } else if checks.iter().all(|c| c.status == CheckStatus::NotApplicable) {
            CheckStatus::NotApplicable
        } else {
            CheckStatus::Pass
        }
    }

    pub fn passed(&self) -> bool {
        self.status() != CheckStatus::Fail
    }
}

/// Is `eta` inside `(0, 1/(20 mu (tau+1))]`?
pub fn in_decay_regime(eta: f64, mu: f64, tau: usize) -> bool {
    eta > 0.0 && eta * 20.0 * mu * (tau + 1) as f64 <= 1.0 * (1.0 + 1e-12)
}

/// Checks the coefficient bounds on every `t` in the table.
pub fn verify_lemma2(table: &CoeffTable, mu: f64) -> Result<VerificationReport> {
    let a_max = table.max_eigenvalue();
    if !(mu >= a_max) {
        return Err(Error::InvalidArgument(format!("mu = {mu} is below the largest eigenvalue {a_max}")));
    }
    let (eta, tau) = (table.eta, table.tau);
    let horizon = table.horizon();
    let k0 = t0_index(tau);

    let uniform = if tau >= 1 && eta * mu * tau as f64 <= 1.0 * (1.0 + 1e-12) {
        CheckOutcome::run("uniform", 0..=horizon, |t| 1.0 - table.norms[t])
    } else {
        CheckOutcome::not_applicable("uniform")
    };

    let (early, decay) = if in_decay_regime(eta, mu, tau) {
        // max_j (1 - eta a_j)^{t+1} is attained at the smallest eigenvalue
        let q = 1.0 - eta * table.min_eigenvalue();
        let early = CheckOutcome::run("early", 0..k0.min(horizon + 1), |t| 1.0 - table.norms[t]);
        let decay = CheckOutcome::run("decay", k0..=horizon, |t| {
            3.0 * q.powf((t + 1) as f64) - table.norms[t]
        });
        (early, decay)
    } else {
        (CheckOutcome::not_applicable("early"), CheckOutcome::not_applicable("decay"))
    };

    Ok(VerificationReport { eta, tau, mu, t0: t0(tau), horizon, uniform, early, decay })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_delay_is_geometric() {
        let tab = pi_coeffs(&[1.0], 0.1, 0, 10).unwrap();
        assert!((tab.coeffs[0][2] - 0.81).abs() < 1e-15);
        for t in 0..=10 {
            assert!((tab.coeffs[0][t] - 0.9f64.powi(t as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn delay_one_by_hand() {
        let tab = pi_coeffs(&[1.0], 0.1, 1, 4).unwrap();
        let want = [1.0, 1.0, 0.9, 0.8, 0.71];
        for (c, w) in tab.coeffs[0].iter().zip(want) {
            assert!((c - w).abs() < 1e-15);
        }
    }

    #[test]
    fn prefix_is_all_ones() {
        let tab = pi_coeffs(&[0.3, 2.0, 0.0], 0.05, 7, 30).unwrap();
        for c in &tab.coeffs {
            assert!(c[..=7].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn partial_sums_by_hand() {
        let tab = pi_coeffs(&[1.0], 0.1, 0, 5).unwrap();
        let (s1, s2) = weighted_partial_sums(&tab, 3).unwrap();
        assert!((s1 - 2.71).abs() < 1e-14);
        assert!((s2 - 2.71).abs() < 1e-14);
        assert!(weighted_partial_sums(&tab, 0).is_err());
        assert!(weighted_partial_sums(&tab, 6).is_err());
        let tab = pi_coeffs(&[1.0], 0.1, 2, 5).unwrap();
        assert!(weighted_partial_sums(&tab, 2).is_err());
    }

    #[test]
    fn t0_values() {
        assert!((t0(3) - 4.0 * 8f64.ln()).abs() < 1e-12);
        assert!((t0(3) - 8.317766166719343).abs() < 1e-12);
        assert!((t0(0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t0_index(0), 1);
        assert_eq!(t0_index(3), 9);
    }

    #[test]
    fn kappa_inverts_coefficients() {
        let spec = [0.0, 0.25, 1.0, 3.5];
        let (eta, tau) = (0.011, 4);
        let tab = pi_coeffs(&spec, eta, tau, 200).unwrap();
        for (c, a) in tab.coeffs.iter().zip(spec) {
            let prod = convolve_with_kappa(c, eta * a, tau);
            assert!((prod[0] - 1.0).abs() < 1e-12);
            assert!(prod[1..].iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn kappa_zero_delay_merges_terms() {
        // tau = 0: kappa = (1, alpha - 1)
        let c = channel_coeffs(0.3, 0, 20);
        let prod = convolve_with_kappa(&c, 0.3, 0);
        assert!(prod[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn norms_only_matches_full_table() {
        let spec = [0.1, 0.9, 0.5];
        let a = pi_coeffs(&spec, 0.02, 3, 100).unwrap();
        let b = pi_norms(&spec, 0.02, 3, 100).unwrap();
        assert_eq!(a.norms, b.norms);
        assert_eq!(a.weighted_prefix, b.weighted_prefix);
        assert!(b.coeffs.is_empty());
    }

    #[test]
    fn verify_no_delay_example() {
        let tab = pi_coeffs(&[1.0], 0.04, 0, 500).unwrap();
        let rep = verify_lemma2(&tab, 1.0).unwrap();
        assert_eq!(rep.uniform.status, CheckStatus::NotApplicable);
        assert_eq!(rep.early.status, CheckStatus::Pass);
        assert_eq!(rep.decay.status, CheckStatus::Pass);
        assert_eq!(rep.status(), CheckStatus::Pass);
    }

    #[test]
    fn verify_out_of_regime_is_not_a_failure() {
        let tab = pi_coeffs(&[1.0, 0.5], 1.0, 2, 200).unwrap();
        let rep = verify_lemma2(&tab, 1.0).unwrap();
        assert_eq!(rep.status(), CheckStatus::NotApplicable);
        assert!(rep.passed());
    }

    #[test]
    fn verify_uniform_regime_only() {
        // eta mu tau = 1 exactly: uniform bound applies, the decay regime does not
        let tab = pi_coeffs(&[1.0, 0.2], 1.0 / 3.0, 3, 400).unwrap();
        let rep = verify_lemma2(&tab, 1.0).unwrap();
        assert_eq!(rep.uniform.status, CheckStatus::Pass);
        assert_eq!(rep.early.status, CheckStatus::NotApplicable);
        assert_eq!(rep.decay.status, CheckStatus::NotApplicable);
    }

    #[test]
    fn verify_detects_tampered_norms() {
        let mut tab = pi_coeffs(&[1.0], 0.01, 1, 300).unwrap();
        tab.norms[1] = 1.5;
        tab.norms[250] = 0.9;
        let rep = verify_lemma2(&tab, 1.0).unwrap();
        assert_eq!(rep.uniform.status, CheckStatus::Fail);
        assert_eq!(rep.early.failed_at, vec![1]);
        assert_eq!(rep.decay.failed_at, vec![250]);
        assert!((rep.early.worst_margin + 0.5).abs() < 1e-15);
        assert_eq!(rep.status(), CheckStatus::Fail);
    }

    #[test]
    fn verify_rejects_small_mu() {
        let tab = pi_coeffs(&[2.0], 0.01, 0, 10).unwrap();
        assert!(verify_lemma2(&tab, 1.0).is_err());
    }

    #[test]
    fn invalid_inputs() {
        assert!(pi_coeffs(&[], 0.1, 0, 10).is_err());
        assert!(pi_coeffs(&[1.0], 0.0, 0, 10).is_err());
        assert!(pi_coeffs(&[-1.0], 0.1, 0, 10).is_err());
        assert!(pi_coeffs(&[1.0], 0.1, 0, 0).is_err());
    }
}
