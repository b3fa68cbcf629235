//! Closed-form stability and generalization bounds for delayed SGD on quadratics.
//!
//! All functions are pure. Regime violations never abort; they add a flag to
//! the report and the bound is evaluated anyway.

use std::collections::BTreeMap;
use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfun::{in_decay_regime, t0};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Declared,
    Empirical,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    /// `T`
    pub iters: usize,
    /// Fixed delay, or the bound `tau_bar` for random delays.
    pub tau: usize,
    pub eta: f64,
    pub mu: f64,
    /// 0 when merely convex.
    pub lambda: f64,
    pub r: f64,
    pub sigma: f64,
    pub rho: Option<f64>,
    pub w0_norm: f64,
    /// Where each constant came from, keyed by field name.
    #[serde(default)]
    pub sources: BTreeMap<String, InputSource>,
}

impl BoundInputs {
    pub fn t0(&self) -> f64 {
        t0(self.tau)
    }

    pub fn with_source(mut self, field: &str, source: InputSource) -> Self {
        self.sources.insert(field.to_string(), source);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        let positive = [("eta", self.eta), ("mu", self.mu)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        let nonneg = [("lambda", self.lambda), ("r", self.r), ("sigma", self.sigma), ("w0_norm", self.w0_norm)];
        for (name, v) in nonneg.into_iter().chain(self.rho.map(|r| ("rho", r))) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn regime_flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if !in_decay_regime(self.eta, self.mu, self.tau) {
            flags.push("out_of_regime".to_string());
        }
        if (self.iters as f64) < self.t0() {
            flags.push("t_below_t0".to_string());
        }
        flags
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: String,
    pub inputs: BoundInputs,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub flags: Vec<String>,
}

impl BoundReport {
    fn new(bound: &str, inputs: &BoundInputs, terms: &[(&str, f64)], mut flags: Vec<String>) -> Self {
        flags.sort();
        flags.dedup();
        BoundReport {
            bound: bound.to_string(),
            inputs: inputs.clone(),
            terms: terms.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            // summed in the listed order
            total: terms.iter().map(|(_, v)| v).sum(),
            flags,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Stability bound from the partial sums `s1`, `s2` and the weighted norm at `t`.
pub fn prop1_bound(inputs: &BoundInputs, s1: f64, s2: f64, weighted_at_t: f64) -> Result<BoundReport> {
    prop1_with_noise(inputs, inputs.sigma, s1, s2, weighted_at_t, "prop1")
}

/// The random-delay version of [`prop1_bound`]: `sigma` becomes `sigma + rho`.
pub fn prop1_random_bound(inputs: &BoundInputs, s1: f64, s2: f64, weighted_at_t: f64) -> Result<BoundReport> {
    let rho = inputs.rho.ok_or(Error::MissingRho)?;
    prop1_with_noise(inputs, inputs.sigma + rho, s1, s2, weighted_at_t, "prop1_random")
}

fn prop1_with_noise(
    inputs: &BoundInputs,
    noise: f64,
    s1: f64,
    s2: f64,
    weighted_at_t: f64,
    name: &str,
) -> Result<BoundReport> {
    inputs.validate()?;
    for (k, v) in [("S1", s1), ("S2", s2), ("weighted norm", weighted_at_t)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{k} must be finite and >= 0, got {v}")));
        }
    }
    let BoundInputs { n, eta, r, w0_norm, .. } = *inputs;
    let n = n as f64;
    let terms = [
        ("noise_drift", 2.0 * eta * r * noise / n * s1),
        ("init", 2.0 * eta * noise * w0_norm / n * weighted_at_t * s2),
        ("accumulated", 2.0 * eta * eta * noise * (r + noise) / n * s2 * s2),
    ];
    let mut flags = inputs.regime_flags();
    flags.retain(|f| f != "t_below_t0");
    Ok(BoundReport::new(name, inputs, &terms, flags))
}

/// Convex-case generalization bound after `T` iterations.
pub fn thm1_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    convex_bound(inputs, inputs.sigma * (inputs.r + inputs.sigma), "thm1")
}

fn convex_bound(inputs: &BoundInputs, product: f64, name: &str) -> Result<BoundReport> {
    inputs.validate()?;
    if inputs.iters < inputs.tau {
        return Err(Error::InvalidArgument(format!("T = {} is below tau = {}", inputs.iters, inputs.tau)));
    }
    let BoundInputs { n, iters, tau, mu, w0_norm, .. } = *inputs;
    let (n, span, tauf) = (n as f64, (iters - tau) as f64, tau as f64);
    let scale = product / (n * mu);
    let log = (tauf + 1.0).ln();
    let mut terms = vec![
        ("sqrt_horizon", scale * span.sqrt()),
        ("init", scale * 12.0 * mu * w0_norm),
        ("log_delay", scale * log * log),
    ];
    let mut flags = inputs.regime_flags();
    if tau == 0 {
        flags.push("tau_zero_delay_ratio_omitted".to_string());
    } else {
        terms.push(("delay_ratio", product / (n * mu * tauf) * span));
    }
    Ok(BoundReport::new(name, inputs, &terms, flags))
}

/// Strongly convex generalization bound; independent of `T`.
pub fn thm2_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    strongly_convex_bound(inputs, inputs.sigma, inputs.sigma * (inputs.r + inputs.sigma), "thm2")
}

fn strongly_convex_bound(inputs: &BoundInputs, noise: f64, product: f64, name: &str) -> Result<BoundReport> {
    inputs.validate()?;
    if !(inputs.lambda > 0.0) {
        return Err(Error::RequiresStrongConvexity);
    }
    let BoundInputs { n, eta, mu, lambda, w0_norm, .. } = *inputs;
    let n = n as f64;
    let et0 = eta * inputs.t0();
    let cond = (mu / (E * lambda)).sqrt();
    let terms = [
        ("transient", 2.0 * product * et0 / n * (1.0 + 3.0 * mu * w0_norm + mu * et0 + 12.0 * cond)),
        ("strong", 42.0 * product / (n * lambda)),
        ("init", 36.0 * noise * w0_norm * cond / n),
    ];
    let mut flags = inputs.regime_flags();
    flags.retain(|f| f != "t_below_t0");
    Ok(BoundReport::new(name, inputs, &terms, flags))
}

/// Random-delay bound, `inputs.tau` read as `tau_bar`. Convex when
/// `lambda == 0`, strongly convex otherwise. `sigma (r + sigma)` becomes
/// `(sigma + rho)(r + sigma + rho)`.
pub fn corollary_random_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    let rho = inputs.rho.ok_or(Error::MissingRho)?;
    if inputs.tau == 0 {
        return Err(Error::InvalidArgument("random delay bound must be >= 1".into()));
    }
    let noise = inputs.sigma + rho;
    let product = noise * (inputs.r + noise);
    if inputs.lambda > 0.0 {
        strongly_convex_bound(inputs, noise, product, "corollary_strongly_convex")
    } else {
        convex_bound(inputs, product, "corollary_convex")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBounds {
    pub t: usize,
    /// Bound on `S1(t)`, convex.
    pub c1: f64,
    /// Bound on the weighted norm at `t`, convex; valid for `t >= t0`.
    pub c2: f64,
    /// Bound on `S2(t)`, convex.
    pub c3: f64,
    pub sc1: Option<f64>,
    pub sc2: Option<f64>,
    pub sc3: Option<f64>,
    pub flags: Vec<String>,
}

impl TermBounds {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("c1", self.c1), ("c2", self.c2), ("c3", self.c3)];
        for (k, v) in [("sc1", self.sc1), ("sc2", self.sc2), ("sc3", self.sc3)] {
            if let Some(v) = v {
                out.push((k, v));
            }
        }
        out
    }
}

/// Upper bounds on the three quantities entering [`prop1_bound`] at iteration `t`.
pub fn appendix_term_bounds(inputs: &BoundInputs, t: usize) -> Result<TermBounds> {
    inputs.validate()?;
    let BoundInputs { tau, eta, mu, lambda, .. } = *inputs;
    if t <= tau {
        return Err(Error::InvalidArgument(format!("t = {t} must exceed tau = {tau}")));
    }
    let t0 = inputs.t0();
    let span = (t - tau) as f64;
    let mut flags = Vec::new();
    if !in_decay_regime(eta, mu, tau) {
        flags.push("out_of_regime".to_string());
    }
    if (t as f64) < t0 {
        flags.push("c2_requires_t_at_least_t0".to_string());
    }
    let strongly = lambda > 0.0;
    Ok(TermBounds {
        t,
        c1: span,
        c2: 3.0 / (2.0 * eta * E * (t as f64 + 1.0)).sqrt(),
        c3: t0 * mu.sqrt() + 6.0 * (span / (2.0 * E * eta)).sqrt(),
        sc1: strongly.then(|| t0 + 3.0 / (eta * lambda)),
        sc2: strongly.then(|| 3.0 * mu.sqrt()),
        sc3: strongly.then(|| t0 * mu.sqrt() + 6.0 / (eta * (E * lambda).sqrt())),
        flags,
    })
}

/// `eta t0 <= ln(2 (tau + 1)) / (20 mu)`, up to relative rounding.
pub fn eta_t0_fact(eta: f64, mu: f64, tau: usize) -> bool {
    let rhs = (2.0 * (tau + 1) as f64).ln() / (20.0 * mu);
    eta * t0(tau) <= rhs * (1.0 + 1e-12)
}

/// Largest step size in the decay regime, `1 / (20 mu (tau + 1))`.
pub fn regime_eta(mu: f64, tau: usize) -> f64 {
    1.0 / (20.0 * mu * (tau + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BoundInputs {
        BoundInputs {
            n: 10,
            iters: 3,
            tau: 0,
            eta: 0.1,
            mu: 1.0,
            lambda: 0.0,
            r: 1.0,
            sigma: 1.0,
            rho: None,
            w0_norm: 0.0,
            sources: BTreeMap::new(),
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn prop1_worked_example() {
        let rep = prop1_bound(&base(), 2.71, 2.71, 0.5).unwrap();
        assert!(close(rep.term("noise_drift").unwrap(), 0.0542));
        assert!(close(rep.term("accumulated").unwrap(), 0.02937640));
        assert_eq!(rep.term("init").unwrap(), 0.0);
        assert!(close(rep.total, 0.0542 + 0.0293764));
    }

    #[test]
    fn noiseless_bounds_vanish() {
        let mut inp = base();
        inp.sigma = 0.0;
        inp.w0_norm = 2.0;
        assert_eq!(prop1_bound(&inp, 5.0, 5.0, 1.0).unwrap().total, 0.0);
        inp.iters = 1000;
        inp.tau = 9;
        assert_eq!(thm1_bound(&inp).unwrap().total, 0.0);
        inp.lambda = 0.5;
        assert_eq!(thm2_bound(&inp).unwrap().total, 0.0);
        inp.rho = Some(0.0);
        assert_eq!(corollary_random_bound(&inp).unwrap().total, 0.0);
    }

    #[test]
    fn thm1_worked_example() {
        let inp = BoundInputs { n: 100, iters: 1000, tau: 9, ..base() };
        let rep = thm1_bound(&inp).unwrap();
        let l = 10f64.ln();
        let want = 2.0 / 100.0 * (991f64.sqrt() + l * l) + 2.0 / 900.0 * 991.0;
        assert!(close(rep.total, want));
    }

    #[test]
    fn thm1_at_t_equal_tau() {
        let inp = BoundInputs { n: 100, iters: 9, tau: 9, w0_norm: 0.5, ..base() };
        let rep = thm1_bound(&inp).unwrap();
        let l = 10f64.ln();
        assert!(close(rep.total, 2.0 / 100.0 * (12.0 * 0.5 + l * l)));
    }

    #[test]
    fn thm1_flags_zero_delay() {
        let inp = BoundInputs { n: 100, iters: 50, tau: 0, ..base() };
        let rep = thm1_bound(&inp).unwrap();
        assert!(rep.has_flag("tau_zero_delay_ratio_omitted"));
        assert!(rep.term("delay_ratio").is_none());
    }

    #[test]
    fn thm2_worked_example() {
        let inp = BoundInputs { n: 100, tau: 1, eta: 1.0 / 40.0, lambda: 1.0, iters: 100, ..base() };
        let rep = thm2_bound(&inp).unwrap();
        let t0 = 2.0 * 4f64.ln();
        let et0 = t0 / 40.0;
        let c = (1.0 / E).sqrt();
        let s1 = 2.0 * 2.0 * et0 / 100.0 * (1.0 + et0 + 12.0 * c);
        let s2 = 42.0 * 2.0 / 100.0;
        assert!(close(rep.term("transient").unwrap(), s1));
        assert!(close(rep.term("strong").unwrap(), s2));
        assert_eq!(rep.term("init").unwrap(), 0.0);
        assert!(close(rep.total, s1 + s2));
        assert!(rep.flags.is_empty());
    }

    #[test]
    fn thm2_requires_strong_convexity() {
        assert!(matches!(thm2_bound(&base()), Err(Error::RequiresStrongConvexity)));
    }

    #[test]
    fn corollary_reduces_and_scales() {
        let inp = BoundInputs { n: 100, iters: 1000, tau: 9, ..base() };
        assert!(matches!(corollary_random_bound(&inp), Err(Error::MissingRho)));
        let zero = BoundInputs { rho: Some(0.0), ..inp.clone() };
        assert!(close(corollary_random_bound(&zero).unwrap().total, thm1_bound(&inp).unwrap().total));
        let half = BoundInputs { rho: Some(0.5), ..inp.clone() };
        let ratio = corollary_random_bound(&half).unwrap().total / thm1_bound(&inp).unwrap().total;
        assert!(close(ratio, 1.5 * 2.5 / 2.0));

        let sc = BoundInputs { lambda: 0.3, w0_norm: 1.0, rho: Some(0.0), ..inp };
        assert!(close(corollary_random_bound(&sc).unwrap().total, thm2_bound(&sc).unwrap().total));
    }

    #[test]
    fn doubling_n_halves_everything() {
        let inp = BoundInputs { n: 50, iters: 500, tau: 4, eta: 0.001, lambda: 0.2, w0_norm: 1.3, ..base() };
        let dbl = BoundInputs { n: 100, ..inp.clone() };
        for (a, b) in [
            (thm1_bound(&inp).unwrap().total, thm1_bound(&dbl).unwrap().total),
            (thm2_bound(&inp).unwrap().total, thm2_bound(&dbl).unwrap().total),
            (prop1_bound(&inp, 3.0, 2.0, 0.4).unwrap().total, prop1_bound(&dbl, 3.0, 2.0, 0.4).unwrap().total),
        ] {
            assert!(close(a, 2.0 * b));
        }
    }

    #[test]
    fn delay_ratio_decreases_in_tau() {
        let mut last = f64::INFINITY;
        for tau in 1..50 {
            let inp = BoundInputs { n: 100, iters: 1000, tau, ..base() };
            let v = thm1_bound(&inp).unwrap().term("delay_ratio").unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn appendix_examples() {
        let tb = appendix_term_bounds(&base(), 3).unwrap();
        assert_eq!(tb.c1, 3.0);
        assert!(tb.sc1.is_none());
        let inp = BoundInputs { tau: 1, eta: 1.0 / 40.0, lambda: 1.0, ..base() };
        assert_eq!(appendix_term_bounds(&inp, 10).unwrap().sc2, Some(3.0));
        assert!(appendix_term_bounds(&inp, 1).is_err());
    }

    #[test]
    fn eta_t0_fact_holds_at_regime_boundary() {
        for tau in 0..100 {
            assert!(eta_t0_fact(regime_eta(2.5, tau), 2.5, tau));
        }
        assert!(!eta_t0_fact(2.0 * regime_eta(1.0, 3), 1.0, 3));
    }

    #[test]
    fn out_of_regime_is_flagged_not_rejected() {
        let inp = BoundInputs { n: 100, iters: 1000, tau: 9, eta: 1.0, ..base() };
        let rep = thm1_bound(&inp).unwrap();
        assert!(rep.has_flag("out_of_regime"));
        assert!(rep.total > 0.0);
    }

    #[test]
    fn report_json_shape() {
        let inp = BoundInputs { n: 100, iters: 1000, tau: 9, ..base() };
        let v: serde_json::Value = serde_json::from_str(&thm1_bound(&inp).unwrap().to_json().unwrap()).unwrap();
        for key in ["inputs", "terms", "total", "flags"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
