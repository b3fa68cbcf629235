//! Experiment orchestration: generalization sweeps over delays, empirical
//! average stability, coefficient-bound grids and bound reports.
//!
//! Cells run in parallel; results are collected in `(delay, seed, ...)` order
//! so output does not depend on scheduling.

mod config;
mod output;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    BoundOverrides, ExperimentConfig, Format, LemmaOptions, Mode, ProblemSource, StabilityOptions,
};
pub use output::{
    coeff_table_csv, emit_bounds, emit_lemma, emit_parse_check, emit_stability, emit_sweep, write_csv,
    GEN_SWEEP_COLUMNS, STABILITY_COLUMNS,
};

use crate::bounds::{
    corollary_random_bound, prop1_bound, prop1_random_bound, regime_eta, thm1_bound, thm2_bound,
    BoundInputs, BoundReport, InputSource,
};
use crate::dataset::{load_libsvm, serialize_libsvm, split, Dataset, SyntheticSpec};
use crate::engine::{generalization_error, run, run_observed, twin_run, DelaySchedule, RunConfig};
use crate::error::{Error, Result};
use crate::genfun::{pi_coeffs, pi_norms, t0, verify_lemma2, weighted_partial_sums, CheckStatus};
use crate::problem::{build_problem, QuadraticProblem, SpectralConstants};

/// Train set, held-out pool and a display name.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub train: Arc<Dataset>,
    pub test: Dataset,
}

/// Synthetic sources draw the train set from stream `2 k` and the pool from
/// `2 k + 1`, where `k` is the source's `stream`.
pub fn prepare_data(source: &ProblemSource) -> Result<PreparedData> {
    match source {
        ProblemSource::Libsvm { path, dim, split: spec } => {
            let ds = load_libsvm(path, *dim)?;
            let name = ds.name.clone();
            let parts = split(&ds, *spec)?;
            Ok(PreparedData { name, train: Arc::new(parts.train), test: parts.test })
        }
        ProblemSource::Synthetic { d, spectrum, noise_std, seed, n_train, n_test, stream } => {
            if *n_train == 0 {
                return Err(Error::Config("n_train must be >= 1".into()));
            }
            let src = SyntheticSpec { d: *d, spectrum: spectrum.clone(), noise_std: *noise_std, seed: *seed }
                .source()?;
            let train = src.draw(*n_train, 2 * stream);
            let test = src.draw(*n_test, 2 * stream + 1);
            Ok(PreparedData { name: train.name.clone(), train: Arc::new(train), test })
        }
    }
}

fn source_of(cfg: &ExperimentConfig) -> Result<&ProblemSource> {
    cfg.source.as_ref().ok_or_else(|| Error::Config(format!("mode {} needs a [source]", cfg.mode.as_str())))
}

fn spectral(problem: &QuadraticProblem, cfg: &ExperimentConfig) -> Result<SpectralConstants> {
    problem.estimate_spectral(cfg.spectral_tol, cfg.spectral_max_iter, 0)
}

fn schedule(cfg: &ExperimentConfig, delay: usize, seed: u64) -> DelaySchedule {
    if cfg.random_delays {
        DelaySchedule::RandomBounded { tau_bar: delay, seed: cfg.delay_seed.wrapping_add(seed) }
    } else {
        DelaySchedule::Fixed { tau: delay }
    }
}

fn run_config(cfg: &ExperimentConfig, eta: f64, seed: u64) -> RunConfig {
    RunConfig {
        eta,
        iters: cfg.iters,
        batch_size: cfg.batch_size,
        sampler_seed: seed,
        record_stride: cfg.stride,
        ..RunConfig::default()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

// ---------------------------------------------------------------------------
// Generalization sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub mode: String,
    pub dataset: String,
    pub delay: usize,
    pub seed: u64,
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gen_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySummary {
    pub delay: usize,
    pub seeds_ok: usize,
    /// Seeds whose run diverged, with the iteration where it was detected.
    pub diverged: Vec<(u64, usize)>,
    pub final_t: usize,
    pub final_gen_mean: f64,
    pub final_gen_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delay: usize,
    pub t: usize,
    pub gen_mean: f64,
    pub gen_std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_digest: String,
    pub dataset: String,
    pub eta: f64,
    pub mu: Option<f64>,
    pub rows: Vec<GenRow>,
    pub curves: Vec<CurvePoint>,
    pub summary: Vec<DelaySummary>,
}

impl SweepResult {
    pub fn final_gen_means(&self) -> Vec<(usize, f64)> {
        self.summary.iter().map(|s| (s.delay, s.final_gen_mean)).collect()
    }
}

/// Trains once per `(delay, seed)` and records train/test loss at each checkpoint.
pub fn run_gen_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let data = prepare_data(source_of(cfg)?)?;
    if data.test.n() == 0 {
        return Err(Error::Config("the held-out set is empty".into()));
    }
    let problem = build_problem(data.train.clone(), cfg.ridge)?;
    let (eta, mu) = match cfg.eta {
        Some(eta) => (eta, None),
        None => {
            let mu = spectral(&problem, cfg)?.mu;
            (regime_eta(mu, cfg.max_delay()), Some(mu))
        }
    };

    let mut delays = cfg.delays.clone();
    delays.sort_unstable();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let cells: Vec<(usize, u64)> = delays.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();

    let outcomes: Vec<Result<Vec<GenRow>>> = cells
        .par_iter()
        .map(|&(delay, seed)| {
            let mut rows = Vec::new();
            let observer = |t: usize, w: &[f64]| {
                let train_loss = problem.data_loss(w)?;
                let test_loss = data.test.mean_loss(w)?;
                rows.push(GenRow {
                    mode: Mode::GenSweep.as_str().into(),
                    dataset: data.name.clone(),
                    delay,
                    seed,
                    t,
                    train_loss,
                    test_loss,
                    gen_error: test_loss - train_loss,
                });
                Ok(())
            };
            run_observed(&problem, &schedule(cfg, delay, seed), &run_config(cfg, eta, seed), observer)?;
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    for &delay in &delays {
        let mut finals = Vec::new();
        let mut diverged = Vec::new();
        let mut per_seed: Vec<&[GenRow]> = Vec::new();
        for ((d, seed), out) in cells.iter().zip(&outcomes) {
            if *d != delay {
                continue;
            }
            match out {
                Ok(r) => {
                    if let Some(last) = r.last() {
                        finals.push((last.t, last.gen_error));
                    }
                    per_seed.push(r);
                }
                Err(Error::Diverged { iteration }) => diverged.push((*seed, *iteration)),
                Err(e) => return Err(Error::InvalidArgument(format!("delay {delay}, seed {seed}: {e}"))),
            }
        }
        for r in &per_seed {
            rows.extend(r.iter().cloned());
        }
        let final_t = finals.first().map(|f| f.0).unwrap_or(0);
        let (m, s) = mean_std(&finals.iter().map(|f| f.1).collect::<Vec<_>>());
        summary.push(DelaySummary {
            delay,
            seeds_ok: finals.len(),
            diverged,
            final_t,
            final_gen_mean: m,
            final_gen_std: s,
        });
        if let Some(first) = per_seed.first() {
            for (k, row) in first.iter().enumerate() {
                let vals: Vec<f64> = per_seed.iter().filter_map(|r| r.get(k)).map(|r| r.gen_error).collect();
                let (m, s) = mean_std(&vals);
                curves.push(CurvePoint { delay, t: row.t, gen_mean: m, gen_std: s, count: vals.len() });
            }
        }
    }

    Ok(SweepResult { config_digest: cfg.digest(), dataset: data.name, eta, mu, rows, curves, summary })
}

// ---------------------------------------------------------------------------
// Empirical average stability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub mode: String,
    pub dataset: String,
    pub delay: usize,
    pub seed: u64,
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gen_error: f64,
    pub replaced_index: usize,
    pub loss_gap: f64,
    pub bound_prop1: f64,
    pub bound_thm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub delay: usize,
    pub eta: f64,
    /// `|mean loss_gap|` over `(index, seed)`.
    pub estimate: f64,
    pub signed_mean: f64,
    pub std_err: f64,
    pub samples: usize,
    /// Empirical mean of `|xi_t|` over pilot runs.
    pub sigma: f64,
    pub r: f64,
    pub mu: f64,
    pub lambda: f64,
    /// The spectrum behind the coefficient sums is `{mu, lambda}` only.
    pub partial_spectrum: bool,
    pub prop1: BoundReport,
    pub thm: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub config_digest: String,
    pub dataset: String,
    pub rows: Vec<StabilityRow>,
    pub estimates: Vec<StabilityEstimate>,
}

/// Measured constants for one delay plus the coefficient spectrum.
#[derive(Debug, Clone)]
pub struct MeasuredConstants {
    pub inputs: BoundInputs,
    pub spectrum: Vec<f64>,
    pub partial_spectrum: bool,
}

/// Measures `mu`, `lambda`, `r`, `sigma` (and `rho` for random delays) on the
/// training set; declared overrides in `cfg.bounds` take precedence.
pub fn measure_constants(
    cfg: &ExperimentConfig,
    problem: &QuadraticProblem,
    spec: &SpectralConstants,
    delay: usize,
    eta: f64,
) -> Result<MeasuredConstants> {
    let o = &cfg.bounds;
    let mut sources = std::collections::BTreeMap::new();
    let mut pick = |name: &str, declared: Option<f64>, measured: &dyn Fn() -> Result<f64>, kind| {
        Ok::<f64, Error>(match declared {
            Some(v) => {
                sources.insert(name.to_string(), InputSource::Declared);
                v
            }
            None => {
                sources.insert(name.to_string(), kind);
                measured()?
            }
        })
    };
    let mu = pick("mu", o.mu, &|| Ok(spec.mu), InputSource::Empirical)?;
    let lambda = pick("lambda", o.lambda, &|| Ok(spec.lambda), InputSource::Empirical)?;
    let r = pick("r", o.r, &|| Ok(problem.b_norm()), InputSource::Empirical)?;

    let need_pilot = o.sigma.is_none() || (cfg.random_delays && o.rho.is_none());
    let pilots: Vec<(f64, Option<f64>)> = if need_pilot {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let tr = run(problem, &schedule(cfg, delay, seed), &run_config(cfg, eta, seed))?;
                Ok((tr.noise.mean, tr.drift_max))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let sigma = pick(
        "sigma",
        o.sigma,
        &|| Ok(pilots.iter().map(|p| p.0).sum::<f64>() / pilots.len() as f64),
        InputSource::Empirical,
    )?;
    let rho = if cfg.random_delays {
        let est = || Ok(2.0 * pilots.iter().filter_map(|p| p.1).fold(0.0, f64::max));
        Some(pick("rho", o.rho, &est, InputSource::Estimated)?)
    } else {
        o.rho
    };
    // runs always start from zero
    let w0_norm = pick("w0_norm", o.w0_norm, &|| Ok(0.0), InputSource::Empirical)?;

    let (spectrum, partial) = match (&spec.spectrum, o.mu.or(o.lambda)) {
        (Some(s), None) => (s.clone(), false),
        _ => (vec![mu, lambda], true),
    };
    let inputs = BoundInputs {
        n: o.n.unwrap_or(problem.n()),
        iters: cfg.iters,
        tau: delay,
        eta,
        mu,
        lambda,
        r,
        sigma,
        rho,
        w0_norm,
        sources,
    };
    Ok(MeasuredConstants { inputs, spectrum, partial_spectrum: partial })
}

/// Proposition-style bound from computed coefficient sums at `t = T`, and the
/// matching closed-form theorem bound.
pub fn bounds_for(m: &MeasuredConstants, random: bool) -> Result<(BoundReport, BoundReport)> {
    let inp = &m.inputs;
    let table = pi_norms(&m.spectrum, inp.eta, inp.tau, inp.iters)?;
    let (s1, s2) = weighted_partial_sums(&table, inp.iters)?;
    let wt = table.weighted_norms[inp.iters];
    let mut prop = if random { prop1_random_bound(inp, s1, s2, wt)? } else { prop1_bound(inp, s1, s2, wt)? };
    if m.partial_spectrum {
        prop.flags.push("partial_spectrum".into());
    }
    let thm = if random {
        corollary_random_bound(inp)?
    } else if inp.lambda > 0.0 {
        thm2_bound(inp)?
    } else {
        thm1_bound(inp)?
    };
    Ok((prop, thm))
}

/// Estimates `|E[f(w'_T; z_i) - f(w_T; z_i)]|` with twin runs over
/// `stability.replacements` indices and all seeds. Replacement samples are
/// taken from the held-out pool in order.
pub fn estimate_avg_stability(cfg: &ExperimentConfig) -> Result<StabilityResult> {
    cfg.validate()?;
    let data = prepare_data(source_of(cfg)?)?;
    let k = cfg.stability.replacements;
    if data.test.n() == 0 {
        return Err(Error::Config("empty replacement pool".into()));
    }
    if k == 0 || k > data.train.n() {
        return Err(Error::Config(format!("replacements must lie in 1..={}, got {k}", data.train.n())));
    }
    let problem = build_problem(data.train.clone(), cfg.ridge)?;
    let spec = spectral(&problem, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stability.index_seed);
    let mut indices = rand::seq::index::sample(&mut rng, data.train.n(), k).into_vec();
    indices.sort_unstable();

    let mut delays = cfg.delays.clone();
    delays.sort_unstable();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();

    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for &delay in &delays {
        let eta = cfg.eta.unwrap_or_else(|| regime_eta(spec.mu, delay));
        let measured = measure_constants(cfg, &problem, &spec, delay, eta)?;
        let (prop, thm) = bounds_for(&measured, cfg.random_delays)?;

        let cells: Vec<(usize, usize, u64)> = indices
            .iter()
            .enumerate()
            .flat_map(|(j, &i)| seeds.iter().map(move |&s| (j, i, s)))
            .collect();
        let outs: Vec<StabilityRow> = cells
            .par_iter()
            .map(|&(j, i, seed)| {
                let z = if cfg.stability.identical_control {
                    &data.train.samples()[i]
                } else {
                    &data.test.samples()[j % data.test.n()]
                };
                let rc = RunConfig { noise_samples: 0, ..run_config(cfg, eta, seed) };
                let out = twin_run(&problem, i, z, &schedule(cfg, delay, seed), &rc)?;
                let train_loss = problem.data_loss(&out.final_w)?;
                let test_loss = data.test.mean_loss(&out.final_w)?;
                Ok(StabilityRow {
                    mode: Mode::Stability.as_str().into(),
                    dataset: data.name.clone(),
                    delay,
                    seed,
                    t: cfg.iters,
                    train_loss,
                    test_loss,
                    gen_error: generalization_error(&problem, &data.test, &out.final_w)?,
                    replaced_index: i,
                    loss_gap: out.loss_gap,
                    bound_prop1: prop.total,
                    bound_thm: thm.total,
                })
            })
            .collect::<Result<_>>()?;

        let gaps: Vec<f64> = outs.iter().map(|r| r.loss_gap).collect();
        let (m, s) = mean_std(&gaps);
        let inp = &measured.inputs;
        estimates.push(StabilityEstimate {
            delay,
            eta,
            estimate: m.abs(),
            signed_mean: m,
            std_err: s / (gaps.len() as f64).sqrt(),
            samples: gaps.len(),
            sigma: inp.sigma,
            r: inp.r,
            mu: inp.mu,
            lambda: inp.lambda,
            partial_spectrum: measured.partial_spectrum,
            prop1: prop,
            thm,
        });
        rows.extend(outs);
    }
    Ok(StabilityResult { config_digest: cfg.digest(), dataset: data.name, rows, estimates })
}

// ---------------------------------------------------------------------------
// Coefficient-bound grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub tau: usize,
    pub eta_fraction: f64,
    pub eta: f64,
    pub mu: f64,
    pub t0: f64,
    pub horizon: usize,
    pub status: CheckStatus,
    pub uniform: CheckStatus,
    pub early: CheckStatus,
    pub decay: CheckStatus,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaGridReport {
    pub config_digest: String,
    pub rows: Vec<LemmaRow>,
    pub failures: usize,
    pub not_applicable: usize,
    /// `(file stem, csv text)` per grid point when `dump_tables` is set.
    #[serde(skip)]
    pub tables: Vec<(String, String)>,
}

/// Default horizon `10 ceil(t0) + 1000`.
pub fn lemma_horizon(tau: usize) -> usize {
    10 * t0(tau).ceil() as usize + 1000
}

/// Checks the coefficient bounds over `taus x eta_fractions` for one spectrum.
pub fn verify_lemma_grid(cfg: &ExperimentConfig) -> Result<LemmaGridReport> {
    let opts = &cfg.lemma;
    let spectrum = opts.spectrum.eigenvalues(opts.d)?;
    let mu = spectrum.iter().copied().fold(0.0, f64::max);
    if !(mu > 0.0) {
        return Err(Error::Config("lemma spectrum must have a positive eigenvalue".into()));
    }
    let grid: Vec<(usize, f64)> =
        opts.taus.iter().flat_map(|&t| opts.eta_fractions.iter().map(move |&f| (t, f))).collect();

    let results: Vec<(LemmaRow, Option<(String, String)>)> = grid
        .par_iter()
        .map(|&(tau, frac)| {
            let eta = frac * regime_eta(mu, tau);
            let horizon = opts.horizon.unwrap_or_else(|| lemma_horizon(tau));
            let table = if opts.dump_tables {
                pi_coeffs(&spectrum, eta, tau, horizon)?
            } else {
                pi_norms(&spectrum, eta, tau, horizon)?
            };
            let rep = verify_lemma2(&table, mu)?;
            let worst = rep.checks().iter().map(|c| c.worst_margin).fold(f64::INFINITY, f64::min);
            let row = LemmaRow {
                tau,
                eta_fraction: frac,
                eta,
                mu,
                t0: t0(tau),
                horizon,
                status: rep.status(),
                uniform: rep.uniform.status,
                early: rep.early.status,
                decay: rep.decay.status,
                worst_margin: worst,
            };
            let dump = if opts.dump_tables {
                let lambda = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
                Some((format!("coeff_tau{tau}_eta{frac}"), coeff_table_csv(&table, mu, lambda)?))
            } else {
                None
            };
            Ok((row, dump))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for (row, dump) in results {
        rows.push(row);
        tables.extend(dump);
    }
    let failures = rows.iter().filter(|r| r.status == CheckStatus::Fail).count();
    let not_applicable = rows.iter().filter(|r| r.status == CheckStatus::NotApplicable).count();
    Ok(LemmaGridReport { config_digest: cfg.digest(), rows, failures, not_applicable, tables })
}

// ---------------------------------------------------------------------------
// Bound reports

/// One report set per delay. With a data source the constants are measured;
/// without one, `n`, `mu`, `r` and `sigma` must be declared in `[bounds]`.
pub fn bound_reports(cfg: &ExperimentConfig) -> Result<Vec<BoundReport>> {
    cfg.validate()?;
    let mut delays = cfg.delays.clone();
    delays.sort_unstable();
    let mut out = Vec::new();
    match &cfg.source {
        Some(src) => {
            let data = prepare_data(src)?;
            let problem = build_problem(data.train.clone(), cfg.ridge)?;
            let spec = spectral(&problem, cfg)?;
            for &delay in &delays {
                let eta = cfg.eta.unwrap_or_else(|| regime_eta(spec.mu, delay));
                let m = measure_constants(cfg, &problem, &spec, delay, eta)?;
                push_reports(&mut out, &m, cfg.random_delays)?;
            }
        }
        None => {
            let o = &cfg.bounds;
            let missing = |k: &str| Error::Config(format!("bounds without a data source need `{k}`"));
            let mu = o.mu.ok_or_else(|| missing("mu"))?;
            let lambda = o.lambda.unwrap_or(0.0);
            for &delay in &delays {
                let inputs = BoundInputs {
                    n: o.n.ok_or_else(|| missing("n"))?,
                    iters: cfg.iters,
                    tau: delay,
                    eta: cfg.eta.unwrap_or_else(|| regime_eta(mu, delay)),
                    mu,
                    lambda,
                    r: o.r.ok_or_else(|| missing("r"))?,
                    sigma: o.sigma.ok_or_else(|| missing("sigma"))?,
                    rho: o.rho,
                    w0_norm: o.w0_norm.unwrap_or(0.0),
                    sources: [
                        ("n", o.n.is_some()),
                        ("mu", true),
                        ("lambda", o.lambda.is_some()),
                        ("r", true),
                        ("sigma", true),
                        ("rho", o.rho.is_some()),
                        ("w0_norm", o.w0_norm.is_some()),
                    ]
                    .iter()
                    .filter(|(_, given)| *given)
                    .map(|(k, _)| (k.to_string(), InputSource::Declared))
                    .collect(),
                };
                let m = MeasuredConstants { inputs, spectrum: vec![mu, lambda], partial_spectrum: true };
                push_reports(&mut out, &m, cfg.random_delays)?;
            }
        }
    }
    Ok(out)
}

fn push_reports(out: &mut Vec<BoundReport>, m: &MeasuredConstants, random: bool) -> Result<()> {
    let (prop, thm) = bounds_for(m, random)?;
    out.push(prop);
    out.push(thm);
    if !random && m.inputs.lambda > 0.0 {
        // the convex bound applies as well
        out.push(thm1_bound(&m.inputs)?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parse check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub config_digest: String,
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub nnz: usize,
    pub round_trip: bool,
}

/// Loads a LIBSVM source and checks that serializing and re-parsing is lossless.
pub fn parse_check(cfg: &ExperimentConfig) -> Result<ParseSummary> {
    let ProblemSource::Libsvm { path, dim, .. } = source_of(cfg)? else {
        return Err(Error::Config("parse-check needs a libsvm source".into()));
    };
    let ds = load_libsvm(path, *dim)?;
    let text = serialize_libsvm(&ds);
    let back = crate::dataset::parse_libsvm(text.as_bytes(), Some(ds.dim()))?;
    Ok(ParseSummary {
        config_digest: cfg.digest(),
        dataset: ds.name.clone(),
        n: ds.n(),
        d: ds.dim(),
        nnz: ds.nnz(),
        round_trip: back.samples() == ds.samples(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SpectrumSpec;

    fn small(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            source: Some(ProblemSource::Synthetic {
                d: 4,
                spectrum: SpectrumSpec::Uniform { min: 0.2, max: 1.0 },
                noise_std: 0.3,
                seed: 1,
                n_train: 30,
                n_test: 40,
                stream: 0,
            }),
            delays: vec![2, 0],
            seeds: vec![1, 0],
            iters: 300,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn sweep_cardinality_and_order() {
        let res = run_gen_sweep(&small(Mode::GenSweep)).unwrap();
        assert_eq!(res.summary.len(), 2);
        assert_eq!(res.rows.len(), 2 * 2 * 100);
        assert_eq!((res.rows[0].delay, res.rows[0].seed, res.rows[0].t), (0, 0, 3));
        assert!(res.summary.iter().all(|s| s.seeds_ok == 2));
        for r in &res.rows {
            assert!((r.gen_error - (r.test_loss - r.train_loss)).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_single_checkpoint() {
        let cfg = ExperimentConfig { delays: vec![3], seeds: vec![5], stride: Some(300), ..small(Mode::GenSweep) };
        assert_eq!(run_gen_sweep(&cfg).unwrap().rows.len(), 1);
    }

    #[test]
    fn sweep_flags_divergence_and_continues() {
        let cfg = ExperimentConfig { eta: Some(50.0), delays: vec![1], ..small(Mode::GenSweep) };
        let res = run_gen_sweep(&cfg).unwrap();
        assert_eq!(res.summary[0].diverged.len(), 2);
        assert!(res.rows.is_empty());
    }

    #[test]
    fn identical_replacement_gives_zero_estimate() {
        let mut cfg = small(Mode::Stability);
        cfg.stability.replacements = 10;
        cfg.stability.identical_control = true;
        let res = estimate_avg_stability(&cfg).unwrap();
        assert!(res.rows.iter().all(|r| r.loss_gap == 0.0));
        assert!(res.estimates.iter().all(|e| e.estimate == 0.0 && e.std_err == 0.0));
    }

    #[test]
    fn stability_runs_and_reports_bounds() {
        let mut cfg = small(Mode::Stability);
        cfg.ridge = 0.05;
        cfg.stability.replacements = 5;
        let res = estimate_avg_stability(&cfg).unwrap();
        assert_eq!(res.estimates.len(), 2);
        assert_eq!(res.rows.len(), 2 * 5 * 2);
        for e in &res.estimates {
            assert!(e.prop1.total.is_finite() && e.prop1.total >= 0.0);
            assert!(e.thm.total.is_finite() && e.thm.total >= 0.0);
            assert!(e.sigma > 0.0);
            assert_eq!(e.thm.bound, "thm2");
        }
    }

    #[test]
    fn stability_rejects_bad_pools() {
        let mut cfg = small(Mode::Stability);
        cfg.stability.replacements = 31;
        assert!(estimate_avg_stability(&cfg).is_err());
        if let Some(ProblemSource::Synthetic { n_test, .. }) = cfg.source.as_mut() {
            *n_test = 0;
        }
        cfg.stability.replacements = 3;
        assert!(estimate_avg_stability(&cfg).is_err());
    }

    #[test]
    fn lemma_grid_in_and_out_of_regime() {
        let mut cfg = ExperimentConfig { mode: Mode::VerifyLemma, ..Default::default() };
        cfg.lemma.taus = vec![0, 3, 8];
        cfg.lemma.eta_fractions = vec![1.0, 0.5];
        let rep = verify_lemma_grid(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.failures, 0);
        for r in &rep.rows {
            assert!((r.t0 - (r.tau as f64 + 1.0) * (2.0 * (r.tau as f64 + 1.0)).ln()).abs() < 1e-12);
        }
        // eta = 1/mu sits far outside both regimes at tau = 3
        cfg.lemma.taus = vec![3];
        cfg.lemma.eta_fractions = vec![80.0];
        let rep = verify_lemma_grid(&cfg).unwrap();
        assert_eq!(rep.failures, 0);
        assert_eq!(rep.rows[0].status, CheckStatus::NotApplicable);
    }

    #[test]
    fn declared_bounds_need_constants() {
        let cfg = ExperimentConfig { mode: Mode::Bounds, delays: vec![4], ..Default::default() };
        assert!(bound_reports(&cfg).is_err());
        let mut cfg = cfg;
        cfg.bounds = BoundOverrides {
            n: Some(100),
            mu: Some(1.0),
            r: Some(1.0),
            sigma: Some(1.0),
            ..Default::default()
        };
        let reps = bound_reports(&cfg).unwrap();
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[1].bound, "thm1");
        let src = &reps[1].inputs.sources;
        assert_eq!(src.get("sigma"), Some(&InputSource::Declared));
        assert!(!src.contains_key("rho") && !src.contains_key("lambda"));
    }

    #[test]
    fn random_stability_estimates_rho() {
        let mut cfg = small(Mode::Stability);
        cfg.random_delays = true;
        cfg.delays = vec![3];
        cfg.stability.replacements = 3;
        let res = estimate_avg_stability(&cfg).unwrap();
        let e = &res.estimates[0];
        assert!(e.thm.bound.starts_with("corollary"));
        assert_eq!(e.thm.inputs.sources.get("rho"), Some(&InputSource::Estimated));
        assert!(e.thm.inputs.rho.unwrap() > 0.0);
    }
}
