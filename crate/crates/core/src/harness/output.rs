//! CSV / JSON writers. Every file starts with the config digest; nothing
//! time-dependent is written, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Format, LemmaGridReport, ParseSummary, StabilityResult, SweepResult};
use crate::bounds::{appendix_term_bounds, BoundInputs, BoundReport};
use crate::error::Result;
use crate::genfun::{weighted_partial_sums, CoeffTable};

pub const GEN_SWEEP_COLUMNS: [&str; 8] =
    ["mode", "dataset", "delay", "seed", "t", "train_loss", "test_loss", "gen_error"];

pub const STABILITY_COLUMNS: [&str; 12] = [
    "mode",
    "dataset",
    "delay",
    "seed",
    "t",
    "train_loss",
    "test_loss",
    "gen_error",
    "replaced_index",
    "loss_gap",
    "bound_prop1",
    "bound_thm",
];

fn csv_text<T: Serialize>(digest: Option<&str>, header: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8");
    Ok(match digest {
        Some(d) => format!("# config_digest={d}\n{body}"),
        None => body,
    })
}

/// Writes a digest comment line, the header, then one row per record.
pub fn write_csv<T: Serialize>(path: &Path, digest: &str, header: &[&str], rows: &[T]) -> Result<()> {
    fs::write(path, csv_text(Some(digest), header, rows)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepSummaryRow {
    delay: usize,
    seeds_ok: usize,
    diverged_seeds: usize,
    final_t: usize,
    final_gen_mean: f64,
    final_gen_std: f64,
}

pub fn emit_sweep(res: &SweepResult, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    match format {
        Format::Csv => {
            let rows_path = dir.join("gen_sweep.csv");
            write_csv(&rows_path, &res.config_digest, &GEN_SWEEP_COLUMNS, &res.rows)?;
            let summary: Vec<SweepSummaryRow> = res
                .summary
                .iter()
                .map(|s| SweepSummaryRow {
                    delay: s.delay,
                    seeds_ok: s.seeds_ok,
                    diverged_seeds: s.diverged.len(),
                    final_t: s.final_t,
                    final_gen_mean: s.final_gen_mean,
                    final_gen_std: s.final_gen_std,
                })
                .collect();
            let sum_path = dir.join("gen_sweep_summary.csv");
            write_csv(
                &sum_path,
                &res.config_digest,
                &["delay", "seeds_ok", "diverged_seeds", "final_t", "final_gen_mean", "final_gen_std"],
                &summary,
            )?;
            Ok(vec![rows_path, sum_path])
        }
        Format::Json => {
            let path = dir.join("gen_sweep.json");
            write_json(&path, res)?;
            Ok(vec![path])
        }
    }
}

#[derive(Serialize)]
struct StabilitySummaryRow<'a> {
    delay: usize,
    eta: f64,
    estimate: f64,
    signed_mean: f64,
    std_err: f64,
    samples: usize,
    sigma: f64,
    r: f64,
    mu: f64,
    lambda: f64,
    bound_prop1: f64,
    bound_thm: f64,
    thm_kind: &'a str,
}

pub fn emit_stability(res: &StabilityResult, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    match format {
        Format::Csv => {
            let rows_path = dir.join("stability.csv");
            write_csv(&rows_path, &res.config_digest, &STABILITY_COLUMNS, &res.rows)?;
            let summary: Vec<StabilitySummaryRow> = res
                .estimates
                .iter()
                .map(|e| StabilitySummaryRow {
                    delay: e.delay,
                    eta: e.eta,
                    estimate: e.estimate,
                    signed_mean: e.signed_mean,
                    std_err: e.std_err,
                    samples: e.samples,
                    sigma: e.sigma,
                    r: e.r,
                    mu: e.mu,
                    lambda: e.lambda,
                    bound_prop1: e.prop1.total,
                    bound_thm: e.thm.total,
                    thm_kind: &e.thm.bound,
                })
                .collect();
            let sum_path = dir.join("stability_summary.csv");
            write_csv(
                &sum_path,
                &res.config_digest,
                &[
                    "delay",
                    "eta",
                    "estimate",
                    "signed_mean",
                    "std_err",
                    "samples",
                    "sigma",
                    "r",
                    "mu",
                    "lambda",
                    "bound_prop1",
                    "bound_thm",
                    "thm_kind",
                ],
                &summary,
            )?;
            Ok(vec![rows_path, sum_path])
        }
        Format::Json => {
            let path = dir.join("stability.json");
            write_json(&path, res)?;
            Ok(vec![path])
        }
    }
}

pub fn emit_lemma(rep: &LemmaGridReport, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    let mut paths = Vec::new();
    match format {
        Format::Csv => {
            let path = dir.join("verify_lemma.csv");
            write_csv(
                &path,
                &rep.config_digest,
                &[
                    "tau",
                    "eta_fraction",
                    "eta",
                    "mu",
                    "t0",
                    "horizon",
                    "status",
                    "uniform",
                    "early",
                    "decay",
                    "worst_margin",
                ],
                &rep.rows,
            )?;
            paths.push(path);
        }
        Format::Json => {
            let path = dir.join("verify_lemma.json");
            write_json(&path, rep)?;
            paths.push(path);
        }
    }
    if !rep.tables.is_empty() {
        let tdir = dir.join("tables");
        prepare(&tdir)?;
        for (stem, text) in &rep.tables {
            let path = tdir.join(format!("{stem}.csv"));
            fs::write(&path, format!("# config_digest={}\n{text}", rep.config_digest))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[derive(Serialize)]
struct BoundsFile<'a> {
    config_digest: &'a str,
    reports: &'a [BoundReport],
}

/// Bound reports are always JSON: `{inputs, terms, total, flags}` per report.
pub fn emit_bounds(reports: &[BoundReport], digest: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    let path = dir.join("bounds.json");
    write_json(&path, &BoundsFile { config_digest: digest, reports })?;
    Ok(vec![path])
}

pub fn emit_parse_check(summary: &ParseSummary, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    prepare(dir)?;
    let path = match format {
        Format::Csv => {
            let path = dir.join("parse_check.csv");
            write_csv(
                &path,
                &summary.config_digest,
                &["config_digest", "dataset", "n", "d", "nnz", "round_trip"],
                std::slice::from_ref(summary),
            )?;
            path
        }
        Format::Json => {
            let path = dir.join("parse_check.json");
            write_json(&path, summary)?;
            path
        }
    };
    Ok(vec![path])
}

#[derive(Serialize)]
struct CoeffRow {
    t: usize,
    norm: f64,
    weighted_norm: f64,
    s1: Option<f64>,
    s2: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    c3: Option<f64>,
    sc1: Option<f64>,
    sc2: Option<f64>,
    sc3: Option<f64>,
}

/// One row per `t`: norms, partial sums and their closed-form bounds. Sums and
/// bounds are blank for `t <= tau`; strongly convex bounds need `lambda > 0`.
pub fn coeff_table_csv(table: &CoeffTable, mu: f64, lambda: f64) -> Result<String> {
    let inputs = BoundInputs {
        n: 1,
        iters: table.horizon(),
        tau: table.tau,
        eta: table.eta,
        mu,
        lambda,
        r: 0.0,
        sigma: 0.0,
        rho: None,
        w0_norm: 0.0,
        sources: Default::default(),
    };
    let mut rows = Vec::with_capacity(table.horizon() + 1);
    for t in 0..=table.horizon() {
        let (sums, tb) = if t > table.tau {
            (Some(weighted_partial_sums(table, t)?), Some(appendix_term_bounds(&inputs, t)?))
        } else {
            (None, None)
        };
        rows.push(CoeffRow {
            t,
            norm: table.norms[t],
            weighted_norm: table.weighted_norms[t],
            s1: sums.map(|s| s.0),
            s2: sums.map(|s| s.1),
            c1: tb.as_ref().map(|b| b.c1),
            c2: tb.as_ref().map(|b| b.c2),
            c3: tb.as_ref().map(|b| b.c3),
            sc1: tb.as_ref().and_then(|b| b.sc1),
            sc2: tb.as_ref().and_then(|b| b.sc2),
            sc3: tb.as_ref().and_then(|b| b.sc3),
        })
    }
    csv_text(
        None,
        &["t", "norm", "weighted_norm", "S1", "S2", "c1", "c2", "c3", "sc1", "sc2", "sc3"],
        &rows,
    )
}
