//! Delayed SGD with fixed or bounded random delays.
//!
//! Iterates `w_0 = ... = w_D` (with `D` the maximum delay) and, for `t >= D`,
//! `w_{t+1} = w_t - eta * g_t` where `g_t` is a minibatch gradient evaluated at
//! the stale iterate `w_{t - tau_t}`. Only the last `D + 1` iterates are kept.
//!
//! Randomness: minibatch indices come from `ChaCha8Rng::seed_from_u64(sampler_seed)`
//! via `random_range(0..n)`; random delays from a separate
//! `ChaCha8Rng::seed_from_u64(seed)` via `random_range(0..=tau_bar)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::problem::{axpy, norm, QuadraticProblem};

/// Abort threshold on `|w_t|`.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Default cap on the number of iterations used to estimate the gradient noise.
pub const DEFAULT_NOISE_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelaySchedule {
    Fixed { tau: usize },
    /// `tau_t` uniform on `{0, ..., tau_bar}`.
    RandomBounded { tau_bar: usize, seed: u64 },
}

impl DelaySchedule {
    /// `D`: the fixed delay or the delay bound.
    pub fn max_delay(&self) -> usize {
        match *self {
            DelaySchedule::Fixed { tau } => tau,
            DelaySchedule::RandomBounded { tau_bar, .. } => tau_bar,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, DelaySchedule::RandomBounded { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let DelaySchedule::RandomBounded { tau_bar: 0, .. } = self {
            return Err(Error::InvalidArgument("random delay bound must be >= 1".into()));
        }
        Ok(())
    }

    fn sampler(&self) -> DelaySampler {
        match *self {
            DelaySchedule::Fixed { tau } => DelaySampler::Fixed(tau),
            DelaySchedule::RandomBounded { tau_bar, seed } => {
                DelaySampler::Random { tau_bar, rng: ChaCha8Rng::seed_from_u64(seed) }
            }
        }
    }
}

enum DelaySampler {
    Fixed(usize),
    Random { tau_bar: usize, rng: ChaCha8Rng },
}

impl DelaySampler {
    #[inline]
    fn next(&mut self) -> usize {
        match self {
            DelaySampler::Fixed(tau) => *tau,
            DelaySampler::Random { tau_bar, rng } => rng.random_range(0..=*tau_bar),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zeros,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub eta: f64,
    /// Total iterations `T`; the final iterate is `w_T`.
    pub iters: usize,
    pub batch_size: usize,
    /// Use the exact full gradient instead of sampled minibatches.
    pub full_batch: bool,
    pub init: Init,
    pub sampler_seed: u64,
    /// Checkpoints at `t = k * stride`, `k >= 1`. `None` means `T / 100` (at least 1).
    pub record_stride: Option<usize>,
    /// Keep a copy of `w_t` at every checkpoint.
    pub store_iterates: bool,
    /// Upper bound on iterations at which `|xi_t|` is evaluated.
    pub noise_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            eta: 0.01,
            iters: 1000,
            batch_size: 1,
            full_batch: false,
            init: Init::Zeros,
            sampler_seed: 0,
            record_stride: None,
            store_iterates: false,
            noise_samples: DEFAULT_NOISE_SAMPLES,
        }
    }
}

impl RunConfig {
    pub fn stride(&self) -> usize {
        self.record_stride.unwrap_or(self.iters / 100).max(1)
    }

    fn validate(&self, schedule: &DelaySchedule, dim: usize) -> Result<()> {
        schedule.validate()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.iters <= schedule.max_delay() {
            return Err(Error::InvalidArgument(format!(
                "T = {} must exceed the maximum delay {}",
                self.iters,
                schedule.max_delay()
            )));
        }
        if let Init::Given(w0) = &self.init {
            if w0.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: w0.len() });
            }
        }
        Ok(())
    }

    fn initial(&self, dim: usize) -> Vec<f64> {
        match &self.init {
            Init::Zeros => vec![0.0; dim],
            Init::Given(w0) => w0.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    pub train_loss: f64,
}

/// Empirical `|xi_t| = |g_t - grad F_S(w_{t - tau_t})|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseStats {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schedule: DelaySchedule,
    pub initial_loss: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// `(t, w_t)` at checkpoints when `store_iterates` is set.
    pub iterates: Vec<(usize, Vec<f64>)>,
    pub final_w: Vec<f64>,
    pub noise: NoiseStats,
    /// Max of `|(A + ridge I)(w_{t - tau_t} - w_{t - tau_bar})|` over the noise
    /// sampling iterations; only for random schedules.
    pub drift_max: Option<f64>,
    /// How often each delay value in `0..=D` was used.
    pub delay_counts: Vec<u64>,
    /// FNV-1a digest of the sampled index sequence.
    pub index_digest: u64,
}

trait IndexSource {
    fn next_index(&mut self, n: usize) -> Result<usize>;
}

struct SeededIndices(ChaCha8Rng);

impl IndexSource for SeededIndices {
    #[inline]
    fn next_index(&mut self, n: usize) -> Result<usize> {
        Ok(self.0.random_range(0..n))
    }
}

struct ReplayIndices<'a> {
    seq: &'a [usize],
    pos: usize,
}

impl IndexSource for ReplayIndices<'_> {
    fn next_index(&mut self, n: usize) -> Result<usize> {
        let i = *self.seq.get(self.pos).ok_or_else(|| {
            Error::InvalidArgument(format!("replay sequence exhausted after {} indices", self.pos))
        })?;
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n });
        }
        self.pos += 1;
        Ok(i)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[inline]
fn fnv_mix(h: u64, i: usize) -> u64 {
    (i as u64).to_le_bytes().iter().fold(h, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Ring buffer over the last `D + 1` iterates.
struct History {
    slots: Vec<Vec<f64>>,
}

impl History {
    fn new(w0: &[f64], depth: usize) -> Self {
        History { slots: vec![w0.to_vec(); depth + 1] }
    }

    #[inline]
    fn get(&self, t: usize) -> &[f64] {
        &self.slots[t % self.slots.len()]
    }

    #[inline]
    fn put(&mut self, t: usize, w: &mut Vec<f64>) {
        let k = t % self.slots.len();
        std::mem::swap(&mut self.slots[k], w);
    }
}

/// Minibatch (or full) gradient at `w`, written into `g`.
#[inline]
fn batch_gradient(
    problem: &QuadraticProblem,
    w: &[f64],
    batch: &[usize],
    full_batch: bool,
    g: &mut [f64],
) {
    if full_batch {
        problem.full_gradient_into(w, g);
        return;
    }
    g.iter_mut().for_each(|v| *v = 0.0);
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        problem.accumulate_data_gradient(w, i, scale, g);
    }
    axpy(problem.ridge(), w, g);
}

fn draw_batch(src: &mut dyn IndexSource, n: usize, batch: &mut [usize], digest: &mut u64) -> Result<()> {
    for slot in batch.iter_mut() {
        *slot = src.next_index(n)?;
        *digest = fnv_mix(*digest, *slot);
    }
    Ok(())
}

fn noise_stride(config: &RunConfig, updates: usize) -> usize {
    if config.noise_samples == 0 {
        usize::MAX
    } else {
        updates.div_ceil(config.noise_samples).max(1)
    }
}

/// Runs delayed SGD.
pub fn run(problem: &QuadraticProblem, schedule: &DelaySchedule, config: &RunConfig) -> Result<Trajectory> {
    run_observed(problem, schedule, config, |_, _| Ok(()))
}

/// Like [`run`], invoking `observer(t, w_t)` at every checkpoint.
pub fn run_observed(
    problem: &QuadraticProblem,
    schedule: &DelaySchedule,
    config: &RunConfig,
    observer: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<Trajectory> {
    let mut src = SeededIndices(ChaCha8Rng::seed_from_u64(config.sampler_seed));
    run_inner(problem, schedule, config, &mut src, observer)
}

/// Runs with an explicit index sequence of length `(T - D) * batch_size`.
pub fn run_replay(
    problem: &QuadraticProblem,
    schedule: &DelaySchedule,
    config: &RunConfig,
    indices: &[usize],
) -> Result<Trajectory> {
    let mut src = ReplayIndices { seq: indices, pos: 0 };
    run_inner(problem, schedule, config, &mut src, |_, _| Ok(()))
}

fn run_inner(
    problem: &QuadraticProblem,
    schedule: &DelaySchedule,
    config: &RunConfig,
    src: &mut dyn IndexSource,
    mut observer: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<Trajectory> {
    let dim = problem.dim();
    config.validate(schedule, dim)?;
    let n = problem.n();
    let depth = schedule.max_delay();
    let t_total = config.iters;
    let stride = config.stride();
    let noise_every = noise_stride(config, t_total - depth);

    let w0 = config.initial(dim);
    let mut history = History::new(&w0, depth);
    let mut delays = schedule.sampler();

    let mut traj = Trajectory {
        schedule: *schedule,
        initial_loss: problem.full_loss(&w0)?,
        checkpoints: Vec::new(),
        iterates: Vec::new(),
        final_w: Vec::new(),
        noise: NoiseStats::default(),
        drift_max: schedule.is_random().then_some(0.0),
        delay_counts: vec![0; depth + 1],
        index_digest: FNV_OFFSET,
    };

    // checkpoints that fall inside the initialization window
    for t in (stride..=depth.min(t_total)).step_by(stride) {
        record_checkpoint(problem, config, &mut traj, &mut observer, t, &w0)?;
    }

    let mut g = vec![0.0; dim];
    let mut full = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    let mut batch = vec![0usize; config.batch_size];
    let (mut noise_sum, mut noise_sq) = (0.0, 0.0);

    for t in depth..t_total {
        let tau_t = delays.next();
        traj.delay_counts[tau_t] += 1;
        if !config.full_batch {
            draw_batch(src, n, &mut batch, &mut traj.index_digest)?;
        }
        let stale = history.get(t - tau_t);
        batch_gradient(problem, stale, &batch, config.full_batch, &mut g);

        if (t - depth) % noise_every == 0 && traj.noise.count < config.noise_samples {
            problem.full_gradient_into(stale, &mut full);
            let xi = g.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            noise_sum += xi;
            noise_sq += xi * xi;
            traj.noise.count += 1;
            if let Some(drift) = traj.drift_max.as_mut() {
                let diff: Vec<f64> = stale.iter().zip(history.get(t - depth)).map(|(a, b)| a - b).collect();
                *drift = drift.max(norm(&problem.apply(&diff)?));
            }
        }

        let cur = history.get(t);
        for ((nx, c), gi) in next.iter_mut().zip(cur).zip(&g) {
            *nx = c - config.eta * gi;
        }
        let nrm = norm(&next);
        if !nrm.is_finite() || nrm > DIVERGENCE_NORM {
            return Err(Error::Diverged { iteration: t + 1 });
        }
        history.put(t + 1, &mut next);

        if (t + 1) % stride == 0 {
            let w = history.get(t + 1).to_vec();
            record_checkpoint(problem, config, &mut traj, &mut observer, t + 1, &w)?;
        }
    }

    let c = traj.noise.count as f64;
    if c > 0.0 {
        traj.noise.mean = noise_sum / c;
        if c > 1.0 {
            let var = ((noise_sq - noise_sum * noise_sum / c) / (c - 1.0)).max(0.0);
            traj.noise.std_err = (var / c).sqrt();
        }
    }
    traj.final_w = history.get(t_total).to_vec();
    Ok(traj)
}

fn record_checkpoint(
    problem: &QuadraticProblem,
    config: &RunConfig,
    traj: &mut Trajectory,
    observer: &mut impl FnMut(usize, &[f64]) -> Result<()>,
    t: usize,
    w: &[f64],
) -> Result<()> {
    traj.checkpoints.push(Checkpoint { t, train_loss: problem.full_loss(w)? });
    if config.store_iterates {
        traj.iterates.push((t, w.to_vec()));
    }
    observer(t, w)
}

/// Test loss minus train loss, both the plain mean of `0.5 (x^T w - y)^2`
/// (ridge excluded on both sides).
pub fn generalization_error(train: &QuadraticProblem, test: &Dataset, w: &[f64]) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if test.dim() != train.dim() {
        return Err(Error::DimensionMismatch { expected: train.dim(), got: test.dim() });
    }
    Ok(test.mean_loss(w)? - train.data_loss(w)?)
}

// ---------------------------------------------------------------------------
// Coupled runs on neighbouring datasets

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    pub t: usize,
    /// `|e_t|`, `e_t = w_t - w'_t`
    pub e_norm: f64,
    /// `|sqrt(A) e_t|` with `A` of `S` (plus ridge); explicit regime only.
    pub e_weighted: Option<f64>,
    /// `|s_t|`, `s_t = w_t + w'_t`
    pub s_norm: f64,
    pub s_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinOutcome {
    pub replaced_index: usize,
    pub records: Vec<TwinRecord>,
    pub final_w: Vec<f64>,
    pub final_w_prime: Vec<f64>,
    /// First iteration whose minibatch contained the replaced index.
    pub first_hit: Option<usize>,
    /// `f(w'_T; z_i) - f(w_T; z_i)` with `z_i` the original sample.
    pub loss_gap: f64,
    pub index_digest: u64,
}

impl TwinOutcome {
    pub fn final_e(&self) -> Vec<f64> {
        self.final_w.iter().zip(&self.final_w_prime).map(|(a, b)| a - b).collect()
    }
}

/// Runs delayed SGD on `S` and on `S^(i)` (sample `i` replaced) with the same
/// index sequence and the same delay sequence.
pub fn twin_run(
    problem: &QuadraticProblem,
    replaced_index: usize,
    replacement: &Sample,
    schedule: &DelaySchedule,
    config: &RunConfig,
) -> Result<TwinOutcome> {
    let mut src = SeededIndices(ChaCha8Rng::seed_from_u64(config.sampler_seed));
    twin_inner(problem, replaced_index, replacement, schedule, config, &mut src)
}

/// [`twin_run`] with an explicit index sequence of length `(T - D) * batch_size`.
pub fn twin_run_replay(
    problem: &QuadraticProblem,
    replaced_index: usize,
    replacement: &Sample,
    schedule: &DelaySchedule,
    config: &RunConfig,
    indices: &[usize],
) -> Result<TwinOutcome> {
    let mut src = ReplayIndices { seq: indices, pos: 0 };
    twin_inner(problem, replaced_index, replacement, schedule, config, &mut src)
}

fn twin_inner(
    problem: &QuadraticProblem,
    replaced_index: usize,
    replacement: &Sample,
    schedule: &DelaySchedule,
    config: &RunConfig,
    src: &mut dyn IndexSource,
) -> Result<TwinOutcome> {
    let dim = problem.dim();
    config.validate(schedule, dim)?;
    let original = problem.dataset().sample(replaced_index)?.clone();
    let neighbour = problem.dataset().with_replaced(replaced_index, replacement.clone())?;
    let problem_prime = QuadraticProblem::new(std::sync::Arc::new(neighbour), problem.ridge())?;

    let n = problem.n();
    let depth = schedule.max_delay();
    let stride = config.stride();
    let weighted = problem.is_explicit();

    let w0 = config.initial(dim);
    let mut hist = History::new(&w0, depth);
    let mut hist_p = History::new(&w0, depth);
    let mut delays = schedule.sampler();

    let mut out = TwinOutcome {
        replaced_index,
        records: Vec::new(),
        final_w: Vec::new(),
        final_w_prime: Vec::new(),
        first_hit: None,
        loss_gap: 0.0,
        index_digest: FNV_OFFSET,
    };

    let record = |t: usize, w: &[f64], wp: &[f64]| -> Result<TwinRecord> {
        let e: Vec<f64> = w.iter().zip(wp).map(|(a, b)| a - b).collect();
        let s: Vec<f64> = w.iter().zip(wp).map(|(a, b)| a + b).collect();
        Ok(TwinRecord {
            t,
            e_norm: norm(&e),
            e_weighted: if weighted { Some(problem.quad_form(&e)?.sqrt()) } else { None },
            s_norm: norm(&s),
            s_weighted: if weighted { Some(problem.quad_form(&s)?.sqrt()) } else { None },
        })
    };
    for t in (stride..=depth).step_by(stride) {
        out.records.push(record(t, &w0, &w0)?);
    }

    let mut g = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    let mut next_p = vec![0.0; dim];
    let mut batch = vec![0usize; config.batch_size];

    for t in depth..config.iters {
        let tau_t = delays.next();
        if !config.full_batch {
            draw_batch(src, n, &mut batch, &mut out.index_digest)?;
            if out.first_hit.is_none() && batch.contains(&replaced_index) {
                out.first_hit = Some(t);
            }
        } else if out.first_hit.is_none() {
            out.first_hit = Some(t);
        }
        batch_gradient(problem, hist.get(t - tau_t), &batch, config.full_batch, &mut g);
        batch_gradient(&problem_prime, hist_p.get(t - tau_t), &batch, config.full_batch, &mut gp);

        for (((nx, c), gi), (nxp, (cp, gpi))) in next
            .iter_mut()
            .zip(hist.get(t))
            .zip(&g)
            .zip(next_p.iter_mut().zip(hist_p.get(t).iter().zip(&gp)))
        {
            *nx = c - config.eta * gi;
            *nxp = cp - config.eta * gpi;
        }
        let (a, b) = (norm(&next), norm(&next_p));
        if !(a.is_finite() && b.is_finite()) || a.max(b) > DIVERGENCE_NORM {
            return Err(Error::Diverged { iteration: t + 1 });
        }
        hist.put(t + 1, &mut next);
        hist_p.put(t + 1, &mut next_p);

        if (t + 1) % stride == 0 {
            out.records.push(record(t + 1, hist.get(t + 1), hist_p.get(t + 1))?);
        }
    }

    out.final_w = hist.get(config.iters).to_vec();
    out.final_w_prime = hist_p.get(config.iters).to_vec();
    out.loss_gap = original.loss(&out.final_w_prime) - original.loss(&out.final_w);
    Ok(out)
}
