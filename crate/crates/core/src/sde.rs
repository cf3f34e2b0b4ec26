//! Euler-Maruyama discretization of `dT = −∇V(T) dt + √s dB`, trajectory
//! averaging over chains, exponential decay fitting, and the Adam update.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, usage, Error, Result};
use crate::linalg::{dot, norm2};
use crate::probe::{stream_rng, Potential};

/// Halvings of the step size allowed after a divergence.
pub const MAX_STEP_HALVINGS: usize = 5;

/// Consecutive increasing records that trigger the stability warning.
pub const STABILITY_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    /// Temperature; zero reduces the scheme to gradient descent.
    pub s: f64,
    /// Step size.
    pub h: f64,
    pub steps: usize,
    pub seed: u64,
    pub record_every: usize,
    pub n_chains: usize,
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(domain(format!(
                "temperature must be nonnegative, got {}",
                self.s
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(domain(format!(
                "step size must be positive, got {}",
                self.h
            )));
        }
        if self.record_every == 0 || self.n_chains == 0 {
            return Err(usage("record_every and n_chains must be at least 1"));
        }
        Ok(())
    }
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            s: 1e-2,
            h: 1e-3,
            steps: 10_000,
            seed: 0,
            record_every: 10,
            n_chains: 32,
        }
    }
}

/// One Euler-Maruyama step `T' = T − h g + √(s h) ξ`.
pub fn em_step<R: Rng + ?Sized>(
    t: &[f64],
    grad: &[f64],
    s: f64,
    h: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if t.len() != grad.len() {
        return Err(crate::error::shape("point and gradient lengths differ"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(domain("non-finite gradient"));
    }
    let noise = libm::sqrt(s * h);
    let next: Vec<f64> = t
        .iter()
        .zip(grad)
        .map(|(&ti, &gi)| {
            let xi: f64 = if noise > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            ti - h * gi + noise * xi
        })
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            reason: String::from("non-finite state after step"),
            last_stable: t.to_vec(),
        });
    }
    Ok(next)
}

/// Initial law `p₀` of the chains.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSampler {
    Point(Vec<f64>),
    /// Independent normal coordinates around `mean`.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
}

impl InitSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitSampler::Point(p) => p.len(),
            InitSampler::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitSampler::Point(p) => p.clone(),
            InitSampler::Gaussian { mean, std } => mean
                .iter()
                .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }
}

/// One recorded state of a single chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainRecord {
    pub step: usize,
    pub v: f64,
    pub grad_norm: f64,
    pub t_norm: f64,
}

/// A row of the chain-averaged trajectory. `time_s` is the SDE time
/// `step · h`, so output stays reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub time_s: f64,
    pub v: f64,
    pub grad_norm: f64,
    pub t_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Standard error of the chain mean of `V` at each row.
    pub v_stderr: Vec<f64>,
    pub n_chains: usize,
    /// Step size actually used after any halvings.
    pub h: f64,
    pub halvings: usize,
    /// Set when the averaged `V` rose over [`STABILITY_WINDOW`] consecutive records.
    pub stability_warning: bool,
    /// Final state of every chain.
    pub final_states: Vec<Vec<f64>>,
    /// Set when the run still diverged after the last step halving; the
    /// rows then stop at the last record every chain reached.
    pub divergence: Option<Error>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time_s).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.v).collect()
    }
}

/// Output of one chain. A diverged chain keeps the records taken before the
/// failure and the last finite state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub records: Vec<ChainRecord>,
    pub final_state: Vec<f64>,
    pub divergence: Option<Error>,
}

/// Runs a single chain; the chain's noise and initial draw come from stream
/// `chain` of `config.seed`.
pub fn run_chain<P: Potential + ?Sized>(
    potential: &P,
    init: &InitSampler,
    config: &SdeConfig,
    chain: usize,
) -> Result<ChainRun> {
    let mut rng = stream_rng(config.seed, chain as u64);
    let mut t = init.sample(&mut rng);
    let mut records = Vec::with_capacity(config.steps / config.record_every + 1);
    let diverged = |records, step, reason: &str, last_stable: Vec<f64>| ChainRun {
        records,
        final_state: last_stable.clone(),
        divergence: Some(Error::Divergence {
            step,
            reason: String::from(reason),
            last_stable,
        }),
    };
    let mut grad = potential.gradient(&t)?;
    for step in 0..=config.steps {
        if step % config.record_every == 0 {
            let v = potential.value(&t)?;
            let gn = norm2(&grad);
            if !(v.is_finite() && gn.is_finite()) {
                return Ok(diverged(
                    records,
                    step,
                    "non-finite potential or gradient",
                    t,
                ));
            }
            records.push(ChainRecord {
                step,
                v,
                grad_norm: gn,
                t_norm: norm2(&t),
            });
        }
        if step == config.steps {
            break;
        }
        match em_step(&t, &grad, config.s, config.h, &mut rng) {
            Ok(next) => t = next,
            Err(Error::Divergence {
                reason,
                last_stable,
                ..
            }) => {
                return Ok(diverged(records, step, &reason, last_stable));
            }
            Err(e) => return Err(e),
        }
        grad = potential.gradient(&t)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Ok(diverged(records, step + 1, "non-finite gradient", t));
        }
    }
    Ok(ChainRun {
        records,
        final_state: t,
        divergence: None,
    })
}

/// Strategy for running independent chains; results must come back in chain
/// order.
pub trait ChainExecutor {
    fn run_chains(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<ChainRun> + Sync),
    ) -> Vec<Result<ChainRun>>;
}

/// Runs chains one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialExecutor;

impl ChainExecutor for SerialExecutor {
    fn run_chains(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<ChainRun> + Sync),
    ) -> Vec<Result<ChainRun>> {
        (0..n).map(job).collect()
    }
}

pub fn run_sde<P: Potential + ?Sized>(
    potential: &P,
    init: &InitSampler,
    config: &SdeConfig,
) -> Result<Trajectory> {
    run_sde_with(potential, init, config, &SerialExecutor)
}

/// Runs `config.n_chains` chains and averages them record by record.
///
/// A divergence in any chain halves `h` (doubling the step count so the time
/// horizon is kept) and restarts every chain, at most [`MAX_STEP_HALVINGS`]
/// times. If the last attempt still diverges, the average over the records
/// every chain completed is returned with [`Trajectory::divergence`] set.
pub fn run_sde_with<P: Potential + ?Sized, E: ChainExecutor + ?Sized>(
    potential: &P,
    init: &InitSampler,
    config: &SdeConfig,
    executor: &E,
) -> Result<Trajectory> {
    config.validate()?;
    if init.dim() != potential.dim() {
        return Err(crate::error::shape(format!(
            "initial law has dimension {} but the potential has {}",
            init.dim(),
            potential.dim()
        )));
    }
    let mut cfg = *config;
    let mut halvings = 0;
    loop {
        let job = |chain: usize| run_chain(potential, init, &cfg, chain);
        let chains = executor
            .run_chains(cfg.n_chains, &job)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        // first failure in chain order, so the report does not depend on scheduling
        let failure = chains.iter().find_map(|c| c.divergence.clone());
        match failure {
            None => return Ok(average_chains(&chains, &cfg, halvings, None)),
            Some(e) if halvings >= MAX_STEP_HALVINGS => {
                return Ok(average_chains(&chains, &cfg, halvings, Some(e)))
            }
            Some(_) => {
                halvings += 1;
                cfg.h *= 0.5;
                cfg.steps *= 2;
                cfg.record_every *= 2;
            }
        }
    }
}

fn average_chains(
    chains: &[ChainRun],
    cfg: &SdeConfig,
    halvings: usize,
    divergence: Option<Error>,
) -> Trajectory {
    let n = chains.len() as f64;
    let len = chains.iter().map(|c| c.records.len()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    let mut v_stderr = Vec::with_capacity(len);
    for i in 0..len {
        let step = chains[0].records[i].step;
        let mut v = 0.0;
        let mut g = 0.0;
        let mut t = 0.0;
        for c in chains {
            v += c.records[i].v;
            g += c.records[i].grad_norm;
            t += c.records[i].t_norm;
        }
        let mean = v / n;
        let var = if chains.len() > 1 {
            chains
                .iter()
                .map(|c| (c.records[i].v - mean) * (c.records[i].v - mean))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        rows.push(TrajectoryRow {
            step,
            time_s: step as f64 * cfg.h,
            v: mean,
            grad_norm: g / n,
            t_norm: t / n,
        });
        v_stderr.push(libm::sqrt(var / n));
    }
    let mut run = 0;
    let mut stability_warning = false;
    for w in rows.windows(2) {
        if w[1].v > w[0].v {
            run += 1;
            if run >= STABILITY_WINDOW {
                stability_warning = true;
            }
        } else {
            run = 0;
        }
    }
    Trajectory {
        rows,
        v_stderr,
        n_chains: chains.len(),
        h: cfg.h,
        halvings,
        stability_warning,
        final_states: chains.iter().map(|c| c.final_state.clone()).collect(),
        divergence,
    }
}

/// Centered moving average with window `w` (shrinking at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Decay fit

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub lambda_hat: f64,
    /// Fitted plateau `ε̂` of the excess `V̄ − v*`.
    pub asymptote_hat: f64,
    /// Amplitude `D̂` of the decaying part.
    pub amplitude_hat: f64,
    pub r2: f64,
}

/// Minimum R² for a fit to count as a decaying segment.
pub const MIN_FIT_R2: f64 = 0.5;

/// Fits `V̄(t) − v* ≈ ε + D e^{−λ t}` by least squares.
///
/// For fixed `λ` the model is linear in `(ε, D)`, so those are solved in
/// closed form and only `λ` is searched: a log-spaced scan followed by
/// golden-section refinement. The reported R² is for the excess in the
/// original (not logarithmic) scale.
pub fn fit_decay(times: &[f64], values: &[f64], v_star: f64) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(crate::error::shape("times and values lengths differ"));
    }
    if times.len() < 4 {
        return Err(usage("decay fit needs at least four records"));
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(domain("non-finite trajectory value"));
    }
    let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if v_star > v_min + 1e-12 * libm::fabs(v_min).max(1.0) {
        return Err(usage(format!(
            "v_star = {v_star} exceeds the smallest recorded value {v_min}"
        )));
    }
    let y: Vec<f64> = values.iter().map(|v| v - v_star).collect();
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(domain("record times must span a positive interval"));
    }
    let ts: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst == 0.0 {
        return Err(Error::FitFailed { r2: 0.0 });
    }

    let lo = libm::log(1e-2 / span);
    let hi = libm::log(1e4 / span);
    let grid = 400;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=grid {
        let ll = lo + (hi - lo) * k as f64 / grid as f64;
        let sse = profile_sse(&ts, &y, libm::exp(ll)).0;
        if sse < best.0 {
            best = (sse, ll);
        }
    }
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let phi = 0.5 * (libm::sqrt(5.0) - 1.0);
    let f = |ll: f64| profile_sse(&ts, &y, libm::exp(ll)).0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let lambda = libm::exp(0.5 * (a + b));
    let (sse, eps, amp) = profile_sse(&ts, &y, lambda);
    let r2 = 1.0 - sse / sst;
    if !(r2 >= MIN_FIT_R2) || !(amp > 0.0) {
        return Err(Error::FitFailed { r2 });
    }
    Ok(DecayFit {
        lambda_hat: lambda,
        asymptote_hat: eps,
        amplitude_hat: amp * libm::exp(lambda * t0),
        r2,
    })
}

/// Least-squares `(ε, D)` for a fixed rate; returns `(SSE, ε, D)`.
fn profile_sse(ts: &[f64], y: &[f64], lambda: f64) -> (f64, f64, f64) {
    let n = ts.len() as f64;
    let mut se = 0.0;
    let mut see = 0.0;
    let mut sy = 0.0;
    let mut sey = 0.0;
    for (&t, &v) in ts.iter().zip(y) {
        let e = libm::exp(-lambda * t);
        se += e;
        see += e * e;
        sy += v;
        sey += e * v;
    }
    let det = n * see - se * se;
    if libm::fabs(det) < 1e-300 {
        return (f64::INFINITY, 0.0, 0.0);
    }
    let eps = (see * sy - se * sey) / det;
    let amp = (n * sey - se * sy) / det;
    let sse = ts
        .iter()
        .zip(y)
        .map(|(&t, &v)| {
            let r = v - eps - amp * libm::exp(-lambda * t);
            r * r
        })
        .sum();
    (sse, eps, amp)
}

// ---------------------------------------------------------------------------
// Infimum proxy

/// Best value found by multi-start gradient descent with Armijo
/// backtracking. The first start is the origin, the rest are standard
/// normal draws. The result is an upper bound on the true infimum.
pub fn estimate_v_star<P: Potential + ?Sized, R: Rng + ?Sized>(
    potential: &P,
    restarts: usize,
    budget: usize,
    rng: &mut R,
) -> Result<f64> {
    if restarts < 8 {
        return Err(usage(format!(
            "estimate_v_star needs at least 8 restarts, got {restarts}"
        )));
    }
    let dim = potential.dim();
    let mut best = f64::INFINITY;
    for k in 0..restarts {
        let mut t: Vec<f64> = if k == 0 {
            vec![0.0; dim]
        } else {
            (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut v = potential.value(&t)?;
        let mut step = 1.0;
        for _ in 0..budget {
            let g = potential.gradient(&t)?;
            let gg = dot(&g, &g);
            if gg < 1e-30 {
                break;
            }
            let mut accepted = false;
            step *= 2.0;
            while step > 1e-20 {
                let trial: Vec<f64> = t.iter().zip(&g).map(|(ti, gi)| ti - step * gi).collect();
                let vt = potential.value(&trial)?;
                if vt.is_finite() && vt <= v - 1e-4 * step * gg {
                    t = trial;
                    v = vt;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if v < best {
            best = v;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// In-place bias-corrected Adam update of `t`.
pub fn adam_step(t: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(t.len(), grad.len());
    assert_eq!(t.len(), state.m.len());
    state.step += 1;
    let b1t = 1.0 - libm::pow(cfg.beta1, state.step as f64);
    let b2t = 1.0 - libm::pow(cfg.beta2, state.step as f64);
    for i in 0..t.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        t[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps_hat);
    }
}
