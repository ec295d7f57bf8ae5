//! Diffusion with shifted-mean noise.
//!
//! The forward process drifts images toward `N(μ, σ²I)` rather than
//! `N(0, I)`:
//!
//! ```text
//! x_t = √ᾱ_t·x_0 + (1 − √ᾱ_t)·μ + σ·√(1 − ᾱ_t)·ε
//! ```
//!
//! With `μ = σ = 0.5` the noise lives in the same range as the six-channel
//! image encoding. Timesteps run `1..=T`; `ᾱ_0 = 1` so `t = 0` means clean.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::rng::{normal_tensor, Stream};
use crate::tape::{ElementwiseAffine, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaShape {
    /// β linear in t between the endpoints.
    Linear,
    /// √β linear in t (the latent-diffusion variant).
    ScaledLinear,
}

impl BetaShape {
    pub fn as_str(self) -> &'static str {
        match self {
            BetaShape::Linear => "linear",
            BetaShape::ScaledLinear => "scaled-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaShape::Linear),
            "scaled-linear" | "scaled_linear" => Ok(BetaShape::ScaledLinear),
            other => Err(Error::Config(format!(
                "unknown beta schedule '{other}' (expected linear or scaled-linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mu: f64,
    pub sigma: f64,
    pub shape: BetaShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            mu: 0.5,
            sigma: 0.5,
            shape: BetaShape::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    /// `betas[t - 1]` is β_t.
    betas: Vec<f64>,
    /// `alpha_bars[t]` is ᾱ_t, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

/// Linear β schedule between the given endpoints.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, mu: f64, sigma: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(ScheduleConfig {
        steps,
        beta_start,
        beta_end,
        mu,
        sigma,
        shape: BetaShape::Linear,
    })
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            sigma,
            ..
        } = config;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        if !(sigma > 0.0) || !config.mu.is_finite() {
            return Err(Error::Config(format!("need finite mu and sigma > 0, got {} and {sigma}", config.mu)));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                match config.shape {
                    BetaShape::Linear => beta_start + (beta_end - beta_start) * frac,
                    BetaShape::ScaledLinear => {
                        let r = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac;
                        r * r
                    }
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(DiffusionSchedule {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn mu(&self) -> f64 {
        self.config.mu
    }

    pub fn sigma(&self) -> f64 {
        self.config.sigma
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return Err(Error::Config(format!(
                "timestep {t} outside {}..={}",
                if allow_zero { 0 } else { 1 },
                self.steps()
            )));
        }
        Ok(())
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, false)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, true)?;
        Ok(self.alpha_bars[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Whether the terminal marginal is close to pure noise (ᾱ_T < 0.01).
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bars[self.steps()] < 0.01
    }

    /// Mean and variance of `x_T` for a clean pixel at `μ`: `(μ, σ²(1 − ᾱ_T))`.
    pub fn terminal_statistics(&self) -> (f64, f64) {
        let ab = self.alpha_bars[self.steps()];
        (self.mu(), self.sigma() * self.sigma() * (1.0 - ab))
    }

    /// Plain-text table of `(t, β_t, α_t, ᾱ_t)` followed by the terminal statistics.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# shape={} T={} mu={} sigma={}", self.config.shape.as_str(), self.steps(), self.mu(), self.sigma()).unwrap();
        writeln!(out, "t\tbeta\talpha\talpha_bar").unwrap();
        for t in 1..=self.steps() {
            let b = self.betas[t - 1];
            writeln!(out, "{t}\t{b:.17e}\t{:.17e}\t{:.17e}", 1.0 - b, self.alpha_bars[t]).unwrap();
        }
        let (m, v) = self.terminal_statistics();
        writeln!(out, "# terminal mean={m} variance={v:.17e}").unwrap();
        out
    }
}

/// Coefficients of an affine update `a·u + b·v + c·μ (+ d·noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCoefficients {
    /// Weight of the first state input (`x_{t-1}`, `x_0` or `x_t`, per operation).
    pub first: f64,
    /// Weight of the second state input, zero for single-input maps.
    pub second: f64,
    pub mu: f64,
    /// Standard deviation multiplying unit noise.
    pub noise_std: f64,
}

impl MeanCoefficients {
    /// `(first + second) + mu`, the sum that equals 1 for every map here.
    pub fn mean_sum(&self) -> f64 {
        (self.first + self.second) + self.mu
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Coefficients of one forward step `q(x_t | x_{t-1})`.
pub fn q_step_coefficients(t: usize, s: &DiffusionSchedule) -> Result<MeanCoefficients> {
    let a = s.alpha(t)?;
    let sa = a.sqrt();
    Ok(MeanCoefficients {
        first: sa,
        second: 0.0,
        mu: 1.0 - sa,
        noise_std: s.sigma() * (1.0 - a).sqrt(),
    })
}

/// One forward step: `√α_t·x + (1 − √α_t)·μ + σ√(1 − α_t)·noise`.
pub fn q_step(x_prev: &Tensor, t: usize, s: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    same_shape(x_prev, noise, "q_step")?;
    let c = q_step_coefficients(t, s)?;
    let mu = s.mu();
    x_prev.zip_map(noise, "q_step", |x, n| (c.first * x + c.mu * mu) + c.noise_std * n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub x_t: Tensor,
    pub t: usize,
}

/// Coefficients of the closed-form marginal `q(x_t | x_0)`.
pub fn q_sample_coefficients(t: usize, s: &DiffusionSchedule) -> Result<MeanCoefficients> {
    let ab = s.alpha_bar(t)?;
    let sab = ab.sqrt();
    Ok(MeanCoefficients {
        first: sab,
        second: 0.0,
        mu: 1.0 - sab,
        noise_std: s.sigma() * (1.0 - ab).sqrt(),
    })
}

/// Sample `x_t` directly from `x_0`. `t = 0` returns `x_0`.
pub fn q_sample(x0: &Tensor, t: usize, s: &DiffusionSchedule, noise: &Tensor) -> Result<NoisyState> {
    same_shape(x0, noise, "q_sample")?;
    let c = q_sample_coefficients(t, s)?;
    let mu = s.mu();
    let x_t = x0.zip_map(noise, "q_sample", |x, n| (c.first * x + c.mu * mu) + c.noise_std * n)?;
    Ok(NoisyState { x_t, t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conversion {
    X0ToEps,
    EpsToX0,
}

/// `x_0 = ((x_t − (1 − √ᾱ_t)μ) − σ√(1 − ᾱ_t)·ε) / √ᾱ_t` as an elementwise map of `(x_t, ε)`.
#[derive(Debug, Clone, Copy)]
pub struct EpsToX0Map {
    sab: f64,
    omsab: f64,
    sd: f64,
    mu: f64,
}

impl EpsToX0Map {
    pub fn new(s: &DiffusionSchedule, t: usize) -> Result<Self> {
        let ab = s.alpha_bar(t)?;
        let sab = ab.sqrt();
        if sab == 0.0 {
            return Err(Error::Degenerate(format!("sqrt(alpha_bar) vanishes at t = {t}")));
        }
        Ok(EpsToX0Map {
            sab,
            omsab: 1.0 - sab,
            sd: s.sigma() * (1.0 - ab).sqrt(),
            mu: s.mu(),
        })
    }
}

impl ElementwiseAffine for EpsToX0Map {
    fn eval(&self, x_t: f64, eps: f64) -> f64 {
        ((x_t - self.omsab * self.mu) - self.sd * eps) / self.sab
    }

    fn partials(&self) -> (f64, f64) {
        (1.0 / self.sab, -self.sd / self.sab)
    }
}

/// `ε = ((x_t − √ᾱ_t·x_0) − (1 − √ᾱ_t)μ) / (σ√(1 − ᾱ_t))` as a map of `(x_t, x_0)`.
#[derive(Debug, Clone, Copy)]
pub struct X0ToEpsMap {
    sab: f64,
    omsab: f64,
    sd: f64,
    mu: f64,
}

impl X0ToEpsMap {
    pub fn new(s: &DiffusionSchedule, t: usize) -> Result<Self> {
        let ab = s.alpha_bar(t)?;
        let sab = ab.sqrt();
        let sd = s.sigma() * (1.0 - ab).sqrt();
        if sd == 0.0 {
            return Err(Error::Degenerate(format!(
                "noise scale vanishes at t = {t}; epsilon is undefined"
            )));
        }
        Ok(X0ToEpsMap {
            sab,
            omsab: 1.0 - sab,
            sd,
            mu: s.mu(),
        })
    }
}

impl ElementwiseAffine for X0ToEpsMap {
    fn eval(&self, x_t: f64, x0: f64) -> f64 {
        ((x_t - self.sab * x0) - self.omsab * self.mu) / self.sd
    }

    fn partials(&self) -> (f64, f64) {
        (1.0 / self.sd, -self.sab / self.sd)
    }
}

/// Solve the reparameterized marginal for `ε` or `x_0` given `x_t` and the other.
pub fn convert_target(x_t: &Tensor, t: usize, s: &DiffusionSchedule, value: &Tensor, kind: Conversion) -> Result<Tensor> {
    same_shape(x_t, value, "convert_target")?;
    match kind {
        Conversion::X0ToEps => {
            let m = X0ToEpsMap::new(s, t)?;
            x_t.zip_map(value, "convert_target", |a, b| m.eval(a, b))
        }
        Conversion::EpsToX0 => {
            let m = EpsToX0Map::new(s, t)?;
            x_t.zip_map(value, "convert_target", |a, b| m.eval(a, b))
        }
    }
}

/// Coefficients of the posterior `q(x_{t-1} | x_t, x_0)`: `first` weights `x_t`, `second` weights `x_0`.
///
/// The μ coefficient is `1 − (c_xt + c_x0)`, evaluated so that
/// [`MeanCoefficients::mean_sum`] is exactly 1.
pub fn posterior_coefficients(t: usize, s: &DiffusionSchedule) -> Result<MeanCoefficients> {
    let beta = s.beta(t)?;
    let alpha = 1.0 - beta;
    let ab = s.alpha_bar(t)?;
    let ab_prev = s.alpha_bar(t - 1)?;
    let denom = 1.0 - ab;
    let c_xt = alpha.sqrt() * (1.0 - ab_prev) / denom;
    let c_x0 = ab_prev.sqrt() * beta / denom;
    let variance = beta * (1.0 - ab_prev) * s.sigma() * s.sigma() / denom;
    Ok(MeanCoefficients {
        first: c_xt,
        second: c_x0,
        mu: 1.0 - (c_xt + c_x0),
        noise_std: variance.max(0.0).sqrt(),
    })
}

/// Ancestral step from the posterior: mean + √variance·noise.
pub fn posterior_step(x_t: &Tensor, x0_hat: &Tensor, t: usize, s: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    same_shape(x_t, x0_hat, "posterior_step")?;
    same_shape(x_t, noise, "posterior_step")?;
    let c = posterior_coefficients(t, s)?;
    let mu = s.mu();
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .zip(noise.data())
        .map(|((&xt, &x0), &n)| ((c.first * xt + c.second * x0) + c.mu * mu) + c.noise_std * n)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// The deterministic part of a DDIM update as a map of `(x_t, x̂_0)`.
#[derive(Debug, Clone, Copy)]
pub struct DdimMap {
    sab_t: f64,
    omsab_t: f64,
    sd_t: f64,
    sab_prev: f64,
    omsab_prev: f64,
    sd_prev: f64,
    mu: f64,
    /// σ·σ_t, the scale of fresh noise (zero when η = 0).
    pub fresh_noise_std: f64,
}

impl DdimMap {
    pub fn new(s: &DiffusionSchedule, t: usize, t_prev: usize, eta: f64) -> Result<Self> {
        if t_prev >= t {
            return Err(Error::Config(format!("DDIM needs t_prev < t, got {t_prev} >= {t}")));
        }
        if !(eta >= 0.0) {
            return Err(Error::Config(format!("eta must be nonnegative, got {eta}")));
        }
        let ab_t = s.alpha_bar(t)?;
        let ab_p = s.alpha_bar(t_prev)?;
        let sd_t = s.sigma() * (1.0 - ab_t).sqrt();
        if sd_t == 0.0 {
            return Err(Error::Degenerate(format!("noise scale vanishes at t = {t}")));
        }
        let sigma_t = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
        let rest = 1.0 - ab_p - sigma_t * sigma_t;
        if rest < 0.0 {
            return Err(Error::Config(format!(
                "sigma_t^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
                sigma_t * sigma_t,
                1.0 - ab_p
            )));
        }
        let sab_t = ab_t.sqrt();
        let sab_prev = ab_p.sqrt();
        Ok(DdimMap {
            sab_t,
            omsab_t: 1.0 - sab_t,
            sd_t,
            sab_prev,
            omsab_prev: 1.0 - sab_prev,
            sd_prev: s.sigma() * rest.sqrt(),
            mu: s.mu(),
            fresh_noise_std: s.sigma() * sigma_t,
        })
    }

    /// Effective weights of `x_t`, `x̂_0` and μ after eliminating ε̂.
    pub fn coefficients(&self) -> MeanCoefficients {
        let r = self.sd_prev / self.sd_t;
        MeanCoefficients {
            first: r,
            second: self.sab_prev - r * self.sab_t,
            mu: self.omsab_prev - r * self.omsab_t,
            noise_std: self.fresh_noise_std,
        }
    }
}

impl ElementwiseAffine for DdimMap {
    fn eval(&self, x_t: f64, x0: f64) -> f64 {
        let eps = ((x_t - self.sab_t * x0) - self.omsab_t * self.mu) / self.sd_t;
        (self.sab_prev * x0 + self.omsab_prev * self.mu) + self.sd_prev * eps
    }

    fn partials(&self) -> (f64, f64) {
        let r = self.sd_prev / self.sd_t;
        (r, self.sab_prev - r * self.sab_t)
    }
}

/// One DDIM update from `t` to `t_prev`. `noise` is required when `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &DiffusionSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    same_shape(x_t, x0_hat, "ddim_step")?;
    let map = DdimMap::new(s, t, t_prev, eta)?;
    let out = x_t.zip_map(x0_hat, "ddim_step", |a, b| map.eval(a, b))?;
    if map.fresh_noise_std == 0.0 {
        return Ok(out);
    }
    let noise = noise.ok_or_else(|| Error::Config("eta > 0 needs a noise tensor".into()))?;
    same_shape(x_t, noise, "ddim_step")?;
    out.zip_map(noise, "ddim_step", |a, n| a + map.fresh_noise_std * n)
}

/// Evenly spaced DDIM timesteps from `T` downward, e.g. `[1000, 750, 500, 250]` for 4 steps.
/// The final hop goes to `t = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("sampling steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..steps)
        .map(|i| ((steps - i) as f64 * total as f64 / steps as f64).round() as usize)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The denoiser outputs the encoded clean image.
    X0,
    /// The denoiser outputs the unit noise ε.
    Epsilon,
}

impl Prediction {
    pub fn as_str(self) -> &'static str {
        match self {
            Prediction::X0 => "x0",
            Prediction::Epsilon => "eps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Prediction::X0),
            "eps" | "epsilon" => Ok(Prediction::Epsilon),
            other => Err(Error::Config(format!("unknown prediction target '{other}' (x0 or eps)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub eta: f64,
}

/// Initial state `x_T ~ N(μ, σ²I)` keyed by `seed`.
pub fn initial_noise(s: &DiffusionSchedule, seed: u64, shape: &[usize]) -> Tensor {
    let (mu, sigma) = (s.mu(), s.sigma());
    normal_tensor(seed, Stream::InitialNoise, shape).map(|z| mu + sigma * z)
}

/// DDIM sampling recorded on the context's tape.
///
/// `denoise(ctx, x_t, t)` must return the network prediction for `x_t`. Returns
/// the node of every state, from `x_T` to the final `x_0`.
pub fn sample_loop<F>(
    ctx: &mut Ctx,
    s: &DiffusionSchedule,
    x_init: NodeId,
    config: SamplerConfig,
    prediction: Prediction,
    mut denoise: F,
) -> Result<Vec<NodeId>>
where
    F: FnMut(&mut Ctx, NodeId, usize) -> Result<NodeId>,
{
    let ts = ddim_timesteps(s.steps(), config.steps)?;
    let mut x = x_init;
    let mut trajectory = vec![x];
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let pred = denoise(ctx, x, t)?;
        if ctx.tape.shape(pred) != ctx.tape.shape(x) {
            return Err(Error::shape(
                "sample_loop",
                format!("model output {:?} for state {:?}", ctx.tape.shape(pred), ctx.tape.shape(x)),
            ));
        }
        let x0 = match prediction {
            Prediction::X0 => pred,
            Prediction::Epsilon => ctx.tape.affine2(x, pred, Arc::new(EpsToX0Map::new(s, t)?))?,
        };
        let map = DdimMap::new(s, t, t_prev, config.eta)?;
        let fresh = map.fresh_noise_std;
        x = ctx.tape.affine2(x, x0, Arc::new(map))?;
        if fresh > 0.0 {
            let z = normal_tensor(config.seed, Stream::SamplerStep(i as u64), ctx.tape.shape(x)).scale(fresh);
            let z = ctx.tape.constant(z);
            x = ctx.tape.add(x, z)?;
        }
        trajectory.push(x);
    }
    Ok(trajectory)
}
