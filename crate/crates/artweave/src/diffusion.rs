//! Noise schedule, DDIM stepping and inversion, and classifier-free guidance.
//!
//! Timestep convention: math timesteps run `t = 0..=T`, with `t = 0` the
//! clean image. The schedule arrays are 0-indexed slots, so the cumulative
//! product at math timestep `t >= 1` is `alpha_bar[t - 1]` and
//! `alpha_bar_at(0) == 1`. [`forward_noise`] takes a slot index `t` in
//! `[0, T)` and produces the latent whose math timestep is `t + 1`.

use crate::encoders::{ImageEmbedding, TextEmbedding};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;
use crate::util::linspace;

/// Schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Per-step `alpha`, cumulative `alpha_bar`, and stochasticity `sigma` over
/// `T` steps. `sigma` defaults to all zero (deterministic DDIM).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub kind: ScheduleKind,
}

/// Linear: `beta` spaced evenly in `[1e-4, 0.02]`. Cosine: squared-cosine
/// cumulative schedule with offset 0.008 and per-step `beta` capped at 0.999.
pub fn make_schedule(t_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => linspace(1e-4, 0.02, t_steps),
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |t: f64| {
                let x = (t / t_steps as f64 + offset) / (1.0 + offset);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=t_steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sched = NoiseSchedule {
        alpha,
        alpha_bar,
        sigma: vec![0.0; t_steps],
        kind,
    };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// Cumulative product at math timestep `t` in `[0, T]`; `t = 0` gives 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    /// Replace `sigma` with the DDIM family parameterized by `eta`
    /// (`eta = 1` recovers ancestral variances, `eta = 0` is deterministic).
    pub fn with_ddim_sigma(mut self, eta: f64) -> Self {
        for t in 1..=self.steps() {
            let a_t = self.alpha_bar_at(t);
            let a_prev = self.alpha_bar_at(t - 1);
            let v = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
            self.sigma[t - 1] = eta * v.max(0.0).sqrt();
        }
        self
    }

    fn validate(&self) -> Result<()> {
        let t = self.alpha.len();
        if t == 0 || self.alpha_bar.len() != t || self.sigma.len() != t {
            return Err(Error::InvalidConfig("schedule arrays disagree".into()));
        }
        let mut prev = 1.0;
        for &ab in &self.alpha_bar {
            if !(ab > 0.0 && ab <= 1.0) || ab >= prev {
                return Err(Error::InvalidConfig(
                    "alpha_bar must be strictly decreasing in (0, 1]".into(),
                ));
            }
            prev = ab;
        }
        if self.sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// A latent with its math timestep and the seed of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: ImageTensor,
    pub t: usize,
    pub seed: u64,
}

/// Guidance knobs: classifier-free condition scale, semantic-preservation
/// scale of shared attention, and the text-branch weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub condition_scale: f64,
    pub semantic_scale: f64,
    pub text_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            condition_scale: 5.0,
            semantic_scale: 1.0,
            text_scale: 1.0,
        }
    }
}

/// Everything a noise predictor needs besides the latent itself.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub text: TextEmbedding,
    pub image: Option<ImageEmbedding>,
    pub guidance: GuidanceConfig,
}

/// `x = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps` for a slot
/// index `t` in `[0, T)`; the result sits at math timestep `t + 1`.
pub fn forward_noise(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    if t >= sched.steps() {
        return Err(Error::Domain(format!(
            "noise level {t} outside schedule of {} steps",
            sched.steps()
        )));
    }
    if !x0.same_dims(eps) {
        return Err(Error::ShapeMismatch(format!(
            "x0 dims {:?} vs eps dims {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let ab = sched.alpha_bar[t];
    x0.affine_combine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// The clean-image prediction implied by a latent and its noise estimate:
/// `(z_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)`.
pub fn ddim_x0_prediction(
    z_t: &LatentState,
    eps_pred: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    if z_t.t == 0 || z_t.t > sched.steps() {
        return Err(Error::StepUnderflow);
    }
    if !z_t.z.same_dims(eps_pred) {
        return Err(Error::ShapeMismatch("eps_pred dims differ from z".into()));
    }
    let a_t = sched.alpha_bar_at(z_t.t);
    z_t.z
        .affine_combine(1.0 / a_t.sqrt(), eps_pred, -((1.0 - a_t).sqrt()) / a_t.sqrt())
}

/// One reverse step from math timestep `t` to `t - 1`:
/// `z_prev = sqrt(a_prev) * x0_pred + sqrt(1 - a_prev - sigma_t^2) * eps + sigma_t * noise`.
/// With all-zero `sigma` this is the deterministic DDIM update.
pub fn ddim_step(
    z_t: &LatentState,
    eps_pred: &ImageTensor,
    sched: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<LatentState> {
    if z_t.t == 0 {
        return Err(Error::StepUnderflow);
    }
    if z_t.t > sched.steps() {
        return Err(Error::Domain(format!(
            "state timestep {} outside schedule of {} steps",
            z_t.t,
            sched.steps()
        )));
    }
    let t = z_t.t;
    let x0_pred = ddim_x0_prediction(z_t, eps_pred, sched)?;
    let a_prev = sched.alpha_bar_at(t - 1);
    let sigma_t = sched.sigma[t - 1];
    let dir_coeff_sq = 1.0 - a_prev - sigma_t * sigma_t;
    if dir_coeff_sq < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sigma[{t}] = {sigma_t} exceeds the direction budget"
        )));
    }
    let mut z_prev = x0_pred.affine_combine(a_prev.sqrt(), eps_pred, dir_coeff_sq.sqrt())?;
    if sigma_t > 0.0 {
        let noise = noise.ok_or(Error::MissingNoise(t))?;
        z_prev = z_prev.affine_combine(1.0, noise, sigma_t)?;
    }
    Ok(LatentState {
        z: z_prev,
        t: t - 1,
        seed: z_t.seed,
    })
}

/// Run the deterministic update in reverse to lift a clean image onto the
/// noise trajectory `z_0 ... z_T`.
///
/// The naive step (`fixed_point_iters = 0`) evaluates the noise prediction at
/// the current state; each refinement iteration re-evaluates it at the
/// currently predicted next state. The noise function always receives the
/// destination timestep.
pub fn ddim_invert<F>(
    x0: &ImageTensor,
    eps_fn: F,
    cond: &ConditioningBundle,
    sched: &NoiseSchedule,
    fixed_point_iters: usize,
) -> Result<Vec<LatentState>>
where
    F: Fn(&LatentState, &ConditioningBundle) -> Result<ImageTensor>,
{
    if !sched.is_deterministic() {
        return Err(Error::InvalidConfig(
            "DDIM inversion requires an all-zero sigma schedule".into(),
        ));
    }
    let mut trajectory = Vec::with_capacity(sched.steps() + 1);
    trajectory.push(LatentState {
        z: x0.clone(),
        t: 0,
        seed: 0,
    });
    for t in 1..=sched.steps() {
        let a_prev = sched.alpha_bar_at(t - 1);
        let a_t = sched.alpha_bar_at(t);
        let z_prev = &trajectory[t - 1].z;
        let lift = |eps: &ImageTensor| -> Result<ImageTensor> {
            // Reversed deterministic update: predict x0 at level t-1, then
            // renoise to level t with the same eps.
            let x0_pred = z_prev.affine_combine(
                1.0 / a_prev.sqrt(),
                eps,
                -((1.0 - a_prev).sqrt()) / a_prev.sqrt(),
            )?;
            x0_pred.affine_combine(a_t.sqrt(), eps, (1.0 - a_t).sqrt())
        };
        let mut eps = eps_fn(
            &LatentState {
                z: z_prev.clone(),
                t,
                seed: 0,
            },
            cond,
        )?;
        if !eps.same_dims(x0) {
            return Err(Error::ShapeMismatch("eps_fn returned wrong dims".into()));
        }
        for _ in 0..fixed_point_iters {
            let z_t_guess = lift(&eps)?;
            eps = eps_fn(
                &LatentState {
                    z: z_t_guess,
                    t,
                    seed: 0,
                },
                cond,
            )?;
        }
        let z_t = lift(&eps)?;
        trajectory.push(LatentState {
            z: z_t,
            t,
            seed: 0,
        });
    }
    Ok(trajectory)
}

/// Replace the latent with the precomputed inversion endpoint at `t = T`,
/// pass everything else through unchanged.
pub fn inversion_callback(
    z_t: &LatentState,
    t: usize,
    z_t_precomputed: &ImageTensor,
    cap_t: usize,
) -> LatentState {
    if t == cap_t {
        LatentState {
            z: z_t_precomputed.clone(),
            t: z_t.t,
            seed: z_t.seed,
        }
    } else {
        z_t.clone()
    }
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(
    eps_uncond: &ImageTensor,
    eps_cond: &ImageTensor,
    condition_scale: f64,
) -> Result<ImageTensor> {
    eps_uncond.affine_combine(1.0 - condition_scale, eps_cond, condition_scale)
}

/// Deterministic sampling loop from a starting state at `t = T` down to
/// `z_0`, returning the full trajectory indexed by timestep. The optional
/// callback runs once per visited timestep before the noise evaluation.
pub fn sample_trajectory<F>(
    start: LatentState,
    eps_fn: F,
    cond: &ConditioningBundle,
    sched: &NoiseSchedule,
    callback: Option<&dyn Fn(&LatentState) -> LatentState>,
) -> Result<Vec<LatentState>>
where
    F: Fn(&LatentState, &ConditioningBundle) -> Result<ImageTensor>,
{
    let t_steps = sched.steps();
    if start.t != t_steps {
        return Err(Error::InvalidConfig(format!(
            "sampling must start at t = {t_steps}, got t = {}",
            start.t
        )));
    }
    if !sched.is_deterministic() {
        return Err(Error::InvalidConfig(
            "sample_trajectory is the deterministic loop; sigma must be zero".into(),
        ));
    }
    let mut trajectory: Vec<LatentState> = Vec::with_capacity(t_steps + 1);
    let mut state = start;
    for t in (1..=t_steps).rev() {
        if let Some(cb) = callback {
            state = cb(&state);
        }
        let eps = eps_fn(&state, cond)?;
        let next = ddim_step(&state, &eps, sched, None)?;
        trajectory.push(state);
        state = next;
        debug_assert_eq!(state.t, t - 1);
    }
    if let Some(cb) = callback {
        state = cb(&state);
    }
    trajectory.push(state);
    trajectory.reverse();
    Ok(trajectory)
}
