//! Plain-SGD training of the noise predictor and the loss/gradient entry
//! points used by gradient checking.
//!
//! Training minimizes the mean squared error between predicted and true
//! noise at uniformly sampled timesteps of a fixed 30-step linear schedule.
//! Images are used as given; the pipeline trains on `[-1, 1]`-scaled data.
//! The conditioning during training mirrors the pipeline's unconditional
//! branch plus image self-conditioning: empty-prompt text embedding and the
//! clean image's own embedding, both seeded by the state seed.

use ndarray::Axis;

use crate::diffusion::{forward_noise, make_schedule, GuidanceConfig, NoiseSchedule, ScheduleKind};
use crate::encoders::{self, DEFAULT_PATCH};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256PlusPlus};
use crate::tensor::ImageTensor;

use super::net::{backward_single, forward_single, ParamLayout};
use super::{CrossArtContext, DenoiserState};

/// Timestep range the trainer samples from.
pub const TRAIN_SCHEDULE_STEPS: usize = 30;

const TAG_TRAIN: u64 = 0x7472_6169;

/// Updated state plus the per-step loss history.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: DenoiserState,
    pub loss_history: Vec<f64>,
}

fn train_schedule() -> NoiseSchedule {
    make_schedule(TRAIN_SCHEDULE_STEPS, ScheduleKind::Linear).expect("static schedule")
}

fn training_context(state: &DenoiserState) -> CrossArtContext {
    CrossArtContext::minimal(
        encoders::encode_prompt("", state.seed).expect("empty prompt encodes"),
        GuidanceConfig {
            condition_scale: 1.0,
            semantic_scale: 1.0,
            text_scale: 1.0,
        },
    )
    .with_heads(state.config.heads)
}

fn single_sample(x0: &ImageTensor) -> Result<ndarray::Array3<f64>> {
    let (n, ..) = x0.dims();
    if n != 1 {
        return Err(Error::ShapeMismatch(format!(
            "training operates on single-sample tensors, got N = {n}"
        )));
    }
    Ok(x0.data().index_axis(Axis(0), 0).to_owned())
}

fn loss_and_grad_impl(
    state: &DenoiserState,
    layout: &ParamLayout,
    ctx: &CrossArtContext,
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sched: &NoiseSchedule,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Domain(format!(
            "training timestep {t} outside [1, {}]",
            sched.steps()
        )));
    }
    let z_t = forward_noise(x0, t - 1, eps, sched)?;
    let x = z_t.data().index_axis(Axis(0), 0).to_owned();
    let want_tape = grads.is_some();
    let fwd = forward_single(
        &state.config,
        layout,
        &state.params,
        &x,
        t,
        ctx,
        false,
        want_tape,
        false,
    )?;
    let eps_true = eps.data().index_axis(Axis(0), 0);
    let numel = fwd.eps.len() as f64;
    let mut loss = 0.0;
    let mut d_eps = fwd.eps.clone();
    for (d, (&p, &e)) in d_eps
        .iter_mut()
        .zip(fwd.eps.iter().zip(eps_true.iter()))
    {
        let diff = p - e;
        loss += diff * diff;
        *d = 2.0 * diff / numel;
    }
    loss /= numel;
    if let Some(grad_data) = grads {
        let tape = fwd.tape.expect("tape requested");
        backward_single(
            &state.config,
            layout,
            &state.params,
            ctx,
            &tape,
            &d_eps,
            grad_data,
        );
    }
    Ok(loss)
}

/// Epsilon-prediction loss of a single `(x0, t, eps)` triple under the
/// trainer's schedule and conditioning.
pub fn epsilon_loss(
    state: &DenoiserState,
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
) -> Result<f64> {
    single_sample(x0)?;
    let layout = state.layout();
    let ctx = training_context(state)
        .with_image(encoders::encode_image(x0, DEFAULT_PATCH, state.seed)?);
    loss_and_grad_impl(state, &layout, &ctx, x0, t, eps, &train_schedule(), None)
}

/// Loss plus the analytic gradient with respect to every parameter.
pub fn epsilon_loss_and_grad(
    state: &DenoiserState,
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
) -> Result<(f64, Vec<f64>)> {
    single_sample(x0)?;
    let layout = state.layout();
    let ctx = training_context(state)
        .with_image(encoders::encode_image(x0, DEFAULT_PATCH, state.seed)?);
    let mut grads = vec![0.0; state.param_count()];
    let loss = loss_and_grad_impl(
        state,
        &layout,
        &ctx,
        x0,
        t,
        eps,
        &train_schedule(),
        Some(&mut grads),
    )?;
    Ok((loss, grads))
}

/// Stochastic gradient descent on the epsilon-prediction objective: one
/// uniformly drawn image and timestep per step, learning rate `lr`, no
/// momentum. Returns the final state and the per-step loss history.
pub fn train_toy(
    state: &DenoiserState,
    dataset: &[ImageTensor],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let dims = dataset[0].dims();
    for img in dataset {
        if img.dims() != dims {
            return Err(Error::ShapeMismatch(
                "training images must share dimensions".into(),
            ));
        }
        single_sample(img)?;
    }
    let mut current = state.clone();
    let layout = current.layout();
    let sched = train_schedule();
    let base_ctx = training_context(&current);
    // The empty-prompt embedding and per-image embeddings never change.
    let image_embeddings: Vec<_> = dataset
        .iter()
        .map(|img| encoders::encode_image(img, DEFAULT_PATCH, current.seed))
        .collect::<Result<_>>()?;

    let mut rng = Xoshiro256PlusPlus::new(derive_seed(seed, TAG_TRAIN));
    let mut loss_history = Vec::with_capacity(steps);
    let mut grads = vec![0.0; current.param_count()];
    for step in 0..steps {
        let idx = rng.below(dataset.len() as u64) as usize;
        let t = 1 + rng.below(sched.steps() as u64) as usize;
        let mut eps_data = ndarray::Array4::zeros(dims);
        for v in eps_data.iter_mut() {
            *v = rng.standard_normal();
        }
        let eps = ImageTensor::new(eps_data)?;
        let ctx = base_ctx.clone().with_image(image_embeddings[idx].clone());
        grads.fill(0.0);
        let loss = loss_and_grad_impl(
            &current,
            &layout,
            &ctx,
            &dataset[idx],
            t,
            &eps,
            &sched,
            Some(&mut grads),
        )?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        for (p, g) in current.params.iter_mut().zip(grads.iter()) {
            *p -= lr * g;
        }
        loss_history.push(loss);
    }
    Ok(TrainReport {
        state: current,
        loss_history,
    })
}
