//! Mean-L1 objective, Adam, the step schedule and the training step.

use alloc::vec::Vec;

use rand::Rng;

use crate::data::{Batch, ClipSource};
use crate::model::{backward, forward, ModelConfig, Parameters};
use crate::{Error, Real, Result, Tensor4};

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<S> {
    pub loss: S,
    pub grad: Tensor4<S>,
}

/// Mean absolute difference over all `M` entries. The gradient entries are
/// `sign(pred - gt) / M`, with `0` at ties.
pub fn l1_loss<S: Real>(pred: &Tensor4<S>, gt: &Tensor4<S>) -> Result<LossValue<S>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            expected: gt.shape(),
            found: pred.shape(),
        });
    }
    let m = pred.shape().len();
    if m == 0 {
        return Err(Error::Empty { op: "l1_loss" });
    }
    let inv = S::one() / S::from_f64(m as f64);
    let mut grad = Tensor4::zeros(pred.shape());
    let mut sum = S::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(gt.data()) {
        let d = p - t;
        sum += d.abs();
        *g = if d > S::zero() {
            inv
        } else if d < S::zero() {
            -inv
        } else {
            S::zero()
        };
    }
    Ok(LossValue { loss: sum * inv, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    /// Largest possible per-entry step relative to the learning rate.
    pub fn step_bound(&self) -> f64 {
        (1.0f64).max((1.0 - self.beta1) / num_traits::Float::sqrt(1.0 - self.beta2))
    }
}

/// Iterations between learning-rate halvings.
pub const HALVE_EVERY: u64 = 100_000;

/// `base * 0.5^floor(iteration / 100000)`.
pub fn lr_at(iteration: u64, base: f64) -> f64 {
    lr_with_period(iteration, base, HALVE_EVERY)
}

pub fn lr_with_period(iteration: u64, base: f64, period: u64) -> f64 {
    let halvings = iteration / period.max(1);
    if halvings >= 2000 {
        return 0.0;
    }
    base * num_traits::Float::powi(0.5f64, halvings as i32)
}

/// Adam moments and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub m: Parameters<S>,
    pub v: Parameters<S>,
    /// Completed steps.
    pub t: u64,
    pub base_lr: f64,
    pub halve_every: u64,
    pub hyper: AdamHyper,
}

impl<S: Real> TrainState<S> {
    pub fn new(cfg: &ModelConfig, base_lr: f64) -> Result<Self> {
        Ok(TrainState {
            m: Parameters::zeros(cfg)?,
            v: Parameters::zeros(cfg)?,
            t: 0,
            base_lr,
            halve_every: HALVE_EVERY,
            hyper: AdamHyper::default(),
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        lr_with_period(self.t, self.base_lr, self.halve_every)
    }

    pub fn cast<T: Real>(&self) -> TrainState<T> {
        TrainState {
            m: self.m.cast(),
            v: self.v.cast(),
            t: self.t,
            base_lr: self.base_lr,
            halve_every: self.halve_every,
            hyper: self.hyper,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`; advances `state.t`.
pub fn adam_step<S: Real>(
    params: &mut Parameters<S>,
    grads: &Parameters<S>,
    state: &mut TrainState<S>,
    lr: f64,
) -> Result<()> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    params.check_aligned(&state.v)?;
    let h = state.hyper;
    let t = state.t + 1;
    let (b1, b2) = (S::from_f64(h.beta1), S::from_f64(h.beta2));
    let c1 = S::from_f64(1.0 - num_traits::Float::powi(h.beta1, t as i32));
    let c2 = S::from_f64(1.0 - num_traits::Float::powi(h.beta2, t as i32));
    let (lr, eps) = (S::from_f64(lr), S::from_f64(h.eps));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let g_named = grads.named();
    let ps = params.slices_mut();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((p, m), v), (_, g)) in ps.into_iter().zip(ms).zip(vs).zip(&g_named) {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.t = t;
    Ok(())
}

/// Forward, mean-L1 against the batch target, backward and one Adam step.
/// Returns the loss before the update.
pub fn train_step<S: Real>(
    cfg: &ModelConfig,
    batch: &Batch<S>,
    params: &mut Parameters<S>,
    state: &mut TrainState<S>,
) -> Result<S> {
    batch.check(cfg)?;
    let (pred, tape) = forward(cfg, params, &batch.inputs)?;
    let LossValue { loss, grad } = l1_loss(&pred, &batch.target)?;
    let grads = backward(params, &tape, &grad, false)?;
    let lr = state.lr();
    adam_step(params, &grads.params, state, lr)?;
    Ok(loss)
}

/// Options for [`train_loop`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOptions {
    pub iters: u64,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub checkpoint_every: u64,
}

/// Progress events emitted by [`train_loop`].
#[derive(Debug)]
pub enum Event<'a, S> {
    Step { iteration: u64, lr: f64, loss: S },
    Checkpoint { iteration: u64, params: &'a Parameters<S>, state: &'a TrainState<S> },
}

/// Iteration numbers at which [`train_loop`] emits checkpoints.
pub fn checkpoint_schedule(start: u64, iters: u64, every: u64) -> Vec<u64> {
    let end = start + iters;
    let mut out = Vec::new();
    if every > 0 {
        let mut k = (start / every + 1) * every;
        while k < end {
            out.push(k);
            k += every;
        }
    }
    if iters > 0 {
        out.push(end);
    }
    out
}

/// Run `opts.iters` training steps with batches sampled uniformly from
/// `source`. `on_event` sees every step and every checkpoint; an error from it
/// stops the loop.
pub fn train_loop<S: Real, R: Rng + ?Sized, E>(
    cfg: &ModelConfig,
    source: &ClipSource<S>,
    params: &mut Parameters<S>,
    state: &mut TrainState<S>,
    opts: LoopOptions,
    rng: &mut R,
    mut on_event: impl FnMut(Event<'_, S>) -> core::result::Result<(), E>,
) -> core::result::Result<(), E>
where
    E: From<Error>,
{
    if source.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let schedule = checkpoint_schedule(state.t, opts.iters, opts.checkpoint_every);
    let mut next = schedule.iter().copied().peekable();
    for _ in 0..opts.iters {
        let clips = source.sample_batch(cfg.n_inputs, opts.batch_size, opts.crop, rng)?;
        let batch = Batch::from_clips(&clips)?;
        let lr = state.lr();
        let loss = train_step(cfg, &batch, params, state)?;
        on_event(Event::Step {
            iteration: state.t,
            lr,
            loss,
        })?;
        if next.peek() == Some(&state.t) {
            next.next();
            on_event(Event::Checkpoint {
                iteration: state.t,
                params,
                state,
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_hand_example() {
        let l = l1_loss(&t(&[0.0, 1.0]), &t(&[1.0, 1.0])).unwrap();
        assert_eq!(l.loss, 0.5);
        assert_eq!(l.grad.data(), &[-0.5, 0.0]);
        let z = l1_loss(&t(&[0.3, 0.2]), &t(&[0.3, 0.2])).unwrap();
        assert_eq!(z.loss, 0.0);
        assert!(z.grad.data().iter().all(|&g| g == 0.0));
        assert!(l1_loss(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    proptest! {
        #[test]
        fn l1_symmetric_and_triangle(
            a in prop::collection::vec(-2.0f64..2.0, 6),
            b in prop::collection::vec(-2.0f64..2.0, 6),
            c in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            let (a, b, c) = (t(&a), t(&b), t(&c));
            let ab = l1_loss(&a, &b).unwrap();
            let ba = l1_loss(&b, &a).unwrap();
            prop_assert_eq!(ab.loss, ba.loss);
            prop_assert_eq!(ab.grad.scale(-1.0), ba.grad);
            let ac = l1_loss(&a, &c).unwrap().loss;
            let bc = l1_loss(&b, &c).unwrap().loss;
            prop_assert!(ac <= ab.loss + bc + 1e-6);
            prop_assert!(ab.loss >= 0.0);
            prop_assert_eq!(ab.loss == 0.0, a == b);
            let m = 6.0;
            prop_assert!(ab.grad.data().iter().all(|&g| g == 0.0 || g == 1.0 / m || g == -1.0 / m));
        }

        #[test]
        fn lr_non_increasing(i in 0u64..2_000_000, d in 0u64..500_000) {
            prop_assert!(lr_at(i + d, 1e-4) <= lr_at(i, 1e-4));
        }
    }

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_at(0, 1e-4), 1e-4);
        assert_eq!(lr_at(99_999, 1e-4), 1e-4);
        assert_eq!(lr_at(100_000, 1e-4), 5e-5);
        assert_eq!(lr_at(250_000, 1e-4), 2.5e-5);
    }

    #[test]
    fn step_bound_value() {
        let b = AdamHyper::default().step_bound();
        assert!((b - 0.1 / 0.001f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_schedule_arithmetic() {
        assert_eq!(checkpoint_schedule(0, 250, 100), [100, 200, 250]);
        assert_eq!(checkpoint_schedule(0, 200, 100), [100, 200]);
        assert_eq!(checkpoint_schedule(150, 100, 100), [200, 250]);
        assert_eq!(checkpoint_schedule(0, 5, 0), [5]);
        assert!(checkpoint_schedule(0, 0, 10).is_empty());
    }
}
