//! Adagrad, plateau learning-rate halving and EMA shadow parameters.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::model::{Gradients, ModelConfig, ModelState, Params};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient had a NaN or infinite entry; nothing changed.
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accumulators: Params,
    pub lr: f64,
    pub eps: f64,
    pub rejected_steps: u64,
}

impl AdagradState {
    pub fn new(cfg: &ModelConfig, lr: f64, eps: f64) -> Result<Self, OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("learning rate {lr} must be positive")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("eps {eps} must be non-negative")));
        }
        Ok(Self {
            accumulators: Params::zeros(cfg),
            lr,
            eps,
            rejected_steps: 0,
        })
    }

    /// `acc += g^2; theta -= lr * g / (sqrt(acc) + eps)`.
    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) -> Result<StepOutcome, OptimError> {
        if !grads.same_shapes(&self.accumulators) || !grads.same_shapes(model.params()) {
            return Err(OptimError::ShapeMismatch);
        }
        if !grads.is_finite() {
            self.rejected_steps += 1;
            return Ok(StepOutcome::Rejected);
        }
        let (lr, eps) = (self.lr, self.eps);
        let params = model.params_mut();
        for ((theta, acc), g) in params
            .tensors
            .iter_mut()
            .zip(&mut self.accumulators.tensors)
            .zip(&grads.tensors)
        {
            ndarray::Zip::from(theta).and(acc).and(g).for_each(|theta, acc, &g| {
                if g != 0.0 {
                    *acc += g * g;
                    *theta -= lr * g / (acc.sqrt() + eps);
                }
            });
        }
        model.record_update();
        Ok(StepOutcome::Applied)
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut BinWriter<W>, names: &[String]) -> std::io::Result<()> {
        w.f64(self.lr)?;
        w.f64(self.eps)?;
        w.u64(self.rejected_steps)?;
        self.accumulators.write(w, names)
    }

    pub(crate) fn read_from<R: Read>(r: &mut BinReader<R>, cfg: &ModelConfig) -> Result<Self, OptimError> {
        Ok(Self {
            lr: r.f64()?,
            eps: r.f64()?,
            rejected_steps: r.u64()?,
            accumulators: Params::read(r, cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: u32,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub evals_since_best: u32,
    pub halvings: u32,
}

impl PlateauScheduler {
    pub const FACTOR: f64 = 2.0;

    pub fn new(lr: f64, patience: u32, min_delta: f64) -> Self {
        Self {
            lr,
            patience,
            min_delta,
            best: None,
            evals_since_best: 0,
            halvings: 0,
        }
    }

    /// Records a dev metric (lower is better) and returns the learning rate
    /// to use from now on. A non-finite metric never counts as improvement.
    pub fn update(&mut self, metric: f64) -> f64 {
        let improved = metric.is_finite() && self.best.is_none_or(|b| metric < b - self.min_delta);
        if improved {
            self.best = Some(metric);
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
            if self.evals_since_best >= self.patience {
                self.lr /= Self::FACTOR;
                self.halvings += 1;
                self.evals_since_best = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Params,
    pub decay: f64,
}

impl EmaState {
    /// Starts the shadow at the model's current parameters.
    pub fn new(model: &ModelState, decay: f64) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(OptimError::InvalidConfig(format!("EMA decay {decay} must be in [0, 1)")));
        }
        Ok(Self {
            shadow: model.params().clone(),
            decay,
        })
    }

    /// `shadow = decay * shadow + (1 - decay) * theta`.
    pub fn update(&mut self, model: &ModelState) -> Result<(), OptimError> {
        if !self.shadow.same_shapes(model.params()) {
            return Err(OptimError::ShapeMismatch);
        }
        let d = self.decay;
        for (s, theta) in self.shadow.tensors.iter_mut().zip(&model.params().tensors) {
            ndarray::Zip::from(s).and(theta).for_each(|s, &t| *s = d * *s + (1.0 - d) * t);
        }
        Ok(())
    }

    /// Puts the shadow parameters into `model` until the guard drops. The
    /// guard only hands out shared access, and it borrows both states, so no
    /// optimizer step can happen while it is alive.
    pub fn swap_for_inference<'a>(&'a mut self, model: &'a mut ModelState) -> Result<EmaGuard<'a>, OptimError> {
        if !self.shadow.same_shapes(model.params()) {
            return Err(OptimError::ShapeMismatch);
        }
        model.swap_params(&mut self.shadow);
        Ok(EmaGuard { model, stash: &mut self.shadow })
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut BinWriter<W>, names: &[String]) -> std::io::Result<()> {
        w.f64(self.decay)?;
        self.shadow.write(w, names)
    }

    pub(crate) fn read_from<R: Read>(r: &mut BinReader<R>, cfg: &ModelConfig) -> Result<Self, OptimError> {
        Ok(Self {
            decay: r.f64()?,
            shadow: Params::read(r, cfg)?,
        })
    }
}

pub struct EmaGuard<'a> {
    model: &'a mut ModelState,
    stash: &'a mut Params,
}

impl EmaGuard<'_> {
    pub fn model(&self) -> &ModelState {
        self.model
    }
}

impl Drop for EmaGuard<'_> {
    fn drop(&mut self) {
        self.model.swap_params(self.stash);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            conv_kernel: 3,
            conv_stride: 1,
            hidden_dim: 4,
            num_blocks: 1,
            vocab_size: 2,
            dropout: 0.0,
        }
    }

    fn model() -> ModelState {
        init_model(&cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn filled_grads(v: f64) -> Gradients {
        let mut g = Params::zeros(&cfg());
        for t in &mut g.tensors {
            t.fill(v);
        }
        g
    }

    fn deltas(before: &Params, after: &Params) -> Vec<f64> {
        before.iter().zip(after.iter()).map(|(a, b)| b - a).collect()
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        let before = m.params().clone();
        opt.step(&mut m, &Params::zeros(&cfg())).unwrap();
        assert_eq!(m.params(), &before);
        assert!(opt.accumulators.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.05, 0.0).unwrap();
        let before = m.params().clone();
        let mut g = filled_grads(3.0);
        g.tensors[0][[0, 0]] = -0.2;
        opt.step(&mut m, &g).unwrap();
        for (d, gv) in deltas(&before, m.params()).iter().zip(g.iter()) {
            assert!((d + 0.05 * gv.signum()).abs() < 1e-15);
        }
        assert_eq!(m.update_count(), 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        let before = m.params().clone();
        let mut g = filled_grads(1.0);
        g.tensors[2][[0, 1]] = f64::NAN;
        assert_eq!(opt.step(&mut m, &g).unwrap(), StepOutcome::Rejected);
        assert_eq!(m.params(), &before);
        assert_eq!(opt.rejected_steps, 1);
        assert_eq!(m.update_count(), 0);
        assert!(opt.accumulators.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn constant_gradient_steps_shrink() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        let g = filled_grads(0.7);
        let mut last: Option<Vec<f64>> = None;
        for _ in 0..20 {
            let before = m.params().clone();
            opt.step(&mut m, &g).unwrap();
            let d: Vec<f64> = deltas(&before, m.params()).iter().map(|x| x.abs()).collect();
            if let Some(prev) = &last {
                assert!(d.iter().zip(prev).all(|(a, b)| a < b));
            }
            last = Some(d);
        }
        // closed form: step t has magnitude lr / sqrt(t)
        let expected = 0.1 / 20f64.sqrt();
        assert!(last.unwrap().iter().all(|d| (d - expected).abs() < 1e-9));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        let g = Params {
            tensors: vec![Array2::zeros((1, 1))],
        };
        assert!(matches!(opt.step(&mut m, &g), Err(OptimError::ShapeMismatch)));
    }

    #[test]
    fn improving_metric_keeps_lr() {
        let mut s = PlateauScheduler::new(1.0, 3, 1e-4);
        for i in 0..50 {
            assert_eq!(s.update(1.0 - i as f64 * 0.01), 1.0);
        }
    }

    #[test]
    fn flat_metric_for_patience_plus_one_halves_once() {
        let mut s = PlateauScheduler::new(0.8, 3, 1e-4);
        let lrs: Vec<f64> = (0..4).map(|_| s.update(0.5)).collect();
        assert_eq!(lrs, vec![0.8, 0.8, 0.8, 0.4]);
        assert_eq!(s.halvings, 1);
    }

    #[test]
    fn k_halvings_divide_by_two_to_the_k() {
        let mut s = PlateauScheduler::new(0.3, 2, 1e-4);
        s.update(0.5);
        for _ in 0..10 {
            s.update(0.5);
        }
        assert_eq!(s.halvings, 5);
        assert_eq!(s.lr, 0.3 / 32.0);
    }

    #[test]
    fn improvement_below_min_delta_does_not_count() {
        let mut s = PlateauScheduler::new(1.0, 1, 0.01);
        s.update(0.5);
        assert_eq!(s.update(0.495), 0.5);
        assert_eq!(s.update(f64::NAN), 0.25);
    }

    #[test]
    fn ema_with_zero_decay_tracks_parameters() {
        let mut m = model();
        let mut ema = EmaState::new(&m, 0.0).unwrap();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        for _ in 0..3 {
            opt.step(&mut m, &filled_grads(0.3)).unwrap();
            ema.update(&m).unwrap();
            assert_eq!(&ema.shadow, m.params());
        }
    }

    #[test]
    fn ema_unit_step_response() {
        // theta jumps from 0 to 1 at t=0; shadow(t) = 1 - decay^t
        let mut m = model();
        for t in &mut m.params_mut().tensors {
            t.fill(0.0);
        }
        let mut ema = EmaState::new(&m, 0.999).unwrap();
        for t in &mut m.params_mut().tensors {
            t.fill(1.0);
        }
        for _ in 0..1000 {
            ema.update(&m).unwrap();
        }
        let expected = 1.0 - 0.999f64.powi(1000);
        assert!((expected - 0.6323).abs() < 1e-4);
        assert!(ema.shadow.iter().all(|&s| (s - expected).abs() < 1e-12));
    }

    #[test]
    fn ema_constant_target_error_decays_geometrically() {
        let mut m = model();
        let mut ema = EmaState::new(&m, 0.9).unwrap();
        ema.shadow.tensors.iter_mut().for_each(|t| t.fill(5.0));
        for t in &mut m.params_mut().tensors {
            t.fill(2.0);
        }
        for n in 1..=30 {
            ema.update(&m).unwrap();
            let expected = 0.9f64.powi(n) * 3.0;
            assert!(ema.shadow.iter().all(|&s| ((s - 2.0) - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn ema_guard_swaps_and_restores() {
        let mut m = model();
        let trained = m.params().clone();
        let mut ema = EmaState::new(&m, 0.5).unwrap();
        ema.shadow.tensors.iter_mut().for_each(|t| t.fill(0.25));
        let shadow = ema.shadow.clone();
        {
            let guard = ema.swap_for_inference(&mut m).unwrap();
            assert_eq!(guard.model().params(), &shadow);
        }
        assert_eq!(m.params(), &trained);
        assert_eq!(ema.shadow, shadow);
    }

    #[test]
    fn optimizer_and_ema_state_round_trip() {
        let mut m = model();
        let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
        opt.step(&mut m, &filled_grads(0.2)).unwrap();
        let ema = EmaState::new(&m, 0.999).unwrap();
        let names = m.param_names();
        let mut w = BinWriter::new(Vec::new());
        opt.write_to(&mut w, &names).unwrap();
        ema.write_to(&mut w, &names).unwrap();
        let bytes = w.into_inner();
        let mut r = BinReader::new(bytes.as_slice());
        assert_eq!(AdagradState::read_from(&mut r, &cfg()).unwrap(), opt);
        assert_eq!(EmaState::read_from(&mut r, &cfg()).unwrap(), ema);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ema_matches_convex_combination_closed_form(
            decay in 0.0f64..0.999,
            trajectory in proptest::collection::vec(-5.0f64..5.0, 1..40),
            start in -5.0f64..5.0,
        ) {
            let mut m = model();
            m.params_mut().tensors.iter_mut().for_each(|t| t.fill(start));
            let mut ema = EmaState::new(&m, decay).unwrap();
            for &v in &trajectory {
                m.params_mut().tensors.iter_mut().for_each(|t| t.fill(v));
                ema.update(&m).unwrap();
            }
            // weights: (1-d) d^(n-1-i) on step i, d^n on the initial shadow
            let n = trajectory.len();
            let mut expected = decay.powi(n as i32) * start;
            let mut weight_sum = decay.powi(n as i32);
            for (i, &v) in trajectory.iter().enumerate() {
                let w = (1.0 - decay) * decay.powi((n - 1 - i) as i32);
                expected += w * v;
                weight_sum += w;
            }
            prop_assert!((weight_sum - 1.0).abs() < 1e-9);
            for &s in ema.shadow.iter() {
                prop_assert!((s - expected).abs() < 1e-9);
            }
        }

        #[test]
        fn plateau_lr_is_nonincreasing(metrics in proptest::collection::vec(0.0f64..1.0, 1..60), patience in 1u32..5) {
            let mut s = PlateauScheduler::new(1.0, patience, 1e-4);
            let mut prev = s.lr;
            for m in metrics {
                let lr = s.update(m);
                prop_assert!(lr <= prev);
                prop_assert_eq!(lr, 1.0 / 2f64.powi(s.halvings as i32));
                prev = lr;
            }
        }

        #[test]
        fn adagrad_is_bit_deterministic(g in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let run = || {
                let mut m = model();
                let mut opt = AdagradState::new(&cfg(), 0.1, 1e-8).unwrap();
                for &v in &g {
                    opt.step(&mut m, &filled_grads(v)).unwrap();
                }
                (m.to_bytes(), opt)
            };
            prop_assert_eq!(run(), run());
        }
    }
}
