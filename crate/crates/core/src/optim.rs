//! SGD with momentum and Adam, with separate learning rates for modulation
//! masks and for every other parameter, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Which learning rate a parameter tensor follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Modulation masks, learning rate `lr_masks`.
    Mask,
    /// Everything else (filters, offset predictors, heads), `lr_filters`.
    Filter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_masks: f64,
    pub lr_filters: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step decay (Adam runs): multiply learning rates by `decay_factor`
    /// every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Plateau decay (SGD runs): epochs without validation improvement
    /// before multiplying by `decay_factor`.
    pub plateau_patience: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr_masks: 1e-3,
            lr_filters: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-5,
            epochs: 30,
            batch_size: 16,
            decay_every: 100,
            decay_factor: 0.1,
            plateau_patience: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_masks >= 0.0 && self.lr_filters > 0.0) {
            return Err(arg_err!(
                "learning rates must be positive (masks may be 0 to freeze): {} / {}",
                self.lr_masks,
                self.lr_filters
            ));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(arg_err!("momentum and Adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(arg_err!("weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(arg_err!("batch size must be positive"));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(arg_err!(
                "decay_every must be positive and decay_factor in (0, 1]"
            ));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Mask => self.lr_masks,
            ParamGroup::Filter => self.lr_filters,
        }
    }
}

/// A parameter tensor the optimizer may update in place.
pub struct ParamMut<'a> {
    pub group: ParamGroup,
    pub value: &'a mut Tensor,
}

fn check_grads(params: &[ParamMut<'_>], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.value.shape() != g.shape() {
            return Err(shape_err!(
                "parameter {i} is {:?} but its gradient is {:?}",
                p.value.shape(),
                g.shape()
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// `v <- mu v + g; theta <- theta - lr v - lr wd theta`.
pub fn sgd_step(
    params: &mut [ParamMut<'_>],
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &OptimizerConfig,
    lr_scale: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    if state.velocity.is_empty() {
        state.velocity = grads
            .iter()
            .map(|g| Tensor::zeros(g.shape()))
            .collect::<Result<_>>()?;
    }
    if state.velocity.len() != grads.len() {
        return Err(shape_err!("optimizer state does not match parameter list"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let lr = cfg.lr(p.group) * lr_scale;
        for ((theta, &gi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vi = cfg.momentum * *vi + gi;
            *theta -= lr * *vi + lr * cfg.weight_decay * *theta;
        }
    }
    Ok(())
}

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Bias-corrected Adam; weight decay is added to the gradient.
pub fn adam_step(
    params: &mut [ParamMut<'_>],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr_scale: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.is_empty() {
        state.m = grads
            .iter()
            .map(|g| Tensor::zeros(g.shape()))
            .collect::<Result<_>>()?;
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() {
        return Err(shape_err!("optimizer state does not match parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let lr = cfg.lr(p.group) * lr_scale;
        for (((theta, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi + cfg.weight_decay * *theta;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Optimizer plus its learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    sgd: SgdState,
    adam: AdamState,
    lr_scale: f64,
    best_val: f64,
    stale_epochs: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            sgd: SgdState::default(),
            adam: AdamState::default(),
            lr_scale: 1.0,
            best_val: f64::INFINITY,
            stale_epochs: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    pub fn step(&mut self, params: &mut [ParamMut<'_>], grads: &[Tensor]) -> Result<()> {
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                sgd_step(params, grads, &mut self.sgd, &self.cfg, self.lr_scale)
            }
            OptimizerKind::Adam => {
                adam_step(params, grads, &mut self.adam, &self.cfg, self.lr_scale)
            }
        }
    }

    /// Call after each finished epoch (1-based count) with the validation loss.
    pub fn end_epoch(&mut self, epoch: usize, val_loss: Option<f64>) {
        match self.cfg.kind {
            OptimizerKind::Adam => {
                if epoch.is_multiple_of(self.cfg.decay_every) {
                    self.lr_scale *= self.cfg.decay_factor;
                }
            }
            OptimizerKind::SgdMomentum => {
                let Some(loss) = val_loss else { return };
                if loss < self.best_val {
                    self.best_val = loss;
                    self.stale_epochs = 0;
                } else {
                    self.stale_epochs += 1;
                    if self.stale_epochs >= self.cfg.plateau_patience {
                        self.lr_scale *= self.cfg.decay_factor;
                        self.stale_epochs = 0;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind, lr: f64, momentum: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr_masks: lr,
            lr_filters: lr,
            momentum,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    fn run_sgd(theta: &mut Tensor, g: &Tensor, steps: usize, c: &OptimizerConfig) {
        let mut st = SgdState::default();
        for _ in 0..steps {
            let mut p = [ParamMut {
                group: ParamGroup::Filter,
                value: theta,
            }];
            sgd_step(&mut p, std::slice::from_ref(g), &mut st, c, 1.0).unwrap();
        }
    }

    #[test]
    fn sgd_vanilla_and_fixed_point() {
        let c = cfg(OptimizerKind::SgdMomentum, 0.1, 0.0);
        let mut t = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        run_sgd(
            &mut t,
            &Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap(),
            1,
            &c,
        );
        assert_eq!(t.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        let mut t = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        run_sgd(&mut t, &Tensor::zeros(&[2]).unwrap(), 5, &c);
        assert_eq!(t.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let c = cfg(OptimizerKind::SgdMomentum, 0.1, 0.9);
        let mut t = Tensor::zeros(&[1]).unwrap();
        run_sgd(&mut t, &Tensor::full(&[1], 1.0).unwrap(), 2, &c);
        assert!((t.data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let c = cfg(OptimizerKind::Adam, 0.01, 0.9);
        let mut t = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut st = AdamState::default();
        for _ in 0..4 {
            let mut p = [ParamMut {
                group: ParamGroup::Mask,
                value: &mut t,
            }];
            adam_step(&mut p, &[Tensor::zeros(&[3]).unwrap()], &mut st, &c, 1.0).unwrap();
        }
        assert_eq!(t.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_is_scale_free() {
        let c = cfg(OptimizerKind::Adam, 0.01, 0.9);
        for &g in &[1e-3, 1.0, 250.0] {
            let mut t = Tensor::zeros(&[1]).unwrap();
            let mut st = AdamState::default();
            let mut p = [ParamMut {
                group: ParamGroup::Filter,
                value: &mut t,
            }];
            adam_step(&mut p, &[Tensor::full(&[1], g).unwrap()], &mut st, &c, 1.0).unwrap();
            assert!((t.data()[0] + 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_three_steps_match_hand_recursion() {
        let c = cfg(OptimizerKind::Adam, 0.001, 0.9);
        let mut t = Tensor::zeros(&[3]).unwrap();
        let mut st = AdamState::default();
        for _ in 0..3 {
            let mut p = [ParamMut {
                group: ParamGroup::Filter,
                value: &mut t,
            }];
            adam_step(
                &mut p,
                &[Tensor::full(&[3], 1.0).unwrap()],
                &mut st,
                &c,
                1.0,
            )
            .unwrap();
        }
        // hand-unrolled: constant g = 1 gives mhat = vhat = 1 at every step
        let mut theta = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.001 * mhat / (vhat.sqrt() + 1e-8);
        }
        for &x in t.data() {
            assert!((x - theta).abs() < 1e-15);
        }
        assert!((theta + 0.003).abs() < 1e-10);
    }

    #[test]
    fn zero_mask_rate_freezes_masks() {
        let mut c = cfg(OptimizerKind::Adam, 0.01, 0.9);
        c.lr_masks = 0.0;
        c.weight_decay = 1e-3;
        let mut opt = Optimizer::new(c).unwrap();
        let mut mask = Tensor::full(&[2], 1.0).unwrap();
        let mut filt = Tensor::full(&[2], 1.0).unwrap();
        for _ in 0..3 {
            let mut ps = [
                ParamMut {
                    group: ParamGroup::Mask,
                    value: &mut mask,
                },
                ParamMut {
                    group: ParamGroup::Filter,
                    value: &mut filt,
                },
            ];
            opt.step(
                &mut ps,
                &[
                    Tensor::full(&[2], 0.3).unwrap(),
                    Tensor::full(&[2], 0.3).unwrap(),
                ],
            )
            .unwrap();
        }
        assert_eq!(mask.data(), &[1.0, 1.0]);
        assert!(filt.data()[0] < 1.0);
    }

    #[test]
    fn schedules() {
        let mut opt = Optimizer::new(OptimizerConfig {
            decay_every: 2,
            ..Default::default()
        })
        .unwrap();
        opt.end_epoch(1, None);
        assert_eq!(opt.lr_scale(), 1.0);
        opt.end_epoch(2, None);
        assert!((opt.lr_scale() - 0.1).abs() < 1e-15);

        let mut sgd = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            plateau_patience: 2,
            ..Default::default()
        })
        .unwrap();
        sgd.end_epoch(1, Some(1.0));
        sgd.end_epoch(2, Some(1.5));
        assert_eq!(sgd.lr_scale(), 1.0);
        sgd.end_epoch(3, Some(1.2));
        assert!((sgd.lr_scale() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let c = cfg(OptimizerKind::SgdMomentum, 0.1, 0.0);
        let mut t = Tensor::zeros(&[2]).unwrap();
        let mut p = [ParamMut {
            group: ParamGroup::Filter,
            value: &mut t,
        }];
        let mut st = SgdState::default();
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[3]).unwrap()], &mut st, &c, 1.0).is_err());
    }
}
