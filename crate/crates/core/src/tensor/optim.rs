//! First-order optimizers over a [`ParamSet`].
//!
//! Plain SGD and Adam, both update parameters in place in set order.
//! Moment vectors are created lazily on the first step so construction
//! does not need shapes, and they can be exported to and re-imported from
//! checkpoints for exact resume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> OptimizerState {
        OptimizerState {
            kind,
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `grads` must line up with `params` by index.
    /// Any non-finite gradient entry aborts the whole step before any
    /// parameter is touched, naming the offending parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer.step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::shape(
                    "optimizer.step",
                    format!(
                        "gradient shape {:?} does not match parameter {} shape {:?}",
                        g.shape(),
                        params.name(i),
                        params.tensor(i).shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: params.name(i).to_string(),
                });
            }
        }
        if matches!(self.kind, OptimizerKind::Adam { .. }) && self.m.is_empty() {
            self.m = params.tensors().iter().map(Tensor::zeros_like).collect();
            self.v = params.tensors().iter().map(Tensor::zeros_like).collect();
        }
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    let gd = g.data();
                    params.update(i, |p| {
                        for (pv, &gv) in p.iter_mut().zip(gd.iter()) {
                            *pv -= lr * gv;
                        }
                    });
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (i, g) in grads.iter().enumerate() {
                    let gd = g.data();
                    let md = self.m[i].data_mut();
                    let vd = self.v[i].data_mut();
                    for (j, &gv) in gd.iter().enumerate() {
                        md[j] = beta1 * md[j] + (1.0 - beta1) * gv;
                        vd[j] = beta2 * vd[j] + (1.0 - beta2) * gv * gv;
                    }
                    let (md, vd) = (self.m[i].data(), self.v[i].data());
                    params.update(i, |p| {
                        for (j, pv) in p.iter_mut().enumerate() {
                            let mhat = md[j] / bc1;
                            let vhat = vd[j] / bc2;
                            *pv -= lr * mhat / (vhat.sqrt() + eps);
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Serializes moments and step counter as named tensors, keyed so they
    /// can sit in the same checkpoint as the model parameters.
    pub fn export_state(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = vec![("opt.step".to_string(), Tensor::scalar(self.step_count as f64))];
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("opt.m.{}", params.name(i)), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("opt.v.{}", params.name(i)), v.clone()));
        }
        out
    }

    /// Restores moments and step counter previously written by
    /// [`OptimizerState::export_state`]. Kind and learning rate are config
    /// inputs, not checkpoint payload, so the caller constructs `self`
    /// first and then imports.
    pub fn import_state(
        &mut self,
        params: &ParamSet,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let step = tensors
            .get("opt.step")
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks opt.step".into()))?;
        self.step_count = step.item()? as u64;
        if matches!(self.kind, OptimizerKind::Sgd) {
            return Ok(());
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let name = params.name(i);
            let mk = format!("opt.m.{name}");
            let vk = format!("opt.v.{name}");
            let mt = tensors
                .get(&mk)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {mk}")))?;
            let vt = tensors
                .get(&vk)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {vk}")))?;
            if mt.shape() != params.tensor(i).shape() || vt.shape() != params.tensor(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for {name}"
                )));
            }
            m.push(mt.clone());
            v.push(vt.clone());
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Scales all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm; callers log it as a divergence early
/// warning.
pub fn clip_gradients_by_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(Tensor::squared_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(value));
        p
    }

    #[test]
    fn sgd_contracts_a_quadratic_at_the_known_rate() {
        // f(x) = x^2, lr = 0.1: each step multiplies x by 0.8, so after
        // 100 steps x = 0.8^100 * x0 which is about 2.04e-10 * x0.
        let mut params = single_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * params.tensor(0).data()[0]);
            opt.step(&mut params, &[g]).unwrap();
        }
        let x = params.tensor(0).data()[0];
        let expected = 0.8f64.powi(100);
        assert!((x - expected).abs() < 1e-18, "x = {x:e}");
    }

    #[test]
    fn adam_reaches_a_quadratic_minimum() {
        let mut params = single_param(3.0);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1);
        for _ in 0..300 {
            let g = Tensor::scalar(2.0 * params.tensor(0).data()[0]);
            opt.step(&mut params, &[g]).unwrap();
        }
        assert!(params.tensor(0).data()[0].abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_is_refused_by_name() {
        let mut params = single_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        let err = opt
            .step(&mut params, &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        match err {
            crate::error::Error::NonFiniteGradient { name } => assert_eq!(name, "x"),
            other => panic!("unexpected error {other:?}"),
        }
        // The refused step must not have advanced the counter.
        assert_eq!(opt.step_count(), 0);
        assert_eq!(params.tensor(0).data()[0], 1.0);
    }

    #[test]
    fn clip_preserves_direction_and_caps_norm() {
        let mut grads = vec![
            Tensor::from_vec(vec![3.0, 0.0]).unwrap(),
            Tensor::from_vec(vec![0.0, 4.0]).unwrap(),
        ];
        let norm = clip_gradients_by_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads[1].data()[1] - 0.8).abs() < 1e-12);
        // Below the cap nothing changes.
        let before = grads[0].data()[0];
        clip_gradients_by_norm(&mut grads, 10.0);
        assert_eq!(grads[0].data()[0], before);
    }

    #[test]
    fn exported_state_resumes_bit_exactly() {
        let grad_at = |x: f64| Tensor::scalar(x.cos() + 2.0 * x);

        // Uninterrupted reference run: 10 Adam steps.
        let mut ref_params = single_param(0.7);
        let mut ref_opt = OptimizerState::new(OptimizerKind::adam(), 0.05);
        for _ in 0..10 {
            let g = grad_at(ref_params.tensor(0).data()[0]);
            ref_opt.step(&mut ref_params, &[g]).unwrap();
        }

        // Same schedule, but export after 4 steps and resume in a fresh
        // optimizer for the remaining 6.
        let mut params = single_param(0.7);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.05);
        for _ in 0..4 {
            let g = grad_at(params.tensor(0).data()[0]);
            opt.step(&mut params, &[g]).unwrap();
        }
        let exported: BTreeMap<String, Tensor> = opt.export_state(&params).into_iter().collect();
        let mut resumed = OptimizerState::new(OptimizerKind::adam(), 0.05);
        resumed.import_state(&params, &exported).unwrap();
        for _ in 0..6 {
            let g = grad_at(params.tensor(0).data()[0]);
            resumed.step(&mut params, &[g]).unwrap();
        }

        assert_eq!(resumed.step_count(), ref_opt.step_count());
        assert_eq!(
            params.tensor(0).data()[0].to_bits(),
            ref_params.tensor(0).data()[0].to_bits()
        );
    }
}
