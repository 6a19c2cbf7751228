use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// First and second moment buffers for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub state: AdamState,
    /// Frozen parameters enter the tape as constants.
    pub trainable: bool,
}

/// Named registry of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = self.params.len();
        let state = AdamState {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
        };
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            state,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sets every gradient to zeros of the matching shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(existing) => existing.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    /// One Adam update with bias correction. Frozen parameters are skipped.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - libm::pow(b1, t);
        let bc2 = 1.0 - libm::pow(b2, t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.as_ref().expect("checked above");
            let m = p.state.m.data_mut();
            for (mi, &g) in m.iter_mut().zip(grad.data()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
            }
            let v = p.state.v.data_mut();
            for (vi, &g) in v.iter_mut().zip(grad.data()) {
                *vi = b2 * *vi + (1.0 - b2) * g * g;
            }
            let (m, v) = (p.state.m.data(), p.state.v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(value: Vec<f64>) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let n = value.len();
        let id = ps.add("w", Tensor::new(vec![n], value).unwrap()).unwrap();
        (ps, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut ps, _) = single(vec![1.0]);
        assert_eq!(
            ps.add("w", Tensor::zeros(&[1])),
            Err(Error::DuplicateParameter("w".into()))
        );
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut ps, _) = single(vec![1.0]);
        assert_eq!(
            ps.adam_step(&AdamConfig::default()),
            Err(Error::MissingGradient("w".into()))
        );
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut ps, id) = single(vec![1.0, -2.0]);
        for _ in 0..10 {
            ps.zero_grads();
            ps.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps).
        let (mut ps, id) = single(vec![0.0, 0.0, 0.0]);
        ps.accumulate_grad(id, &Tensor::new(vec![3], vec![0.5, -3.0, 1e-2]).unwrap());
        let cfg = AdamConfig::default();
        ps.adam_step(&cfg).unwrap();
        let expected = [
            -cfg.lr * 0.5 / (0.5 + cfg.eps),
            cfg.lr * 3.0 / (3.0 + cfg.eps),
            -cfg.lr * 1e-2 / (1e-2 + cfg.eps),
        ];
        for (a, b) in ps.value(id).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            assert!((a.abs() - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let (mut ps, id) = single(vec![0.0, 0.0]);
        for _ in 0..100 {
            ps.clear_grads();
            ps.accumulate_grad(id, &Tensor::new(vec![2], vec![2.0, -0.1]).unwrap());
            ps.adam_step(&AdamConfig::default()).unwrap();
        }
        let v = ps.value(id).data();
        assert!(v[0] < 0.0 && v[1] > 0.0);
    }

    #[test]
    fn frozen_parameter_skipped() {
        let (mut ps, id) = single(vec![1.0]);
        ps.set_trainable(id, false);
        ps.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(ps.value(id).data(), &[1.0]);
    }
}
