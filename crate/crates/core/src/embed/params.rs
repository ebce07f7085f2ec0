//! Flat parameter storage and the Adam update rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Param::zeros(name, shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Flat view for finite-difference checks: `(tensor, offset)` per scalar.
    pub fn scalar_index(&self) -> Vec<(usize, usize)> {
        self.params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |o| (t, o)))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers mirroring a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (t, p) in params.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m.0[t], &mut self.v.0[t], &grads.0[t]);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::default();
        let mut p = Param::zeros("w", &[2]);
        p.data = vec![1.0, -1.0];
        ps.push(p);
        let mut adam = Adam::new(&ps, 0.1);
        adam.step(&mut ps, &Grads(vec![vec![3.0, -0.5]]));
        // Bias-corrected first step is lr * sign(g).
        assert!((ps.get(0)[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(0)[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::default();
        let mut p = Param::zeros("w", &[1]);
        p.data = vec![5.0];
        ps.push(p);
        let mut adam = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let w = ps.get(0)[0];
            adam.step(&mut ps, &Grads(vec![vec![2.0 * (w - 2.0)]]));
        }
        assert!((ps.get(0)[0] - 2.0).abs() < 1e-2);
    }
}
