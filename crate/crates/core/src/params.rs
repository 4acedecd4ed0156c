//! Parameter storage, initialisation and the AdamW optimizer with a
//! linear warmup / linear decay schedule.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    /// Whether decoupled weight decay applies (weight matrices only).
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Mat, decay: bool) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Xavier-uniform weight matrix of shape `fan_in × fan_out`.
    pub fn xavier<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Mat::from_vec(fan_in, fan_out, data), true)
    }

    pub fn gaussian<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, Mat::from_vec(rows, cols, data), true)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols), false)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::filled(rows, cols, 1.0), false)
    }
}

/// Sum of per-parameter gradients across examples.
#[derive(Default)]
pub struct GradAccumulator {
    pub grads: HashMap<ParamId, Mat>,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: HashMap<ParamId, Mat>) {
        for (id, g) in grads {
            match self.grads.get_mut(&id) {
                Some(e) => e.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Mat::is_finite)
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).ceil() as usize).max(1);
        LinearSchedule { peak, warmup_steps, total_steps: total_steps.max(1) }
    }

    /// Learning rate used for 1-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else {
            let rest = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
            let done = (step - self.warmup_steps) as f64;
            (self.peak * (1.0 - done / rest)).max(0.0)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m: Vec<Mat> = store.values.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccumulator, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&id, g) in &grads.grads {
            let i = id.0;
            let decay = store.decay[i];
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut store.values[i]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                if decay {
                    p.data[k] -= lr * self.weight_decay * p.data[k];
                }
                p.data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_peaks_at_ceil_fraction_then_decays() {
        let s = LinearSchedule::new(1.0, 0.1, 95);
        assert_eq!(s.warmup_steps, 10);
        let lrs: Vec<f64> = (1..=95).map(|t| s.lr(t)).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs.iter().position(|&v| v == peak), Some(9));
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[9..].windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*lrs.last().unwrap(), 0.0);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::default();
        let id = store.add("w", Mat::row_vector(vec![1.0, -1.0]), true);
        let mut opt = AdamW::new(&store, 0.0);
        let mut acc = GradAccumulator::default();
        acc.add([(id, Mat::row_vector(vec![2.0, -3.0]))].into_iter().collect());
        opt.step(&mut store, &acc, 0.1);
        let p = store.get(id);
        assert!((p.data[0] - 0.9).abs() < 1e-6);
        assert!((p.data[1] + 0.9).abs() < 1e-6);
    }
}
