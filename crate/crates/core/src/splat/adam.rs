use super::backward::Gradients;
use super::{GaussianSet, LOG_SCALE, OPACITY, ROTATION, SH};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub sh0: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub sh_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 0.00016,
            sh0: 0.0025,
            opacity: 0.05,
            scale: 0.005,
            rotation: 0.001,
            sh_rest: 0.0005,
        }
    }
}

impl LearningRates {
    /// Learning rate for every slot of one Gaussian's parameter block.
    pub fn per_slot(&self, stride: usize) -> Vec<f64> {
        (0..stride)
            .map(|j| match j {
                j if j < LOG_SCALE => self.position,
                j if j < ROTATION => self.scale,
                j if j < OPACITY => self.rotation,
                OPACITY => self.opacity,
                j if j < SH + 3 => self.sh0,
                _ => self.sh_rest,
            })
            .collect()
    }
}

/// Adam state aligned with a [`GaussianSet`]. Step counts are kept per
/// Gaussian so that late additions get their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub rates: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    stride: usize,
    lr: Vec<f64>,
    m: Vec<T>,
    v: Vec<T>,
    steps: Vec<u32>,
}

impl<T: Real> Adam<T> {
    pub fn new(stride: usize, rates: LearningRates) -> Self {
        Self {
            rates,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            stride,
            lr: rates.per_slot(stride),
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn for_set(set: &GaussianSet<T>, rates: LearningRates) -> Self {
        let mut a = Self::new(set.stride(), rates);
        a.resize(set.len());
        a
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    /// Appends zeroed state up to `n` Gaussians.
    pub fn resize(&mut self, n: usize) {
        assert!(n >= self.len(), "use retain to shrink");
        self.m.resize(n * self.stride, T::zero());
        self.v.resize(n * self.stride, T::zero());
        self.steps.resize(n, 0);
    }

    /// Drops the state of removed Gaussians, matching [`GaussianSet::retain`].
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let s = self.stride;
        let mut w = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                if w != i {
                    self.m.copy_within(i * s..(i + 1) * s, w * s);
                    self.v.copy_within(i * s..(i + 1) * s, w * s);
                    self.steps[w] = self.steps[i];
                }
                w += 1;
            }
        }
        self.m.truncate(w * s);
        self.v.truncate(w * s);
        self.steps.truncate(w);
    }

    /// One Adam update; quaternions are renormalized afterwards.
    pub fn step(&mut self, set: &mut GaussianSet<T>, grads: &Gradients<T>) {
        assert_eq!(set.stride(), self.stride);
        assert_eq!(grads.data.len(), set.params().len());
        if self.len() < set.len() {
            self.resize(set.len());
        }
        assert_eq!(self.len(), set.len(), "optimizer state out of sync");
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let eps = T::lit(self.eps);
        let s = self.stride;
        let params = set.params_mut();
        for i in 0..self.steps.len() {
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            for j in 0..s {
                let k = i * s + j;
                let g = grads.data[k];
                self.m[k] = b1 * self.m[k] + (T::one() - b1) * g;
                self.v[k] = b2 * self.v[k] + (T::one() - b2) * g * g;
                let m_hat = self.m[k] / c1;
                let v_hat = self.v[k] / c2;
                params[k] -= T::lit(self.lr[j]) * m_hat / (v_hat.sqrt() + eps);
            }
        }
        set.normalize_rotations();
    }
}
