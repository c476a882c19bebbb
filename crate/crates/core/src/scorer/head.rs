//! The per-member energy head: frozen per-feature normalization, a GELU
//! hidden layer with dropout, and a scalar output.
//!
//! Inputs are sparse vectors in the member's masked coordinate space. The
//! normalization `z_j = (x_j - shift_j) * scale_j` makes the effective input
//! dense; the dense part is folded into a per-hidden-unit offset so a
//! forward pass only touches the nonzero input coordinates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::featurize::SparseVec;
use crate::seed;
use crate::theorysim::{normal_cdf, normal_pdf};

/// Variance floor of the per-feature normalization.
pub const NORM_EPS: f64 = 1e-4;

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Layer-1 weights stored input-major: `w1[j * hidden_dim + i]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Gradient with the same layout as the trainable head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl HeadGrad {
    pub fn zeros(head: &EnergyHead) -> Self {
        Self {
            w1: vec![0.0; head.w1.len()],
            b1: vec![0.0; head.hidden_dim],
            w2: vec![0.0; head.hidden_dim],
            b2: 0.0,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.b1.len() + 1);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }
}

/// Per-sample activations kept for the backward pass.
pub(crate) struct Trace {
    pre: Vec<f64>,
    /// Post-dropout hidden activations.
    hidden: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1-p)), empty when dropout is off.
    keep: Vec<f64>,
}

impl EnergyHead {
    /// Standard-normal fan-in initialization with zero biases.
    pub fn init(shift: Vec<f64>, scale: Vec<f64>, hidden_dim: usize, init_seed: u64) -> Self {
        let input_dim = shift.len();
        assert_eq!(scale.len(), input_dim, "shift/scale length mismatch");
        let mut rng = seed::rng(seed::derive(init_seed, 0, "head-init"));
        let n1 = Normal::new(0.0, 1.0 / (input_dim.max(1) as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (hidden_dim.max(1) as f64).sqrt()).expect("valid std");
        let w1 = (0..input_dim * hidden_dim).map(|_| n1.sample(&mut rng)).collect();
        let w2 = (0..hidden_dim).map(|_| n2.sample(&mut rng)).collect();
        Self {
            input_dim,
            hidden_dim,
            shift,
            scale,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: 0.0,
        }
    }

    /// A head with all trainable parameters zero and identity normalization.
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            shift: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    /// Per-feature normalization from the mean and variance of `rows`.
    pub fn normalization(rows: &[&SparseVec], input_dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut sum = vec![0.0; input_dim];
        let mut sq = vec![0.0; input_dim];
        for r in rows {
            for (j, x) in r.iter() {
                sum[j] += x;
                sq[j] += x * x;
            }
        }
        let n = rows.len().max(1) as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| 1.0 / ((q / n - m * m).max(0.0) + NORM_EPS).sqrt())
            .collect();
        (shift, scale)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + 2 * self.hidden_dim + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, rest) = rest.split_at(self.hidden_dim);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    /// `sum_j w1[j, i] * scale_j * shift_j` for each hidden unit.
    pub fn offsets(&self) -> Vec<f64> {
        let h = self.hidden_dim;
        let mut out = vec![0.0; h];
        for j in 0..self.input_dim {
            let c = self.scale[j] * self.shift[j];
            if c != 0.0 {
                let row = &self.w1[j * h..(j + 1) * h];
                out.iter_mut().zip(row).for_each(|(o, w)| *o += w * c);
            }
        }
        out
    }

    fn pre_activation(&self, x: &SparseVec, offsets: &[f64]) -> Vec<f64> {
        let h = self.hidden_dim;
        let mut a: Vec<f64> = self.b1.iter().zip(offsets).map(|(b, o)| b - o).collect();
        for (j, v) in x.iter() {
            let s = self.scale[j] * v;
            let row = &self.w1[j * h..(j + 1) * h];
            a.iter_mut().zip(row).for_each(|(a, w)| *a += w * s);
        }
        a
    }

    /// Inference energy of a masked sparse input; dropout is disabled.
    pub fn energy(&self, x: &SparseVec, offsets: &[f64]) -> f64 {
        let a = self.pre_activation(x, offsets);
        self.b2 + a.iter().zip(&self.w2).map(|(a, w)| gelu(*a) * w).sum::<f64>()
    }

    /// Training forward pass. `dropout` > 0 draws one inverted-dropout
    /// multiplier per hidden unit from `rng`.
    pub(crate) fn forward_train<R: Rng>(&self, x: &SparseVec, offsets: &[f64], dropout: f64, rng: &mut R) -> (f64, Trace) {
        let pre = self.pre_activation(x, offsets);
        let keep: Vec<f64> = if dropout > 0.0 {
            let k = 1.0 / (1.0 - dropout);
            (0..self.hidden_dim)
                .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { k })
                .collect()
        } else {
            Vec::new()
        };
        let hidden: Vec<f64> = pre
            .iter()
            .enumerate()
            .map(|(i, a)| gelu(*a) * keep.get(i).copied().unwrap_or(1.0))
            .collect();
        let e = self.b2 + hidden.iter().zip(&self.w2).map(|(h, w)| h * w).sum::<f64>();
        (e, Trace { pre, hidden, keep })
    }

    /// Accumulates `g * dE/dtheta` for one sample into `grad`, except the
    /// dense normalization-shift term of `w1`, whose per-unit coefficient is
    /// added to `shift_acc` and applied once per batch by [`Self::finish_grad`].
    pub(crate) fn backward(&self, x: &SparseVec, trace: &Trace, g: f64, grad: &mut HeadGrad, shift_acc: &mut [f64]) {
        let h = self.hidden_dim;
        grad.b2 += g;
        let mut da = vec![0.0; h];
        for i in 0..h {
            grad.w2[i] += g * trace.hidden[i];
            let keep = trace.keep.get(i).copied().unwrap_or(1.0);
            da[i] = g * self.w2[i] * keep * gelu_grad(trace.pre[i]);
            grad.b1[i] += da[i];
            shift_acc[i] += da[i];
        }
        for (j, v) in x.iter() {
            let s = self.scale[j] * v;
            let row = &mut grad.w1[j * h..(j + 1) * h];
            row.iter_mut().zip(&da).for_each(|(r, d)| *r += d * s);
        }
    }

    pub(crate) fn finish_grad(&self, grad: &mut HeadGrad, shift_acc: &[f64]) {
        let h = self.hidden_dim;
        for j in 0..self.input_dim {
            let c = self.scale[j] * self.shift[j];
            if c != 0.0 {
                let row = &mut grad.w1[j * h..(j + 1) * h];
                row.iter_mut().zip(shift_acc).for_each(|(r, s)| *r -= s * c);
            }
        }
    }

    /// `theta -= step * grad` over all trainable parameters.
    pub(crate) fn descend(&mut self, grad: &HeadGrad, step: f64) {
        self.w1.iter_mut().zip(&grad.w1).for_each(|(w, g)| *w -= step * g);
        self.b1.iter_mut().zip(&grad.b1).for_each(|(w, g)| *w -= step * g);
        self.w2.iter_mut().zip(&grad.w2).for_each(|(w, g)| *w -= step * g);
        self.b2 -= step * grad.b2;
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(u32, f64)]) -> SparseVec {
        SparseVec {
            indices: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Dense reference forward pass written directly from the definition.
    fn dense_energy(h: &EnergyHead, x: &SparseVec) -> f64 {
        let xd = x.to_dense(h.input_dim);
        let z: Vec<f64> = (0..h.input_dim).map(|j| (xd[j] - h.shift[j]) * h.scale[j]).collect();
        let mut e = h.b2;
        for i in 0..h.hidden_dim {
            let mut a = h.b1[i];
            for j in 0..h.input_dim {
                a += h.w1[j * h.hidden_dim + i] * z[j];
            }
            e += h.w2[i] * gelu(a);
        }
        e
    }

    #[test]
    fn sparse_forward_matches_dense_definition() {
        let mut h = EnergyHead::init(vec![0.1, -0.2, 0.3, 0.0], vec![2.0, 1.0, 0.5, 3.0], 5, 7);
        h.b1 = vec![0.1, -0.1, 0.2, 0.0, 0.3];
        h.b2 = 0.25;
        let x = sv(&[(0, 1.0), (2, -0.7)]);
        let off = h.offsets();
        assert!((h.energy(&x, &off) - dense_energy(&h, &x)).abs() < 1e-12);
    }

    #[test]
    fn zero_head_outputs_bias() {
        let mut h = EnergyHead::zeros(6, 3);
        h.b2 = -1.5;
        let off = h.offsets();
        for x in [sv(&[]), sv(&[(1, 3.0), (5, -2.0)])] {
            assert_eq!(h.energy(&x, &off), -1.5);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(-20.0) - 2.061_153_620_314_380_7e-9).abs() < 1e-20);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn normalization_uses_population_moments() {
        let a = sv(&[(0, 1.0), (1, 2.0)]);
        let b = sv(&[(0, 3.0)]);
        let (shift, scale) = EnergyHead::normalization(&[&a, &b], 3);
        assert_eq!(shift, vec![2.0, 1.0, 0.0]);
        assert!((scale[0] - 1.0 / (1.0 + NORM_EPS).sqrt()).abs() < 1e-15);
        assert!((scale[2] - 1.0 / NORM_EPS.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn flat_round_trip() {
        let h = EnergyHead::init(vec![0.0; 4], vec![1.0; 4], 3, 1);
        let mut g = EnergyHead::zeros(4, 3);
        g.set_flat(&h.to_flat());
        assert_eq!(g.to_flat(), h.to_flat());
    }
}
