//! Parameter storage, layers, and the Adam optimizer.
//!
//! All trainable state lives in one `ParamStore`, addressed by stable string
//! names (`denoiser.down1.res.conv1.w`, ...). Stage freezing works on name
//! prefixes: frozen slots are materialized as constants for the step, so no
//! gradient work is spent on them and their bytes provably never change.

use super::{ops, Buf, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct ParamStore {
    slots: Vec<Slot>,
}

struct Slot {
    name: String,
    value: Buf,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Buf) -> PId {
        let name = name.into();
        assert!(
            self.slots.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        let n = value.numel();
        self.slots.push(Slot {
            name,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        PId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: PId) -> &Buf {
        &self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: PId, value: Buf) {
        assert_eq!(self.slots[id.0].value.shape(), value.shape());
        self.slots[id.0].value = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    /// Leaf tensors for one training step. Slots where `trainable` is false
    /// come back as constants and take no part in backprop.
    pub fn leaves(&self, trainable: &[bool]) -> Leaves {
        assert_eq!(trainable.len(), self.slots.len());
        Leaves {
            ts: self
                .slots
                .iter()
                .zip(trainable)
                .map(|(s, &tr)| {
                    if tr {
                        Tensor::leaf(s.value.clone())
                    } else {
                        Tensor::constant(s.value.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn leaves_all(&self) -> Leaves {
        self.leaves(&vec![true; self.slots.len()])
    }

    /// Constant tensors for inference; nothing tracks.
    pub fn constants(&self) -> Leaves {
        self.leaves(&vec![false; self.slots.len()])
    }

    /// Marks trainable slots by name predicate.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.slots.iter().map(|s| pred(&s.name)).collect()
    }

    /// Raw copies of all values, for bit-stability assertions.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.slots.iter().map(|s| s.value.to_vec()).collect()
    }

    pub fn optimizer_state(&self, id: PId) -> (&[f64], &[f64], u64) {
        let s = &self.slots[id.0];
        (&s.m, &s.v, s.steps)
    }

    pub fn set_optimizer_state(&mut self, id: PId, m: Vec<f64>, v: Vec<f64>, steps: u64) {
        let s = &mut self.slots[id.0];
        assert_eq!(m.len(), s.value.numel());
        assert_eq!(v.len(), s.value.numel());
        s.m = m;
        s.v = v;
        s.steps = steps;
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Leaves {
    pub ts: Vec<Tensor>,
}

impl Leaves {
    pub fn t(&self, id: PId) -> &Tensor {
        &self.ts[id.0]
    }
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Buf {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Buf::new(shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Self {
        let w = if zero_init {
            Buf::zeros(&[co, ci, k, k])
        } else {
            he_normal(rng, &[co, ci, k, k], ci * k * k)
        };
        let w = ps.register(format!("{name}.w"), w);
        let b = ps.register(format!("{name}.b"), Buf::zeros(&[co]));
        Conv2d { w, b, stride, pad }
    }

    pub fn fwd(&self, lv: &Leaves, x: &Tensor) -> Tensor {
        ops::conv2d(x, lv.t(self.w), lv.t(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        zero_init: bool,
    ) -> Self {
        let w = if zero_init {
            Buf::zeros(&[din, dout])
        } else {
            he_normal(rng, &[din, dout], din)
        };
        let w = ps.register(format!("{name}.w"), w);
        let b = ps.register(format!("{name}.b"), Buf::zeros(&[dout]));
        Linear { w, b }
    }

    /// Applies to the last axis of `x[..., Din]`.
    pub fn fwd(&self, lv: &Leaves, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let din = *s.last().unwrap();
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = ops::reshape(x, &[rows, din]);
        let y = ops::matmul(&flat, lv.t(self.w));
        let y = ops::add_bcast_tail(&y, lv.t(self.b));
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = lv.t(self.w).shape()[1];
        ops::reshape(&y, &out_shape)
    }
}

#[derive(Clone, Copy)]
pub struct GroupNorm {
    pub g: PId,
    pub b: PId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let g = ps.register(format!("{name}.g"), Buf::full(&[channels], 1.0));
        let b = ps.register(format!("{name}.b"), Buf::zeros(&[channels]));
        GroupNorm { g, b, groups }
    }

    pub fn fwd(&self, lv: &Leaves, x: &Tensor) -> Tensor {
        ops::group_norm(x, lv.t(self.g), lv.t(self.b), self.groups, 1e-5)
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update over the trainable slots. Gradients are read from the step's
    /// leaves; absent gradients count as zero. Returns the pre-clip global
    /// gradient norm.
    pub fn step(
        &self,
        ps: &mut ParamStore,
        leaves: &Leaves,
        trainable: &[bool],
        grad_clip: Option<f64>,
    ) -> f64 {
        let mut sq = 0.0;
        let grads: Vec<Option<Buf>> = ps
            .slots
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if trainable[i] {
                    let g = leaves.ts[i].grad();
                    if let Some(g) = &g {
                        sq += g.data().iter().map(|v| v * v).sum::<f64>();
                    }
                    g
                } else {
                    None
                }
            })
            .collect();
        let norm = sq.sqrt();
        let scale = match grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (i, slot) in ps.slots.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            slot.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.steps as i32);
            let zeros;
            let g: &[f64] = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; slot.value.numel()];
                    &zeros
                }
            };
            let mut new = slot.value.to_vec();
            for j in 0..new.len() {
                let gj = g[j] * scale;
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * gj;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = slot.m[j] / bc1;
                let vh = slot.v[j] / bc2;
                new[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            slot.value = Buf::new(slot.value.shape().to_vec(), new);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::ops;

    #[test]
    fn adam_converges_on_quadratic() {
        let mut ps = ParamStore::new();
        let p = ps.register("p", Buf::new(vec![2], vec![3.0, -2.0]));
        let adam = Adam::new(0.1);
        let trainable = vec![true];
        for _ in 0..400 {
            let lv = ps.leaves(&trainable);
            let target = Tensor::constant(Buf::new(vec![2], vec![1.0, 0.5]));
            let loss = ops::mse(lv.t(p), &target);
            loss.backward();
            adam.step(&mut ps, &lv, &trainable, None);
        }
        let v = ps.value(p).to_vec();
        assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn frozen_slots_are_bit_stable() {
        let mut ps = ParamStore::new();
        let mut rng = rng_for(1, "t", &[]);
        let a = ps.register("a", he_normal(&mut rng, &[4], 4));
        let b = ps.register("b", he_normal(&mut rng, &[4], 4));
        let before = ps.value(b).clone();
        let trainable = ps.select(|n| n == "a");
        let adam = Adam::new(0.05);
        for _ in 0..10 {
            let lv = ps.leaves(&trainable);
            let loss = ops::mse(
                &ops::mul(lv.t(a), lv.t(b)),
                &Tensor::constant(Buf::zeros(&[4])),
            );
            loss.backward();
            adam.step(&mut ps, &lv, &trainable, Some(1.0));
        }
        assert_eq!(ps.value(b), &before);
        assert_ne!(ps.value(a).data(), before.data());
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut ps = ParamStore::new();
        let mut rng = rng_for(2, "t", &[]);
        let lin = Linear::new(&mut ps, &mut rng, "l", 3, 2, false);
        let lv = ps.leaves_all();
        let x = Tensor::constant(Buf::new(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()));
        let y = lin.fwd(&lv, &x);
        assert_eq!(y.shape(), &[2, 2, 2]);
        let w = ps.value(lin.w).to_vec();
        let manual: f64 = (0..3).map(|k| k as f64 * w[k * 2]).sum();
        assert!((y.data()[0] - manual).abs() < 1e-12);
    }
}
