//! Parameter storage, small layers, and the AdamW optimizer.
//!
//! Layers are built from differentiable tensor primitives only, so every
//! parameter participates in reverse-mode gradients at both 32 and 64 bit.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Optimizer group a parameter belongs to; the groups get separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Rest,
}

pub const INIT_STD: f64 = 0.02;

/// Named trainable parameters.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, (Var, Group)>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], group: Group) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), (var, group));
        Ok(out)
    }

    /// Truncated normal at two standard deviations.
    pub fn trunc_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        group: Group,
        rng: &mut R,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                values.push(z * std);
            }
        }
        self.insert(name, values, shape, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: Group) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, group)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name).map(|(v, _)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var, Group)> {
        self.vars.iter().map(|(k, (v, g))| (k.as_str(), v, *g))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|(v, _)| v.elem_count()).sum()
    }

    /// Snapshot of every parameter keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, (v, _))| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites parameter values in place. Every stored name must be present.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, (var, _)) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// `y = x W^T + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.trunc_normal(&format!("{name}.weight"), &[out_dim, in_dim], INIT_STD, group, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], 0.0, group)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Weight and bias start at zero (identity residual branches).
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_dim, in_dim], 0.0, group)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], 0.0, group)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[dim], 1.0, group)?,
            beta: store.constant(&format!("{name}.bias"), &[dim], 0.0, group)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Same-padded square convolution over `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        // fan-in scaled init keeps activations O(1) through the small stacks
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.trunc_normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], std, group, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0, group)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    /// Overrides the bias with a constant (used for prior-probability init).
    pub fn with_bias_value(self, store: &ParamStore, name: &str, value: f64) -> Result<Self> {
        let var = store
            .get(&format!("{name}.bias"))
            .ok_or_else(|| Error::InvalidArgument(format!("no bias for `{name}`")))?;
        var.set(&(var.ones_like()? * value)?)?;
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Logistic function in its tanh form, which neither overflows nor produces
/// `0 * inf` in the backward pass for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Decoupled-weight-decay Adam whose moment estimates can be checkpointed.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    /// Updates each parameter has received. Bias correction runs on these,
    /// so a parameter that first sees a gradient late (the noise decoder)
    /// starts with properly sized steps.
    counts: Vec<u64>,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, lr: f64, weight_decay: f64) -> Result<Self> {
        let first = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let counts = vec![0; params.len()];
        Ok(Self {
            params,
            counts,
            first,
            second,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            self.counts[i] += 1;
            let t = self.counts[i].min(i32::MAX as u64) as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            // gradients keep their graph; detach so the moments don't pin every step's activations
            let g = g.detach();
            let g = &g;
            let m = ((&self.first[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - self.lr * self.weight_decay))?;
            var.set(&(decayed - (update * self.lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`, update counts as
    /// one-element F64 tensors keyed `t.<param>`.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (i, (name, var)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.first[i].clone());
            out.insert(format!("v.{name}"), self.second[i].clone());
            out.insert(format!("t.{name}"), Tensor::new(&[self.counts[i] as f64], var.device())?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
            // older checkpoints carry only the shared count
            self.counts[i] = match state.get(&format!("t.{name}")) {
                Some(t) => t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0] as u64,
                None => step,
            };
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut a = ParamStore::new(DType::F64, Device::Cpu);
        let mut b = ParamStore::new(DType::F64, Device::Cpu);
        let ta = a.trunc_normal("w", &[64, 64], 0.02, Group::Rest, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tb = b.trunc_normal("w", &[64, 64], 0.02, Group::Rest, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let va = ta.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, tb.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        assert!(va.iter().all(|v| v.abs() <= 0.04));
        let mean = va.iter().sum::<f64>() / va.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(DType::F32, Device::Cpu);
        s.constant("x", &[2], 0.0, Group::Rest).unwrap();
        assert!(s.constant("x", &[2], 0.0, Group::Rest).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&mut s, "ln", 4, Group::Rest).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 1000.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_saturates_with_finite_gradients() {
        let var = Var::new(&[-200f32, -20.0, 0.0, 20.0, 200.0], &Device::Cpu).unwrap();
        let y = sigmoid(var.as_tensor()).unwrap();
        let v = y.to_vec1::<f32>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[4], 1.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(var.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|x| x.is_finite() && *x >= 0.0), "{g:?}");
        assert!((g[2] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn adamw_moments_are_detached() {
        let var = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), var.clone())], 0.1, 0.0).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for t in opt.state().unwrap().values() {
            assert!(t.backward().is_err() || t.backward().unwrap().get(var.as_tensor()).is_none());
        }
    }

    #[test]
    fn adamw_first_update_is_lr_sized_even_late() {
        // `b` sees no gradient for 500 steps; its first step must still be lr
        let a = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let b = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("a".into(), a.clone()), ("b".into(), b.clone())], 0.01, 0.0).unwrap();
        for _ in 0..500 {
            opt.step(&a.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap()).unwrap();
        }
        let both = (a.as_tensor().sqr().unwrap() + b.as_tensor().sqr().unwrap()).unwrap().sum_all().unwrap();
        opt.step(&both.backward().unwrap()).unwrap();
        let moved = 1.0 - b.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((moved - 0.01).abs() < 1e-9, "{moved}");

        let state = opt.state().unwrap();
        let mut fresh = AdamW::new(vec![("a".into(), a.clone()), ("b".into(), b.clone())], 0.01, 0.0).unwrap();
        fresh.load_state(&state, opt.steps_taken()).unwrap();
        assert_eq!(fresh.counts, vec![501, 1]);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let var = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), var.clone())], 0.1, 0.0).unwrap();
        for _ in 0..300 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // zero gradient leaves only the multiplicative decay
        let var = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), var.clone())], 0.1, 0.5).unwrap();
        let x = var.as_tensor();
        let loss = (x - x).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.95).abs() < 1e-12);
    }
}
