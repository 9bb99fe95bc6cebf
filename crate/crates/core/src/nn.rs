//! Minimal layer set on top of candle tensors: a named parameter store with
//! seeded initialization, conv / batch-norm / linear layers and Adam.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
struct StoreInner {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    rng: Option<ChaCha8Rng>,
}

/// Named trainable parameters and non-trainable buffers (batch-norm running
/// statistics). Cloning shares the underlying variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        let inner = StoreInner {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Default::default()
        };
        Self {
            inner: Arc::new(Mutex::new(inner)),
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(&self, name: &str, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut inner = self.inner.lock().unwrap();
        let full = self.full_name(name);
        let list = if trainable { &mut inner.params } else { &mut inner.buffers };
        if list.iter().any(|(n, _)| *n == full) {
            return Err(Error::Config(format!("duplicate parameter name {full}")));
        }
        list.push((full, var.clone()));
        Ok(var)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = {
            let mut inner = self.inner.lock().unwrap();
            let rng = inner.rng.as_mut().expect("store rng");
            let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        self.register(name, values, shape, true)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, false)
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().params.clone()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().buffers.clone()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.params.iter().chain(inner.buffers.iter()).cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.all().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Snapshot of every variable, keyed by `{prefix}.{name}`.
    pub fn export(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        self.all()
            .into_iter()
            .map(|(n, v)| Ok((format!("{prefix}.{n}"), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite every variable from a snapshot produced by [`ParamStore::export`].
    pub fn import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.all() {
            let key = format!("{prefix}.{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Nearest-neighbour x2 upsampling built from broadcast so it differentiates.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(crate::ops::upsample2(x)?)
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok((x.reshape((b, c, h / 2, 2, w / 2, 2))?.sum(5)?.sum(3)? * 0.25)?)
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Cross-correlation of `x (B, C, H, W)` with `w (O, C, kh, kw)` as one
/// matrix product over extracted patches. Same result as `Tensor::conv2d`, with a
/// much cheaper backward pass on CPU.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(shape_err!("conv2d: input {:?} does not fit kernel {:?}", x.dims(), w.dims()));
    }
    if kh == 1 && kw == 1 && padding == 0 && stride == 1 {
        let y = w.reshape((o, c))?.broadcast_matmul(&x.reshape((b, c, h * wd))?)?;
        return Ok(y.reshape((b, o, h, wd))?);
    }
    let (patches, ho, wo) = crate::ops::im2col(x, kh, kw, padding, stride)?;
    let y = w.reshape((o, c * kh * kw))?.matmul(&patches)?;
    Ok(y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(store: &ParamStore, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        Ok(Self {
            weight: store.normal("weight", &[out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt())?,
            bias: store.constant("bias", &[out_c], 0.0)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization over (B, H, W) with learned affine and running stats.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant("gamma", &[channels], 1.0)?,
            beta: store.constant("beta", &[channels], 0.0)?,
            running_mean: store.buffer("running_mean", &[channels], 0.0)?,
            running_var: store.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        // Channel-major rows keep every reduction on the innermost axis.
        let rows = x.transpose(0, 1)?.reshape((c, b * h * w))?;
        let (centered, var) = match mode {
            Mode::Train => {
                let mean = rows.mean_keepdim(1)?;
                let centered = rows.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(1)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (centered, var)
            }
            Mode::Eval => (
                rows.broadcast_sub(&self.running_mean.reshape((c, 1))?)?,
                self.running_var.reshape((c, 1))?,
            ),
        };
        let scale = self.gamma.reshape((c, 1))?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = centered
            .broadcast_mul(&scale)?
            .broadcast_add(&self.beta.reshape((c, 1))?)?;
        Ok(y.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &ParamStore, in_f: usize, out_f: usize) -> Result<Self> {
        Ok(Self {
            weight: store.normal("weight", &[out_f, in_f], (1.0 / in_f as f64).sqrt())?,
            bias: store.constant("bias", &[out_f], 0.0)?,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable variables of one store. Moments are plain
/// tensors so they can be checkpointed and restored bit-exactly.
pub struct Adam {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let params = store.trainable();
        let first = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            cfg,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.first[i] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.second[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("{prefix}.m.{name}"), self.first[i].clone());
            out.insert(format!("{prefix}.v.{name}"), self.second[i].clone());
        }
        out
    }

    pub fn import(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_reference() {
        let dev = Device::Cpu;
        for (h, w, k, s, p, c, o) in [(8, 8, 3, 1, 1, 3, 4), (8, 6, 3, 2, 1, 2, 5), (7, 5, 3, 2, 1, 2, 3), (6, 6, 1, 1, 0, 4, 2), (9, 9, 3, 1, 0, 1, 1)] {
            let x = Tensor::randn(0f64, 1.0, (2, c, h, w), &dev).unwrap();
            let k = Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let a = conv2d(&x, &k, p, s).unwrap();
            let b = x.conv2d(&k, p, s, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn store_is_seeded() {
        let a = ParamStore::new(DType::F32, 7);
        let b = ParamStore::new(DType::F32, 7);
        let wa = a.pp("x").normal("w", &[4, 4], 1.0).unwrap();
        let wb = b.pp("x").normal("w", &[4, 4], 1.0).unwrap();
        let diff = (wa.as_tensor() - wb.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        assert!(a.get("x.w").is_some());
        assert!(a.pp("x").normal("w", &[1], 1.0).is_err());
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shapes() {
        let x = Tensor::arange(0f32, 4., &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let up = upsample2(&x).unwrap();
        assert_eq!(
            up.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
        let back = avg_pool2(&up).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 1., 2., 3.]);
    }

    #[test]
    fn log_softmax_uniform() {
        let x = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
        let l = log_softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in l {
            for v in row {
                assert!((v + 5f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&store, 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (4, 2, 3, 3), &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-10);
        let rm = store.get("running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.0 && *v < 1.0));
        let e = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(e.dims(), x.dims());
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let store = ParamStore::new(DType::F32, 1);
        let w = store.normal("w", &[3], 1.0).unwrap();
        let before = w.to_vec1::<f32>().unwrap();
        let mut opt = Adam::new(&store, AdamConfig::default()).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 0.0).unwrap();
        assert_eq!(w.to_vec1::<f32>().unwrap(), before);
        opt.step(&grads, 0.1).unwrap();
        assert_ne!(w.to_vec1::<f32>().unwrap(), before);
    }
}
