//! Layer primitives shared by every network.

use candle_core::{Tensor, Var, D};

use super::params::{Init, ParamStore};
use crate::error::Result;

/// Whether normalization layers use batch statistics and update running
/// averages (`Train`) or use the stored running averages (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, LEAKY_SLOPE)
}

fn gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Nearest-neighbour 2x upsampling built from broadcasts so its gradient
/// accumulates correctly.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Average-pool a `(N, C, S, S)` tensor down to `(N, C, target, target)`.
pub fn resize_to(x: &Tensor, target: usize) -> Result<Tensor> {
    let (_, _, h, _) = x.dims4()?;
    if h == target {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(h / target)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal init for a following leaky ReLU.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        Self::with_init(
            store,
            name,
            (cin, cout, kernel, stride),
            bias,
            Init::Kaiming { fan_in, gain: gain(LEAKY_SLOPE) },
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        (cin, cout, kernel, stride): (usize, usize, usize, usize),
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[cout, cin, kernel, kernel], init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, bias: bool) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[fout, fin],
            Init::Kaiming { fan_in: fin, gain: 1.0 },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[fout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(N, C)` or `(N, C, H, W)` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let view: Vec<usize> = (0..x.rank()).map(|i| if i == 1 { c } else { 1 }).collect();
        let (mean, var) = match mode {
            Mode::Train => {
                // Move C to the front and flatten the rest.
                let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
                let count = flat.dim(1)?;
                let mean = flat.mean(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
                let var = centered.sqr()?.mean(D::Minus1)?;
                let unbiased = (var.detach() * (count as f64 / (count.max(2) - 1) as f64))?;
                let m = self.momentum;
                self.running_mean.set(
                    &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?,
                )?;
                self.running_var
                    .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_detached_tensor(),
                self.running_var.as_detached_tensor(),
            ),
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (inv * &self.gamma)?;
        let shift = (&self.beta - (&mean * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape(view.as_slice())?)?
            .broadcast_add(&shift.reshape(view.as_slice())?)?)
    }
}

/// Self-attention over spatial positions with a zero-initialized residual
/// gate, so the block starts as the identity.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gamma: Tensor,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let inner = (channels / 8).max(1);
        let lin = |fan_in| Init::Kaiming { fan_in, gain: 1.0 };
        Ok(Self {
            query: Conv2d::with_init(store, &format!("{name}.query"), (channels, inner, 1, 1), true, lin(channels))?,
            key: Conv2d::with_init(store, &format!("{name}.key"), (channels, inner, 1, 1), true, lin(channels))?,
            value: Conv2d::with_init(store, &format!("{name}.value"), (channels, channels, 1, 1), true, lin(channels))?,
            gamma: store.param(&format!("{name}.gamma"), &[1], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let q = self.query.forward(x)?.flatten_from(2)?; // (n, k, hw)
        let k = self.key.forward(x)?.flatten_from(2)?;
        let v = self.value.forward(x)?.flatten_from(2)?; // (n, c, hw)
        let logits = q.transpose(1, 2)?.contiguous()?.matmul(&k)?; // (n, hw, hw)
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((n, c, h, w))?;
        Ok((x + out.broadcast_mul(&self.gamma)?)?)
    }
}

/// Two 3x3 convolutions with a leaky-ReLU between and an identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), channels, channels, 3, 1, true)?,
            b: Conv2d::with_init(
                store,
                &format!("{name}.b"),
                (channels, channels, 3, 1),
                true,
                Init::Kaiming { fan_in: channels * 9, gain: 0.1 },
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&lrelu(&self.a.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn upsample_repeats_and_accumulates_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[[[[1f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap()).unwrap();
        let y = upsample2x(x.as_tensor()).unwrap();
        assert_eq!(
            y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![1.0, 1.0, 2.0, 2.0], vec![1.0, 1.0, 2.0, 2.0], vec![3.0, 3.0, 4.0, 4.0], vec![3.0, 3.0, 4.0, 4.0]]
        );
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![4.0; 4]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2f64, 0.0, 3.0], &Device::Cpu).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap(), vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running_stats() {
        let mut s = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let bn = BatchNorm::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::new(&[[1f64, 10.0], [3.0, 20.0], [5.0, 30.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = y.mean(0).unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        // Running mean moved 10% towards the batch mean.
        let e = bn.forward(&Tensor::new(&[[0.3f64, 2.0]], &Device::Cpu).unwrap(), Mode::Eval).unwrap();
        let rv0 = 0.9 + 0.1 * 4.0;
        let expect0 = (0.3 - 0.3) / (rv0 + 1e-5f64).sqrt();
        assert!((e.to_vec2::<f64>().unwrap()[0][0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn attention_starts_as_identity() {
        let mut s = ParamStore::new(DType::F32, &Device::Cpu, 0);
        let a = SelfAttention::new(&mut s, "att", 8).unwrap();
        let x = Tensor::ones((1, 8, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let y = a.forward(&x).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
