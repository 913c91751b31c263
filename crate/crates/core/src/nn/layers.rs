use candle_core::{Tensor, Var, D};

use super::conv::{conv2d, conv_transpose2d, ConvGeometry};
use super::params::Init;
use crate::error::Result;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics (and running-stat updates) in batch normalization.
    pub train: bool,
    /// Keep parameters in the autograd graph.
    pub param_grads: bool,
    /// Fold batch statistics into the running estimates.
    pub update_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { train: true, param_grads: true, update_stats: true };
    /// Batch statistics with parameters detached and no state change: frozen matchers.
    pub const FROZEN: Mode = Mode { train: true, param_grads: false, update_stats: false };
    /// Batch statistics, parameters in the graph, no state change: gradient probes.
    pub const PROBE: Mode = Mode { train: true, param_grads: true, update_stats: false };
    pub const EVAL: Mode = Mode { train: false, param_grads: false, update_stats: false };

    pub fn param(&self, v: &Var) -> Tensor {
        if self.param_grads {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(mut init: Init<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.uniform_fan_in("weight", &[out_dim, in_dim], in_dim)?;
        let bias = init.uniform_fan_in("bias", &[out_dim], in_dim)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = mode.param(&self.weight);
        let b = mode.param(&self.bias);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mut init: Init<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = init.uniform_fan_in("weight", &[c_out, c_in, kernel, kernel], fan_in)?;
        let bias = if bias {
            Some(init.uniform_fan_in("bias", &[c_out], fan_in)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: ConvGeometry::new(stride, padding),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = conv2d(x, &mode.param(&self.weight), self.geom)?;
        add_channel_bias(y, self.bias.as_ref(), mode)
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Var>, mode: Mode) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&mode.param(b).reshape((1, c, 1, 1))?)?)
        }
        None => Ok(y),
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mut init: Init<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        // Fan-in follows the weight's second axis, as for the usual framework default.
        let fan_in = c_out * kernel * kernel;
        let weight = init.uniform_fan_in("weight", &[c_in, c_out, kernel, kernel], fan_in)?;
        let bias = if bias {
            Some(init.uniform_fan_in("bias", &[c_out], fan_in)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: ConvGeometry::new(stride, padding),
            output_padding: 0,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = conv_transpose2d(x, &mode.param(&self.weight), self.geom, self.output_padding)?;
        add_channel_bias(y, self.bias.as_ref(), mode)
    }
}

/// Batch normalization over (N) for 2-D inputs or (N, H, W) for 4-D inputs.
#[derive(Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(mut init: Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[channels], 1.0)?,
            beta: init.constant("bias", &[channels], 0.0)?,
            running_mean: init.buffer("running_mean", &[channels], 0.0)?,
            running_var: init.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let rank = x.rank();
        let c = self.gamma.dims()[0];
        let stat_shape: Vec<usize> = if rank == 4 { vec![1, c, 1, 1] } else { vec![1, c] };
        let (mean, var) = if mode.train {
            let (mean, var) = if rank == 4 {
                let flat = x.transpose(0, 1)?.flatten_from(1)?;
                (flat.mean_keepdim(1)?, flat.broadcast_sub(&flat.mean_keepdim(1)?)?.sqr()?.mean_keepdim(1)?)
            } else {
                let t = x.t()?;
                (t.mean_keepdim(1)?, t.broadcast_sub(&t.mean_keepdim(1)?)?.sqr()?.mean_keepdim(1)?)
            };
            let n = x.elem_count() / c;
            if mode.update_stats {
                self.update_running(&mean.detach().flatten_all()?, &var.detach().flatten_all()?, n)?;
            }
            (mean.reshape(stat_shape.as_slice())?, var.reshape(stat_shape.as_slice())?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape(stat_shape.as_slice())?,
                self.running_var.as_tensor().detach().reshape(stat_shape.as_slice())?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = mode.param(&self.gamma).reshape(stat_shape.as_slice())?;
        let b = mode.param(&self.beta).reshape(stat_shape.as_slice())?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, n: usize) -> Result<()> {
        let unbiased = if n > 1 {
            (var * (n as f64 / (n as f64 - 1.0)))?
        } else {
            var.clone()
        };
        let m = self.momentum;
        let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
        let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
        self.running_mean.set(&rm)?;
        self.running_var.set(&rv)?;
        Ok(())
    }
}

/// Per-sample, per-channel normalization with a learned affine map.
#[derive(Clone)]
pub struct InstanceNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(mut init: Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[channels], 1.0)?,
            beta: init.constant("bias", &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        let g = mode.param(&self.gamma).reshape((1, c, 1, 1))?;
        let b = mode.param(&self.beta).reshape((1, c, 1, 1))?;
        Ok(xhat.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let neg = (x.minimum(0.0)? * slope)?;
    Ok((x.relu()? + neg)?)
}

/// Center crop of the two trailing spatial axes.
pub fn center_crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, ih, iw) = x.dims4()?;
    if ih == h && iw == w {
        return Ok(x.clone());
    }
    let top = (ih - h) / 2;
    let left = (iw - w) / 2;
    Ok(x.narrow(2, top, h)?.narrow(3, left, w)?)
}

/// 2×2 windows with stride 2 as a reshape, so every derivative order stays available.
/// Odd trailing rows and columns are dropped.
fn pool_windows(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, oh * 2)?.narrow(3, 0, ow * 2)?
    } else {
        x.clone()
    };
    Ok(x.reshape((n, c, oh, 2, ow, 2))?)
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(pool_windows(x)?.mean(5)?.mean(3)?)
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(pool_windows(x)?.max(5)?.max(3)?)
}

/// (N, C, H, W) → (N, C)
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(2)?)
}

/// (N, C, H, W) → (N, C)
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn batch_norm_normalizes_and_tracks() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = crate::seed::rng(0, &[]);
        let bn = BatchNorm::new(Init::new(&mut store, &mut rng), 2).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 10.0, 3.0, 20.0, 5.0, 30.0], (3, 2), &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::TRAIN).unwrap();
        let col: Vec<f64> = y.t().unwrap().get(0).unwrap().to_vec1().unwrap();
        let s = (8.0f64 / 3.0 + 1e-5).sqrt();
        for (got, want) in col.iter().zip([-2.0 / s, 0.0, 2.0 / s]) {
            assert!((got - want).abs() < 1e-12);
        }
        // running mean moves 10% toward the batch mean (3, 20)
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
        let rv: Vec<f64> = bn.running_var.as_tensor().to_vec1().unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_leaves_running_stats() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = crate::seed::rng(0, &[]);
        let bn = BatchNorm::new(Init::new(&mut store, &mut rng), 3).unwrap();
        let before = store.digest().unwrap();
        let x = Tensor::ones((2, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(store.digest().unwrap(), before);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 1.0 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-6));
    }

    #[test]
    fn crop_and_leaky() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let c: Vec<f32> = center_crop(&x, 2, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(c, vec![5.0, 6.0, 9.0, 10.0]);
        let l: Vec<f32> = leaky_relu(&Tensor::new(&[-2f32, 3.0], &Device::Cpu).unwrap(), 0.2)
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(l, vec![-0.4, 3.0]);
    }

    #[test]
    fn pooling_windows() {
        let x = Tensor::arange(0f32, 25.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 5)).unwrap();
        let a: Vec<f32> = avg_pool2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, vec![3.0, 5.0, 13.0, 15.0]);
        let m: Vec<f32> = max_pool2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(m, vec![6.0, 8.0, 16.0, 18.0]);
        let g: Vec<f32> = global_max_pool(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![24.0]);
        let g: Vec<f32> = global_avg_pool(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![12.0]);
    }
}
