//! 2-D convolution kernels on the CPU.
//!
//! Three linear maps close over each other under differentiation:
//!
//! * `conv(x, w)`         forward convolution
//! * `input_grad(g, w)`   adjoint in `x` (this is also the transposed convolution)
//! * `weight_grad(x, g)`  adjoint in `w`
//!
//! Each backward pass is expressed with the other two, so gradients of
//! gradients (needed by gradient matching) stay on the fast path.
//! All kernels are im2col + GEMM, single threaded, and bitwise deterministic.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{validation_err, Result};

/// Spatial geometry shared by the three kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn ihw(&self) -> usize {
        self.ih * self.iw
    }
    /// Samples processed per GEMM call.
    fn chunk(&self) -> usize {
        let per_sample = self.ckk() * self.ohw();
        let by_width = (2048 / self.ohw().max(1)).max(1);
        let by_memory = ((1 << 23) / per_sample.max(1)).max(1);
        by_width.min(by_memory).min(self.batch).max(1)
    }
}

trait Scalar: WithDType + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Writes the im2col matrix of one sample into `cols`, a row-major
/// `ckk × ld` matrix, starting at column `col0`.
fn im2col<T: Scalar>(x: &[T], d: &Dims, cols: &mut [T], ld: usize, col0: usize) {
    for c in 0..d.c_in {
        let plane = &x[c * d.ihw()..(c + 1) * d.ihw()];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + d.ohw()];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.ih as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.iw..(iy as usize + 1) * d.iw];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.iw as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Accumulates one sample's column matrix back into image layout.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, ld: usize, col0: usize, dx: &mut [T]) {
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.ihw()..(c + 1) * d.ihw()];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + d.ohw()];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.iw..(iy as usize + 1) * d.iw];
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.iw {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major GEMM: `dst (m×n) [+]= lhs (m×k) · rhs (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(dst.len() >= (m - 1) * dst_rs + n);
    // SAFETY: the slices cover every index addressed by the strides above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

/// Gathers `nb` samples of an NCHW tensor with `c` channels into a
/// `c × (nb·hw)` row-major matrix.
fn gather_channels<T: Scalar>(src: &[T], b0: usize, nb: usize, c: usize, hw: usize) -> Vec<T> {
    let ld = nb * hw;
    let mut out = vec![T::zero(); c * ld];
    for s in 0..nb {
        let sample = &src[(b0 + s) * c * hw..(b0 + s + 1) * c * hw];
        for ch in 0..c {
            out[ch * ld + s * hw..ch * ld + (s + 1) * hw]
                .copy_from_slice(&sample[ch * hw..(ch + 1) * hw]);
        }
    }
    out
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let mut out = vec![T::zero(); d.batch * d.c_out * ohw];
    let chunk = d.chunk();
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ohw;
        let mut cols = vec![T::zero(); ckk * ld];
        for s in 0..nb {
            let xs = &x[(b0 + s) * d.c_in * d.ihw()..(b0 + s + 1) * d.c_in * d.ihw()];
            im2col(xs, d, &mut cols, ld, s * ohw);
        }
        if nb == 1 {
            let dst = &mut out[b0 * d.c_out * ohw..(b0 + 1) * d.c_out * ohw];
            gemm(d.c_out, ohw, ckk, dst, ohw, false, w, ckk, 1, &cols, ld, 1);
        } else {
            let mut y = vec![T::zero(); d.c_out * ld];
            gemm(d.c_out, ld, ckk, &mut y, ld, false, w, ckk, 1, &cols, ld, 1);
            for s in 0..nb {
                let dst = &mut out[(b0 + s) * d.c_out * ohw..(b0 + s + 1) * d.c_out * ohw];
                for co in 0..d.c_out {
                    dst[co * ohw..(co + 1) * ohw]
                        .copy_from_slice(&y[co * ld + s * ohw..co * ld + (s + 1) * ohw]);
                }
            }
        }
        b0 += nb;
    }
    out
}

fn conv_input_grad<T: Scalar>(g: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let mut dx = vec![T::zero(); d.batch * d.c_in * d.ihw()];
    let chunk = d.chunk();
    let mut b0 = 0;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ohw;
        let gm = gather_channels(g, b0, nb, d.c_out, ohw);
        let mut cols = vec![T::zero(); ckk * ld];
        // cols = wᵀ · g, with w stored as c_out × ckk.
        gemm(ckk, ld, d.c_out, &mut cols, ld, false, w, 1, ckk, &gm, ld, 1);
        for s in 0..nb {
            let dxs = &mut dx[(b0 + s) * d.c_in * d.ihw()..(b0 + s + 1) * d.c_in * d.ihw()];
            col2im(&cols, d, ld, s * ohw, dxs);
        }
        b0 += nb;
    }
    dx
}

fn conv_weight_grad<T: Scalar>(x: &[T], g: &[T], d: &Dims) -> Vec<T> {
    let (ckk, ohw) = (d.ckk(), d.ohw());
    let mut dw = vec![T::zero(); d.c_out * ckk];
    let chunk = d.chunk();
    let mut b0 = 0;
    let mut first = true;
    while b0 < d.batch {
        let nb = chunk.min(d.batch - b0);
        let ld = nb * ohw;
        let mut cols = vec![T::zero(); ckk * ld];
        for s in 0..nb {
            let xs = &x[(b0 + s) * d.c_in * d.ihw()..(b0 + s + 1) * d.c_in * d.ihw()];
            im2col(xs, d, &mut cols, ld, s * ohw);
        }
        let gm = gather_channels(g, b0, nb, d.c_out, ohw);
        // dw += g · colsᵀ
        gemm(d.c_out, ckk, ld, &mut dw, ckk, !first, &gm, ld, 1, &cols, 1, ld);
        first = false;
        b0 += nb;
    }
    dw
}

fn contiguous<'a, T: Scalar>(s: &'a [T], l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

enum Kind {
    Forward,
    InputGrad { ih: usize, iw: usize },
    WeightGrad { kh: usize, kw: usize },
}

struct ConvOp {
    geom: ConvGeometry,
    kind: Kind,
}

impl ConvOp {
    fn dims(&self, l1: &Layout, l2: &Layout) -> candle_core::Result<Dims> {
        let (s, p) = (self.geom.stride, self.geom.padding);
        let out = |i: usize, k: usize| -> candle_core::Result<usize> {
            self.geom
                .out_size(i, k)
                .ok_or_else(|| candle_core::Error::Msg(format!("kernel {k} too large for input {i}")))
        };
        let d = match self.kind {
            Kind::Forward => {
                let (batch, c_in, ih, iw) = dims4(l1)?;
                let (c_out, c_in_k, kh, kw) = dims4(l2)?;
                if c_in != c_in_k {
                    candle_core::bail!("conv: input has {c_in} channels, kernel expects {c_in_k}");
                }
                Dims { batch, c_in, c_out, ih, iw, kh, kw, oh: out(ih, kh)?, ow: out(iw, kw)?, stride: s, pad: p }
            }
            Kind::InputGrad { ih, iw } => {
                let (batch, c_out, oh, ow) = dims4(l1)?;
                let (c_out_k, c_in, kh, kw) = dims4(l2)?;
                if c_out != c_out_k {
                    candle_core::bail!("conv input-grad: gradient has {c_out} channels, kernel {c_out_k}");
                }
                if out(ih, kh)? != oh || out(iw, kw)? != ow {
                    candle_core::bail!("conv input-grad: target {ih}x{iw} does not map to {oh}x{ow}");
                }
                Dims { batch, c_in, c_out, ih, iw, kh, kw, oh, ow, stride: s, pad: p }
            }
            Kind::WeightGrad { kh, kw } => {
                let (batch, c_in, ih, iw) = dims4(l1)?;
                let (batch_g, c_out, oh, ow) = dims4(l2)?;
                if batch != batch_g || out(ih, kh)? != oh || out(iw, kw)? != ow {
                    candle_core::bail!("conv weight-grad: incompatible input and gradient shapes");
                }
                Dims { batch, c_in, c_out, ih, iw, kh, kw, oh, ow, stride: s, pad: p }
            }
        };
        Ok(d)
    }

    fn run<T: Scalar>(&self, a: &[T], b: &[T], d: &Dims) -> (Vec<T>, Shape) {
        match self.kind {
            Kind::Forward => (conv_forward(a, b, d), Shape::from((d.batch, d.c_out, d.oh, d.ow))),
            Kind::InputGrad { .. } => {
                (conv_input_grad(a, b, d), Shape::from((d.batch, d.c_in, d.ih, d.iw)))
            }
            Kind::WeightGrad { .. } => {
                (conv_weight_grad(a, b, d), Shape::from((d.c_out, d.c_in, d.kh, d.kw)))
            }
        }
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Forward => "dim-conv2d",
            Kind::InputGrad { .. } => "dim-conv2d-input-grad",
            Kind::WeightGrad { .. } => "dim-conv2d-weight-grad",
        }
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1, l2)?;
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (v, shape) = self.run(contiguous(a, l1, self.name())?, contiguous(b, l2, self.name())?, &d);
                Ok((CpuStorage::F32(v), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (v, shape) = self.run(contiguous(a, l1, self.name())?, contiguous(b, l2, self.name())?, &d);
                Ok((CpuStorage::F64(v), shape))
            }
            _ => candle_core::bail!("{}: only f32/f64 tensors of equal dtype are supported", self.name()),
        }
    }

    fn bwd(
        &self,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geom;
        let grad = grad.contiguous()?;
        let track = |t: &Tensor| t.track_op();
        match self.kind {
            Kind::Forward => {
                // a = x, b = w
                let (_, _, ih, iw) = a.dims4()?;
                let (_, _, kh, kw) = b.dims4()?;
                let dx = track(a).then(|| input_grad_raw(&grad, b, g, ih, iw)).transpose()?;
                let dw = track(b).then(|| weight_grad_raw(a, &grad, g, kh, kw)).transpose()?;
                Ok((dx, dw))
            }
            Kind::InputGrad { .. } => {
                // a = g_out, b = w; grad has the shape of x.
                let (_, _, kh, kw) = b.dims4()?;
                let dg = track(a).then(|| conv_raw(&grad, b, g)).transpose()?;
                let dw = track(b).then(|| weight_grad_raw(&grad, a, g, kh, kw)).transpose()?;
                Ok((dg, dw))
            }
            Kind::WeightGrad { .. } => {
                // a = x, b = g_out; grad has the shape of w.
                let (_, _, ih, iw) = a.dims4()?;
                let dx = track(a).then(|| input_grad_raw(b, &grad, g, ih, iw)).transpose()?;
                let dg = track(b).then(|| conv_raw(a, &grad, g)).transpose()?;
                Ok((dx, dg))
            }
        }
    }
}

fn conv_raw(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, ConvOp { geom, kind: Kind::Forward })
}

fn input_grad_raw(
    g: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
    ih: usize,
    iw: usize,
) -> candle_core::Result<Tensor> {
    g.contiguous()?
        .apply_op2(&w.contiguous()?, ConvOp { geom, kind: Kind::InputGrad { ih, iw } })
}

fn weight_grad_raw(
    x: &Tensor,
    g: &Tensor,
    geom: ConvGeometry,
    kh: usize,
    kw: usize,
) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&g.contiguous()?, ConvOp { geom, kind: Kind::WeightGrad { kh, kw } })
}

/// Cross-correlation of `x` (N, Cin, H, W) with `w` (Cout, Cin, kh, kw), no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (_, ck, _, _) = w.dims4()?;
    if c != ck {
        return Err(validation_err!("conv2d: input has {c} channels, kernel expects {ck}"));
    }
    Ok(conv_raw(x, w, geom)?)
}

/// Transposed convolution of `x` (N, Cin, H, W) with `w` (Cin, Cout, kh, kw).
///
/// Output size is `(H - 1)·stride - 2·padding + kh + output_padding`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeometry,
    output_padding: usize,
) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let (ck, _, kh, kw) = w.dims4()?;
    if c != ck {
        return Err(validation_err!("conv_transpose2d: input has {c} channels, kernel expects {ck}"));
    }
    if output_padding >= geom.stride.max(1) {
        return Err(validation_err!("conv_transpose2d: output padding must be smaller than stride"));
    }
    let size = |i: usize, k: usize| ((i - 1) * geom.stride + k + output_padding).checked_sub(2 * geom.padding);
    let (oh, ow) = match (size(h, kh), size(wd, kw)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(validation_err!("conv_transpose2d: padding too large for input {h}x{wd}")),
    };
    Ok(input_grad_raw(x, w, geom, oh, ow)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::Rng;

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], s: usize, p: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [co, _, kh, kw] = ws;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * s + i) as isize - p as isize;
                                    let ix = (xx * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((o * c + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::seed::rng(seed, &[]);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_nested_loops() {
        let dev = Device::Cpu;
        for &(n, c, h, co, k, s, p) in &[(3, 2, 7, 4, 3, 1, 1), (2, 3, 8, 5, 4, 2, 1), (5, 1, 6, 2, 3, 2, 0)] {
            let x = rand_vec(n * c * h * h, 1);
            let w = rand_vec(co * c * k * k, 2);
            let xt = Tensor::from_vec(x.clone(), (n, c, h, h), &dev).unwrap();
            let wt = Tensor::from_vec(w.clone(), (co, c, k, k), &dev).unwrap();
            let got: Vec<f64> = conv2d(&xt, &wt, ConvGeometry::new(s, p)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = naive_conv(&x, [n, c, h, h], &w, [co, c, k, k], s, p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x, w), g> = <x, input_grad(g, w)> = <w, weight_grad(x, g)>
        let dev = Device::Cpu;
        let geom = ConvGeometry::new(2, 1);
        let x = Tensor::from_vec(rand_vec(2 * 3 * 9 * 9, 3), (2, 3, 9, 9), &dev).unwrap();
        let w = Tensor::from_vec(rand_vec(4 * 3 * 3 * 3, 4), (4, 3, 3, 3), &dev).unwrap();
        let y = conv2d(&x, &w, geom).unwrap();
        let g = Tensor::from_vec(rand_vec(y.elem_count(), 5), y.shape(), &dev).unwrap();
        let lhs = (y * &g).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let dx = input_grad_raw(&g, &w, geom, 9, 9).unwrap();
        let dw = weight_grad_raw(&x, &g, geom, 3, 3).unwrap();
        let m = (x * dx).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let r = (w * dw).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - m).abs() < 1e-10 && (lhs - r).abs() < 1e-10, "{lhs} {m} {r}");
    }

    #[test]
    fn transposed_output_shape() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((2, 6, 4, 4), DType::F32, &dev).unwrap();
        let w = Tensor::zeros((6, 3, 4, 4), DType::F32, &dev).unwrap();
        let y = conv_transpose2d(&x, &w, ConvGeometry::new(2, 1), 0).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 8]);
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        // f(x) = sum((d/dw sum(conv(x, w)²))²): needs the backward of weight_grad.
        std::env::set_var("CANDLE_GRAD_DO_NOT_DETACH", "1");
        let dev = Device::Cpu;
        let geom = ConvGeometry::new(1, 1);
        let w = Var::from_vec(rand_vec(2 * 2 * 3 * 3, 7), (2, 2, 3, 3), &dev).unwrap();
        let f = |x: &Tensor| -> Tensor {
            let y = conv2d(x, w.as_tensor(), geom).unwrap();
            let l = y.sqr().unwrap().sum_all().unwrap();
            let gw = l.backward().unwrap().get(w.as_tensor()).unwrap().clone();
            gw.sqr().unwrap().sum_all().unwrap()
        };
        let x0 = rand_vec(2 * 4 * 4, 8);
        let xv = Var::from_vec(x0.clone(), (1, 2, 4, 4), &dev).unwrap();
        let out = f(xv.as_tensor());
        let grads = out.backward().unwrap();
        let analytic: Vec<f64> = grads.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-5;
        for i in [0, 5, 13, 31] {
            let mut p = x0.clone();
            p[i] += eps;
            let mut m = x0.clone();
            m[i] -= eps;
            let fp = f(&Tensor::from_vec(p, (1, 2, 4, 4), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, (1, 2, 4, 4), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() <= 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
