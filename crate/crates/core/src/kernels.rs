//! CPU kernels the stock tensor ops are too slow for at this scale.
//!
//! Convolutions are lowered to a patch matrix (`im2col`) followed by a single
//! dense matmul; the patch extraction and its adjoint (`col2im`) are custom
//! ops so that autograd only sees one cheap node per convolution.

use candle_core::backend::BackendStorage;
use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PatchGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl PatchGeometry {
    fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            bail!("kernel and stride must be positive")
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            bail!("kernel {kernel} larger than padded input {height}x{width} (pad {pad})")
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (input offset, output offset) pair of one patch row.
    /// `row_base`/`plane_base` are offsets into the patch matrix and the
    /// input plane respectively.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.out_h {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..self.out_w {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix >= 0 && (ix as usize) < self.width {
                    f(iy * self.width + ix as usize, oy * self.out_w + ox);
                }
            }
        }
    }
}

// Patch matrix layout: rows are (channel, ky, kx) which matches a
// (out, in, k, k) weight flattened to (out, in*k*k); columns are
// (batch, oy, ox) so the whole batch is one matmul.
fn im2col<T: WithDType>(src: &[T], batch: usize, g: &PatchGeometry) -> Vec<T> {
    let kk = g.kernel * g.kernel;
    let hw = g.positions();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.rows() * batch * hw];
    for b in 0..batch {
        for c in 0..g.channels {
            let input = &src[(b * g.channels + c) * plane..][..plane];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * kk + ky * g.kernel + kx) * batch + b;
                    let dst = &mut out[row * hw..][..hw];
                    g.for_each_tap(ky, kx, |i, o| dst[o] = input[i]);
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: &PatchGeometry) -> Vec<T> {
    let kk = g.kernel * g.kernel;
    let hw = g.positions();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); batch * g.channels * plane];
    for b in 0..batch {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * plane..][..plane];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * kk + ky * g.kernel + kx) * batch + b;
                    let cols = &src[row * hw..][..hw];
                    g.for_each_tap(ky, kx, |i, o| dst[i] += cols[o]);
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("kernel input must be contiguous"),
    }
}

struct Im2Col {
    kernel: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im {
    geometry: PatchGeometry,
    batch: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let g = PatchGeometry::new(c, h, w, self.kernel, self.stride, self.pad)?;
        let shape = Shape::from((g.rows(), b * g.positions()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, b, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, b, &g)),
            other => bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let geometry = PatchGeometry::new(c, h, w, self.kernel, self.stride, self.pad)?;
        let op = Col2Im { geometry, batch: b };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.geometry;
        let shape = Shape::from((self.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(col2im(contiguous_slice(v, layout)?, self.batch, g))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(col2im(contiguous_slice(v, layout)?, self.batch, g))
            }
            other => bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

/// 2-D convolution of an NCHW tensor with a square `(out, in, k, k)` kernel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (out_c, in_c, kh, kw) = weight.dims4()?;
    if in_c != c {
        bail!("conv2d: input has {c} channels, kernel expects {in_c}")
    }
    if kh != kw {
        bail!("conv2d: only square kernels are supported, got {kh}x{kw}")
    }
    let g = PatchGeometry::new(c, h, w, kh, stride, pad)?;
    let cols = input.contiguous()?.apply_op1(Im2Col {
        kernel: kh,
        stride,
        pad,
    })?;
    let out = weight
        .reshape((out_c, in_c * kh * kw))?
        .matmul(&cols)?
        .reshape((out_c, b, g.out_h, g.out_w))?
        .transpose(0, 1)?;
    match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, out_c, 1, 1))?),
        None => Ok(out),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
fn gelu_value(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_slope(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct Gelu;
struct GeluBackward;

fn map1<T: WithDType>(src: &[T], f: impl Fn(f64) -> f64) -> Vec<T> {
    src.iter().map(|v| T::from_f64(f(v.to_f64()))).collect()
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(map1(contiguous_slice(v, layout)?, gelu_value)),
            CpuStorage::F64(v) => CpuStorage::F64(map1(contiguous_slice(v, layout)?, gelu_value)),
            other => bail!("gelu: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&grad, &GeluBackward)?))
    }
}

impl CustomOp2 for GeluBackward {
    fn name(&self) -> &'static str {
        "gelu-tanh-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        fn apply<T: WithDType>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter()
                .zip(g)
                .map(|(x, g)| T::from_f64(gelu_slope(x.to_f64()) * g.to_f64()))
                .collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(apply(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(apply(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?))
            }
            _ => bail!("gelu backward: mismatched or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Tanh-approximated GELU with an exact analytic derivative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Row-stochastic bilinear interpolation matrix `(out, in)` using
/// half-pixel centres (`align_corners = false`).
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

fn interpolation_matrix(input: usize, output: usize, dtype: DType, t: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(bilinear_weights(input, output), (output, input), t.device())?.to_dtype(dtype)
}

/// Bilinear resize of an NCHW tensor expressed as two matmuls, so it is
/// differentiable through the stock matmul backward.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let aw = interpolation_matrix(w, out_w, x.dtype(), x)?.t()?;
    let ah = interpolation_matrix(h, out_h, x.dtype(), x)?.t()?;
    // (b*c*h, w) x (w, out_w)
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw)?;
    // -> (b*c, out_w, h) x (h, out_h)
    let cols = rows
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ah)?;
    cols.reshape((b, c, out_w, out_h))?.transpose(2, 3)
}
