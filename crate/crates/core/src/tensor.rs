//! Dense row-major `f32` tensors and the raw kernels used by the graph.

use crate::error::{shape_err, Error, Result};

/// A dense, row-major array of 32-bit floats.
///
/// `data.len()` always equals the product of `shape`; the empty shape is a
/// scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from 64-bit values, rounding each to `f32`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            shape_err(format!("item() on tensor of shape {:?}", self.shape))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Plain matrix product of `a[m,k]` and `b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0f32; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => shape_err(format!("matmul of {a:?} and {b:?}")),
    }
}

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Geometry that requires `(H+2·pad−kh)` to be a multiple of `stride`.
    pub fn new(
        input: (usize, usize, usize),
        kernel: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::build(input, kernel, stride, pad, true)
    }

    /// Geometry that drops trailing input rows/columns that do not fill a
    /// whole stride (the usual floor convention).
    pub fn new_floor(
        input: (usize, usize, usize),
        kernel: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::build(input, kernel, stride, pad, false)
    }

    fn build(
        (c_in, h, w): (usize, usize, usize),
        (c_out, kc_in, kh, kw): (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
        exact: bool,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Input("conv2d stride must be positive".into()));
        }
        if kc_in != c_in {
            return shape_err(format!(
                "kernel expects {kc_in} input channels, input has {c_in}"
            ));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            ));
        }
        if exact && ((hp - kh) % stride != 0 || (wp - kw) % stride != 0) {
            return shape_err(format!(
                "output size not exact: ({hp}-{kh})/{stride} or ({wp}-{kw})/{stride}"
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        })
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub(crate) fn out_hw(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one image `[c_in,h,w]` into columns `[c_in·kh·kw, h_out·w_out]`.
    pub(crate) fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let ohw = self.out_hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oi in 0..self.h_out {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.w_out..(oi + 1) * self.w_out];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, d) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *d = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds columns back onto an image, accumulating overlaps.
    pub(crate) fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let ohw = self.out_hw();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oi in 0..self.h_out {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.w_out {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * self.w_out + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a single image `x[c_in,h,w]` with `kernel[c_out,c_in,kh,kw]`,
/// zero padding `pad` on every side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_in, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return shape_err(format!("conv2d input must be [C,H,W], got {s:?}")),
    };
    let geo = conv_geometry(c_in, h, w, kernel.shape(), stride, pad, true)?;
    let mut out = vec![0.0; geo.c_out * geo.out_hw()];
    conv_forward_image(&geo, x.data(), kernel.data(), &mut out);
    Tensor::new(&[geo.c_out, geo.h_out, geo.w_out], out)
}

pub(crate) fn conv_geometry(
    c_in: usize,
    h: usize,
    w: usize,
    kshape: &[usize],
    stride: usize,
    pad: usize,
    exact: bool,
) -> Result<ConvGeometry> {
    match kshape {
        [co, ci, kh, kw] => {
            ConvGeometry::build((c_in, h, w), (*co, *ci, *kh, *kw), stride, pad, exact)
        }
        s => shape_err(format!("kernel must be [Cout,Cin,kh,kw], got {s:?}")),
    }
}

pub(crate) fn conv_forward_image(geo: &ConvGeometry, x: &[f32], k: &[f32], out: &mut [f32]) {
    let mut cols = vec![0.0; geo.patch_len() * geo.out_hw()];
    geo.im2col(x, &mut cols);
    gemm_nn(geo.c_out, geo.patch_len(), geo.out_hw(), k, &cols, out);
}
