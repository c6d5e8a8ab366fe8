//! Dense row-major `f64` tensors and the numeric kernels the graph records.
//!
//! No implicit broadcasting: every binary operation checks that both shapes
//! are equal, except the explicit scalar variants (`*_scalar`) and
//! [`Tensor::add_bias`], which adds a vector along the last axis.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor with shared, copy-on-write storage.
///
/// Cloning is cheap; mutation through [`Tensor::data_mut`] copies the buffer
/// only when it is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

/// Spatial padding mode for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; output = (in - k) / stride + 1.
    Valid,
    /// Zero padding so that output = ceil(in / stride); extra padding goes
    /// to the bottom/right.
    Same,
}

/// Resolved geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, needed / 2))
        }
    }
}

impl ConvGeometry {
    /// Output spatial shape for an `h × w` input.
    pub fn output_hw(
        h: usize,
        w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<(usize, usize)> {
        if stride == 0 {
            return None;
        }
        let (oh, _) = out_extent(h, k_h, stride, padding)?;
        let (ow, _) = out_extent(w, k_w, stride, padding)?;
        Some((oh, ow))
    }

    fn resolve(input_shape: &[usize], kernel_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = match *input_shape {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("conv2d", input_shape, kernel_shape)),
        };
        let [k_h, k_w, k_c, out_c] = *kernel_shape else {
            return Err(Error::dim("conv2d", input_shape, kernel_shape));
        };
        if k_c != in_c || stride == 0 {
            return Err(Error::dim("conv2d", input_shape, kernel_shape));
        }
        let (out_h, pad_top) =
            out_extent(in_h, k_h, stride, padding).ok_or_else(|| Error::dim("conv2d", input_shape, kernel_shape))?;
        let (out_w, pad_left) =
            out_extent(in_w, k_w, stride, padding).ok_or_else(|| Error::dim("conv2d", input_shape, kernel_shape))?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source input offset for output pixel `(b, oy, ox)` and kernel tap
    /// `(ky, kx)`, or `None` when the tap lands in padding.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        if y >= self.in_h || x >= self.in_w {
            return None;
        }
        Some(((b * self.in_h + y) * self.in_w + x) * self.in_c)
    }
}

/// `c (+)= op(a) · op(b)` where `a` is `m × k` and `b` is `k × n` after the
/// optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the m/k/n extents and
    // the strides describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_parts(vec![n], values)
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged matrix rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a single-element tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "max", f64::max)
    }

    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "min", f64::min)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// `x` if `x >= 0`, otherwise 0.
    pub fn clip_nonneg(&self) -> Tensor {
        self.map(|v| if v >= 0.0 { v } else { 0.0 })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_last_axis(&self) -> Result<Tensor> {
        let (&n, lead) = self
            .shape
            .split_last()
            .ok_or_else(|| Error::contract("sum_last_axis on a scalar"))?;
        let out: Vec<f64> = self.data.chunks_exact(n).map(|c| c.iter().sum()).collect();
        Ok(Tensor::from_parts(lead.to_vec(), out))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = *self.shape.last().unwrap_or(&0);
        if bias.shape != [n] {
            return Err(Error::dim("add_bias", &self.shape, &bias.shape));
        }
        let mut out = self.data.as_ref().clone();
        for row in out.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bias.data.iter()) {
                *v += b;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Matrix product `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for `self: [m×k]`, `other: [n×k]`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let ([m, k], [r, c]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::dim(op, &self.shape, &other.shape));
        };
        let (m, k) = (*m, *k);
        let (bk, n) = if trans_b { (*c, *r) } else { (*r, *c) };
        if bk != k {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, trans_b, &mut out, false);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// 2-D cross-correlation.
    ///
    /// `self` is `[h×w×c]` or batched `[b×h×w×c]`; `kernel` is `[kh×kw×c×f]`.
    /// The output has the same rank as the input with `f` channels. With
    /// `Valid` padding the spatial size is `(in - k) / stride + 1`; with
    /// `Same` it is `ceil(in / stride)`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let geo = ConvGeometry::resolve(&self.shape, &kernel.shape, stride, padding)?;
        let cols = im2col(&self.data, &geo);
        let mut out = vec![0.0; geo.rows() * geo.out_c];
        gemm(
            geo.rows(),
            geo.patch_len(),
            geo.out_c,
            &cols,
            false,
            &kernel.data,
            false,
            &mut out,
            false,
        );
        Ok(Tensor::from_parts(conv_out_shape(&self.shape, &geo), out))
    }

    /// Gradients of a convolution with respect to input and kernel.
    pub(crate) fn conv2d_backward(
        input: &Tensor,
        kernel: &Tensor,
        grad_out: &Tensor,
        stride: usize,
        padding: Padding,
        want_input: bool,
        want_kernel: bool,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let geo = ConvGeometry::resolve(&input.shape, &kernel.shape, stride, padding)?;
        let rows = geo.rows();
        let patch = geo.patch_len();
        let grad_kernel = want_kernel.then(|| {
            let cols = im2col(&input.data, &geo);
            let mut gk = vec![0.0; patch * geo.out_c];
            gemm(
                patch,
                rows,
                geo.out_c,
                &cols,
                true,
                &grad_out.data,
                false,
                &mut gk,
                false,
            );
            Tensor::from_parts(kernel.shape.clone(), gk)
        });
        let grad_input = want_input.then(|| {
            let mut dcols = vec![0.0; rows * patch];
            gemm(
                rows,
                geo.out_c,
                patch,
                &grad_out.data,
                false,
                &kernel.data,
                true,
                &mut dcols,
                false,
            );
            Tensor::from_parts(input.shape.clone(), col2im(&dcols, &geo))
        });
        Ok((grad_input, grad_kernel))
    }

    /// Windowed max pooling without padding. Returns the pooled tensor and,
    /// for each output element, the flat index of the selected input element.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
        let (batch, h, w, c) = match *self.shape.as_slice() {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::dim("maxpool2d", &self.shape, &[window, window])),
        };
        let (oh, ow) = ConvGeometry::output_hw(h, w, window, window, stride, Padding::Valid)
            .ok_or_else(|| Error::dim("maxpool2d", &self.shape, &[window, window]))?;
        let mut out = Vec::with_capacity(batch * oh * ow * c);
        let mut arg = Vec::with_capacity(batch * oh * ow * c);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if self.data[idx] > best {
                                    best = self.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_idx);
                    }
                }
            }
        }
        let shape = if self.shape.len() == 3 {
            vec![oh, ow, c]
        } else {
            vec![batch, oh, ow, c]
        };
        Ok((Tensor::from_parts(shape, out), arg))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Splits along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return vec![self.clone()];
        };
        let per = self.len() / n;
        self.data
            .chunks_exact(per)
            .map(|c| Tensor::from_parts(rest.to_vec(), c.to_vec()))
            .collect()
    }
}

fn conv_out_shape(input_shape: &[usize], geo: &ConvGeometry) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![geo.out_h, geo.out_w, geo.out_c]
    } else {
        vec![geo.batch, geo.out_h, geo.out_w, geo.out_c]
    }
}

fn im2col(input: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let patch = geo.patch_len();
    let mut cols = vec![0.0; geo.rows() * patch];
    let mut row = 0;
    for b in 0..geo.batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..geo.k_h {
                    for kx in 0..geo.k_w {
                        if let Some(src) = geo.source(b, oy, ox, ky, kx) {
                            let off = (ky * geo.k_w + kx) * geo.in_c;
                            dst[off..off + geo.in_c].copy_from_slice(&input[src..src + geo.in_c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let patch = geo.patch_len();
    let mut out = vec![0.0; geo.batch * geo.in_h * geo.in_w * geo.in_c];
    let mut row = 0;
    for b in 0..geo.batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..geo.k_h {
                    for kx in 0..geo.k_w {
                        if let Some(dst) = geo.source(b, oy, ox, ky, kx) {
                            let off = (ky * geo.k_w + kx) * geo.in_c;
                            for ch in 0..geo.in_c {
                                out[dst + ch] += src[off + ch];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}
