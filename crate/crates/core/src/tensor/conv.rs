use std::borrow::Cow;

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Weights, bias and dilation of one valid 2D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// Shape `(out_channels, in_channels, k, k)`.
    pub weights: Tensor<T>,
    /// Shape `(out_channels)`.
    pub bias: Tensor<T>,
    pub dilation: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            dilation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            Tensor::zeros(&[out_channels]),
            dilation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (out, _, kh, kw) = self.weights.dims4()?;
        if kh != kw {
            return Err(Error::invalid(format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.bias.shape() != [out] {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match {out} output channels",
                self.bias.shape()
            )));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be at least 1"));
        }
        if kh == 1 && self.dilation != 1 {
            return Err(Error::invalid("1x1 kernels must use dilation 1"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Number of rows/cols the convolution removes from each spatial axis.
    pub fn shrink(&self) -> usize {
        self.dilation * (self.kernel() - 1)
    }
}

/// Gradients returned by [`conv2d_dilated_grad`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    d: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn of<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Self> {
        params.validate()?;
        let (n, cin, h, w) = input.dims4()?;
        if cin != params.in_channels() {
            return Err(Error::invalid(format!(
                "input has {cin} channels but the kernel expects {}",
                params.in_channels()
            )));
        }
        let span = params.shrink();
        if h <= span || w <= span {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} too small for a kernel span of {}",
                span + 1
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout: params.out_channels(),
            k: params.kernel(),
            d: params.dilation,
            oh: h - span,
            ow: w - span,
        })
    }

    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lowers one sample `(cin, h, w)` into a `(cin*k*k, oh*ow)` column matrix.
fn im2col<'a, T: Scalar>(x: &'a [T], g: &Geometry) -> Cow<'a, [T]> {
    if g.k == 1 {
        return Cow::Borrowed(x);
    }
    let p = g.pixels();
    let mut cols = vec![T::zero(); g.taps() * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.k {
            for j in 0..g.k {
                let row = (c * g.k + i) * g.k + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for y in 0..g.oh {
                    let src = (y + i * g.d) * g.w + j * g.d;
                    dst[y * g.ow..(y + 1) * g.ow].copy_from_slice(&plane[src..src + g.ow]);
                }
            }
        }
    }
    Cow::Owned(cols)
}

/// Scatter-adds a column-matrix gradient back onto a `(cin, h, w)` sample.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let p = g.pixels();
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.k {
            for j in 0..g.k {
                let row = (c * g.k + i) * g.k + j;
                let src = &cols[row * p..(row + 1) * p];
                for y in 0..g.oh {
                    let base = (y + i * g.d) * g.w + j * g.d;
                    for (o, &v) in plane[base..base + g.ow].iter_mut().zip(&src[y * g.ow..(y + 1) * g.ow]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Valid dilated convolution. Output is `(n, cout, h - d*(k-1), w - d*(k-1))`.
pub fn conv2d_dilated<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = Geometry::of(input, params)?;
    let p = g.pixels();
    let in_len = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let weights = params.weights.data();
    let bias = params.bias.data();

    out.data_mut()
        .par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(n, dst)| {
            let cols = im2col(&input.data()[n * in_len..(n + 1) * in_len], &g);
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[o]);
            }
            let k = g.taps();
            T::gemm(
                g.cout,
                k,
                p,
                T::one(),
                weights,
                (k as isize, 1),
                &cols,
                (p as isize, 1),
                T::one(),
                dst,
                (p as isize, 1),
            );
        });
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d_dilated(input, params))` with respect to
/// the input, the weights and the bias.
///
/// Per-sample weight gradients are reduced in sample order, so the result does
/// not depend on the number of worker threads.
pub fn conv2d_dilated_grad<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = Geometry::of(input, params)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::invalid(format!(
            "grad_out shape {:?} does not match convolution output {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let p = g.pixels();
    let k = g.taps();
    let in_len = g.cin * g.h * g.w;
    let weights = params.weights.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let per_sample: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(n, gin)| {
            let x = &input.data()[n * in_len..(n + 1) * in_len];
            let go = &grad_out.data()[n * g.cout * p..(n + 1) * g.cout * p];
            let cols = im2col(x, &g);

            let mut gw = vec![T::zero(); g.cout * k];
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                go,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::zero(),
                &mut gw,
                (k as isize, 1),
            );
            drop(cols);

            if g.k == 1 {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    weights,
                    (1, k as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    gin,
                    (p as isize, 1),
                );
            } else {
                let mut gcols = vec![T::zero(); k * p];
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    weights,
                    (1, k as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut gcols,
                    (p as isize, 1),
                );
                col2im(&gcols, &g, gin);
            }
            gw
        })
        .collect();

    let mut grad_w = Tensor::zeros(params.weights.shape());
    for gw in &per_sample {
        for (a, &b) in grad_w.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
    }

    let mut grad_b = Tensor::zeros(&[g.cout]);
    for n in 0..g.n {
        for o in 0..g.cout {
            let start = (n * g.cout + o) * p;
            let s: T = grad_out.data()[start..start + p].iter().copied().sum();
            grad_b.data_mut()[o] += s;
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}
