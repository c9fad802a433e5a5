//! Stride-1, extent-preserving 2-D convolution lowered to GEMM via im2col.

use rand::Rng;

use super::{init::xavier_init, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_kernels<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&[T]>) -> Result<()> {
    let [out_ch, in_ch, kh, kw] = kernels.shape();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("kernel extents {kh}x{kw} must be odd")));
    }
    if input.channels() != in_ch {
        return Err(Error::shape(format!(
            "input has {} channels, kernels expect {in_ch}",
            input.channels()
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(Error::shape(format!(
                "bias has {} entries for {out_ch} output channels",
                b.len()
            )));
        }
    }
    Ok(())
}

/// Unfolds one batch item (C x H x W) into a (C*kh*kw) x (H*W) matrix with
/// zero padding (kh-1)/2, (kw-1)/2.
fn im2col<T: Scalar>(item: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &item[ch * hw..(ch + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    out[x_hi..].fill(T::zero());
                }
                row += 1;
            }
        }
    }
}

/// Transposed layout of [`im2col`]: one row of C*kh*kw taps per pixel. The
/// kernel-gradient product reads this contiguously, which is much faster
/// than a strided view of the column matrix.
fn im2row<T: Scalar>(item: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, rows: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let ckk = c * kh * kw;
    for y in 0..h {
        for x in 0..w {
            let dst = &mut rows[(y * w + x) * ckk..(y * w + x + 1) * ckk];
            let mut i = 0;
            for ch in 0..c {
                let plane = &item[ch * hw..(ch + 1) * hw];
                for ky in 0..kh {
                    let sy = (y + ky).wrapping_sub(ph);
                    if sy >= h {
                        dst[i..i + kw].fill(T::zero());
                        i += kw;
                        continue;
                    }
                    let src = &plane[sy * w..(sy + 1) * w];
                    for kx in 0..kw {
                        let sx = (x + kx).wrapping_sub(pw);
                        dst[i] = if sx < w { src[sx] } else { T::zero() };
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the column matrix back into an item.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, item: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut item[ch * hw..(ch + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Zero-padded, stride-1 convolution (cross-correlation) that preserves the
/// spatial extents. `kernels` is (out_ch, in_ch, kh, kw).
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    check_kernels(input, kernels, bias)?;
    let [n, c, h, w] = input.shape();
    let [out_ch, _, kh, kw] = kernels.shape();
    let hw = h * w;
    let ckk = c * kh * kw;
    let mut out = Tensor::zeros([n, out_ch, h, w]);
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let dst = out.item_mut(b);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        im2col(input.item(b), c, h, w, kh, kw, &mut col);
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(false, false, out_ch, hw, ckk, T::one(), kernels.data(), &col, beta, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, kernels and bias.
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let mut kernel_grad = Tensor::zeros(kernels.shape());
    let mut bias_grad = vec![T::zero(); kernels.shape()[0]];
    let input_grad = conv2d_backward_into(
        upstream,
        cached_input,
        kernels,
        kernel_grad.data_mut(),
        &mut bias_grad,
        true,
    )?;
    Ok((input_grad.expect("input grad requested"), kernel_grad, bias_grad))
}

/// Accumulates kernel and bias gradients into the given buffers; returns the
/// input gradient when `want_input_grad` is set.
fn conv2d_backward_into<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
    kernels: &Tensor<T>,
    kernel_grad: &mut [T],
    bias_grad: &mut [T],
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    check_kernels(cached_input, kernels, None)?;
    let [n, c, h, w] = cached_input.shape();
    let [out_ch, _, kh, kw] = kernels.shape();
    if upstream.shape() != [n, out_ch, h, w] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            upstream.shape(),
            [n, out_ch, h, w]
        )));
    }
    let hw = h * w;
    let ckk = c * kh * kw;
    let mut col = vec![T::zero(); ckk * hw];
    let mut dcol = vec![T::zero(); if want_input_grad { ckk * hw } else { 0 }];
    let mut input_grad = want_input_grad.then(|| Tensor::zeros(cached_input.shape()));
    for b in 0..n {
        let dout = upstream.item(b);
        for (o, g) in bias_grad.iter_mut().enumerate() {
            *g += dout[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2row(cached_input.item(b), c, h, w, kh, kw, &mut col);
        T::gemm(false, false, out_ch, ckk, hw, T::one(), dout, &col, T::one(), kernel_grad);
        if let Some(ig) = input_grad.as_mut() {
            T::gemm(true, false, ckk, hw, out_ch, T::one(), kernels.data(), dout, T::zero(), &mut dcol);
            col2im(&dcol, c, h, w, kh, kw, ig.item_mut(b));
        }
    }
    Ok(input_grad)
}

/// Convolution layer owning its kernels and optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Xavier-initialized kernels and zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = xavier_init([out_ch, in_ch, kernel, kernel], rng)?;
        Ok(Self {
            weight: Parameter::new("weight", weight, true),
            bias: with_bias.then(|| Parameter::zeros("bias", [1, out_ch, 1, 1], false)),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(
            input,
            &self.weight.value,
            self.bias.as_ref().map(|b| b.value.data()),
        )
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward(
        &mut self,
        upstream: &Tensor<T>,
        cached_input: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut scratch;
        let bias_grad: &mut [T] = match self.bias.as_mut() {
            Some(b) => b.grad.data_mut(),
            None => {
                scratch = vec![T::zero(); self.weight.value.shape()[0]];
                &mut scratch
            }
        };
        conv2d_backward_into(
            upstream,
            cached_input,
            &self.weight.value,
            self.weight.grad.data_mut(),
            bias_grad,
            want_input_grad,
        )
    }
}
