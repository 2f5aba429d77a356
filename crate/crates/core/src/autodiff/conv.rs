//! im2col-based 3D convolution kernels. Every kernel works per sample so the
//! batch can be split across threads; reductions over the batch are summed
//! in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a strided cubic-kernel convolution between a "large" grid
/// (conv input / transposed-conv output) and a "small" grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub large: [usize; 3],
    pub small: [usize; 3],
}

impl ConvGeom {
    pub fn for_conv(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::ShapeMismatch("kernel and stride must be positive".into()));
        }
        let mut small = [0; 3];
        for (o, &s) in small.iter_mut().zip(&input) {
            if s + 2 * pad < k {
                return Err(Error::ShapeMismatch(format!("spatial extent {s} + 2*{pad} is smaller than kernel {k}")));
            }
            *o = (s + 2 * pad - k) / stride + 1;
        }
        Ok(ConvGeom { k, stride, pad, large: input, small })
    }

    pub fn for_transpose(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::ShapeMismatch("kernel and stride must be positive".into()));
        }
        let mut large = [0; 3];
        for (o, &s) in large.iter_mut().zip(&input) {
            let full = (s - 1) * stride + k;
            if full <= 2 * pad {
                return Err(Error::ShapeMismatch(format!("transposed conv output collapses for input {s}")));
            }
            *o = full - 2 * pad;
        }
        Ok(ConvGeom { k, stride, pad, large, small: input })
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn large_len(&self) -> usize {
        self.large.iter().product()
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Expands `img` (`[c, large]`) into columns `[c * k^3, small]`.
fn im2col<T: Scalar>(img: &[T], c: usize, g: &ConvGeom, col: &mut [T]) {
    let [ld, lh, lw] = g.large;
    let [sd, sh, sw] = g.small;
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let plen = g.small_len();
    let mut row = 0;
    for ch in 0..c {
        let base = &img[ch * ld * lh * lw..(ch + 1) * ld * lh * lw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let out = &mut col[row * plen..(row + 1) * plen];
                    let mut i = 0;
                    for od in 0..sd {
                        let id = od as isize * s + kd as isize - p;
                        for oh in 0..sh {
                            let ih = oh as isize * s + kh as isize - p;
                            if id < 0 || id >= ld as isize || ih < 0 || ih >= lh as isize {
                                out[i..i + sw].fill(T::zero());
                                i += sw;
                                continue;
                            }
                            let line = &base[(id as usize * lh + ih as usize) * lw..][..lw];
                            for ow in 0..sw {
                                let iw = ow as isize * s + kw as isize - p;
                                out[i] = if iw >= 0 && iw < lw as isize { line[iw as usize] } else { T::zero() };
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a zeroed `[c, large]`.
fn col2im<T: Scalar>(col: &[T], c: usize, g: &ConvGeom, img: &mut [T]) {
    let [ld, lh, lw] = g.large;
    let [sd, sh, sw] = g.small;
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let plen = g.small_len();
    let mut row = 0;
    for ch in 0..c {
        let base = &mut img[ch * ld * lh * lw..(ch + 1) * ld * lh * lw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * plen..(row + 1) * plen];
                    let mut i = 0;
                    for od in 0..sd {
                        let id = od as isize * s + kd as isize - p;
                        for oh in 0..sh {
                            let ih = oh as isize * s + kh as isize - p;
                            if id < 0 || id >= ld as isize || ih < 0 || ih >= lh as isize {
                                i += sw;
                                continue;
                            }
                            let line = &mut base[(id as usize * lh + ih as usize) * lw..][..lw];
                            for ow in 0..sw {
                                let iw = ow as isize * s + kw as isize - p;
                                if iw >= 0 && iw < lw as isize {
                                    line[iw as usize] += src[i];
                                }
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dout: &Tensor<T>, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for sample in dout.data().chunks(channels * plane) {
        for (c, chunk) in sample.chunks(plane).enumerate() {
            db[c] += chunk.iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}

/// Checked shapes for conv3d: returns (n, cin, cout, geom).
pub(crate) fn conv3d_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, ConvGeom)> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let [cout, wcin, k, k2, k3] = w.dims5()?;
    if wcin != cin || k != k2 || k != k3 {
        return Err(Error::ShapeMismatch(format!("conv3d weight {:?} does not fit input {:?}", w.shape(), x.shape())));
    }
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!("conv3d bias {:?} expected [{cout}]", b.shape())));
    }
    Ok((n, cin, cout, ConvGeom::for_conv([d, h, wd], k, stride, pad)?))
}

/// Checked shapes for conv_transpose3d: weight is `[cin, cout, k, k, k]`.
pub(crate) fn conv_t_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, ConvGeom)> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let [wcin, cout, k, k2, k3] = w.dims5()?;
    if wcin != cin || k != k2 || k != k3 {
        return Err(Error::ShapeMismatch(format!("conv_transpose3d weight {:?} does not fit input {:?}", w.shape(), x.shape())));
    }
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!("conv_transpose3d bias {:?} expected [{cout}]", b.shape())));
    }
    Ok((n, cin, cout, ConvGeom::for_transpose([d, h, wd], k, stride, pad)?))
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, cin, cout, g) = conv3d_shapes(x, w, b, stride, pad)?;
    let (plen, ilen, krows) = (g.small_len(), g.large_len(), cin * g.k3());
    let mut out = vec![T::zero(); n * cout * plen];
    out.par_chunks_mut(cout * plen).zip(x.data().par_chunks(cin * ilen)).for_each(|(o, xi)| {
        let mut col = vec![T::zero(); krows * plen];
        im2col(xi, cin, &g, &mut col);
        T::gemm(cout, krows, plen, T::one(), w.data(), false, &col, false, T::zero(), o);
        add_bias(o, b.data(), plen);
    });
    Tensor::new(vec![n, cout, g.small[0], g.small[1], g.small[2]], out)
}

/// Gradients of conv3d. Each requested gradient is `Some`.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let (n, cin, cout, g) = conv3d_shapes(x, w, b, stride, pad)?;
    let (plen, ilen, krows) = (g.small_len(), g.large_len(), cin * g.k3());
    let mut dx = need[0].then(|| vec![T::zero(); n * cin * ilen]);

    let per_sample = |xi: &[T], di: &[T], dxi: Option<&mut [T]>| -> Option<Vec<T>> {
        let dw_i = need[1].then(|| {
            let mut col = vec![T::zero(); krows * plen];
            im2col(xi, cin, &g, &mut col);
            let mut dw = vec![T::zero(); cout * krows];
            T::gemm(cout, plen, krows, T::one(), di, false, &col, true, T::zero(), &mut dw);
            dw
        });
        if let Some(dxi) = dxi {
            let mut dcol = vec![T::zero(); krows * plen];
            T::gemm(krows, cout, plen, T::one(), w.data(), true, di, false, T::zero(), &mut dcol);
            col2im(&dcol, cin, &g, dxi);
        }
        dw_i
    };

    let xs = x.data().par_chunks(cin * ilen);
    let ds = dout.data().par_chunks(cout * plen);
    let parts: Vec<Option<Vec<T>>> = match dx.as_mut() {
        Some(dx) => xs.zip(ds).zip(dx.par_chunks_mut(cin * ilen)).map(|((xi, di), dxi)| per_sample(xi, di, Some(dxi))).collect(),
        None => xs.zip(ds).map(|(xi, di)| per_sample(xi, di, None)).collect(),
    };

    let dw = need[1].then(|| sum_in_order(parts.into_iter().flatten().collect(), cout * krows));
    let db = need[2].then(|| bias_grad(dout, cout, plen));
    Ok([
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
    ])
}

pub(crate) fn conv_t_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, cin, cout, g) = conv_t_shapes(x, w, b, stride, pad)?;
    let (plen, olen, krows) = (g.small_len(), g.large_len(), cout * g.k3());
    let mut out = vec![T::zero(); n * cout * olen];
    out.par_chunks_mut(cout * olen).zip(x.data().par_chunks(cin * plen)).for_each(|(o, xi)| {
        let mut col = vec![T::zero(); krows * plen];
        T::gemm(krows, cin, plen, T::one(), w.data(), true, xi, false, T::zero(), &mut col);
        col2im(&col, cout, &g, o);
        add_bias(o, b.data(), olen);
    });
    Tensor::new(vec![n, cout, g.large[0], g.large[1], g.large[2]], out)
}

pub(crate) fn conv_t_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let (n, cin, cout, g) = conv_t_shapes(x, w, b, stride, pad)?;
    let (plen, olen, krows) = (g.small_len(), g.large_len(), cout * g.k3());
    let mut dx = need[0].then(|| vec![T::zero(); n * cin * plen]);

    let per_sample = |xi: &[T], di: &[T], dxi: Option<&mut [T]>| -> Option<Vec<T>> {
        let mut dcol = vec![T::zero(); krows * plen];
        im2col(di, cout, &g, &mut dcol);
        if let Some(dxi) = dxi {
            T::gemm(cin, krows, plen, T::one(), w.data(), false, &dcol, false, T::zero(), dxi);
        }
        need[1].then(|| {
            let mut dw = vec![T::zero(); cin * krows];
            T::gemm(cin, plen, krows, T::one(), xi, false, &dcol, true, T::zero(), &mut dw);
            dw
        })
    };

    let xs = x.data().par_chunks(cin * plen);
    let ds = dout.data().par_chunks(cout * olen);
    let parts: Vec<Option<Vec<T>>> = match dx.as_mut() {
        Some(dx) => xs.zip(ds).zip(dx.par_chunks_mut(cin * plen)).map(|((xi, di), dxi)| per_sample(xi, di, Some(dxi))).collect(),
        None => xs.zip(ds).map(|(xi, di)| per_sample(xi, di, None)).collect(),
    };

    let dw = need[1].then(|| sum_in_order(parts.into_iter().flatten().collect(), cin * krows));
    let db = need[2].then(|| bias_grad(dout, cout, olen));
    Ok([
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
    ])
}
