//! 2-D cross-correlation over [C,H,W] feature maps with [Co,Ci,k,k] weights,
//! plus the matching backward pass. Odd kernels only; padding is either none
//! or symmetric reflection (edge pixel repeated), the convention every
//! spatial op in this crate shares.

use crate::error::{Error, Result};
use crate::num::real::Real;
use crate::num::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    None,
    Reflect,
}

/// Symmetric reflection of an out-of-range index: -1 maps to 0, n maps to n-1.
/// Loops so that offsets several extents out still land in range.
#[inline]
pub fn reflect_index(mut i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn output_extent(n: usize, k: usize, stride: usize, pad: PadMode) -> Result<usize> {
    let padded = match pad {
        PadMode::Reflect => n + k - 1,
        PadMode::None => n,
    };
    if padded < k {
        return Err(Error::data(format!(
            "input extent {n} smaller than kernel {k} without padding"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Row-major [extent][k] table of input indices per output position and tap.
fn tap_map(out_extent: usize, in_extent: usize, k: usize, stride: usize, pad: PadMode) -> Vec<usize> {
    let p = match pad {
        PadMode::Reflect => ((k - 1) / 2) as isize,
        PadMode::None => 0,
    };
    let mut map = Vec::with_capacity(out_extent * k);
    for o in 0..out_extent {
        for t in 0..k {
            let i = (o * stride + t) as isize - p;
            map.push(match pad {
                PadMode::Reflect => reflect_index(i, in_extent),
                PadMode::None => i as usize,
            });
        }
    }
    map
}

fn validate(
    input: &Tensor<impl Real>,
    weights: &Tensor<impl Real>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (ci, h, w) = input.dims3()?;
    let (co, ciw, k, k2) = weights.dims4()?;
    if k != k2 {
        return Err(Error::data(format!("kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::data(format!("kernel size must be odd, got {k}")));
    }
    if ciw != ci {
        return Err(Error::data(format!(
            "weights expect {ciw} input channels, input has {ci}"
        )));
    }
    if stride == 0 {
        return Err(Error::data("stride must be >= 1"));
    }
    let _ = (h, w);
    Ok((ci, h, w, co, k))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: PadMode,
) -> Result<Tensor<T>> {
    let (ci, h, w, co, k) = validate(input, weights, stride)?;
    let oh = output_extent(h, k, stride, pad)?;
    let ow = output_extent(w, k, stride, pad)?;
    let rows = tap_map(oh, h, k, stride, pad);
    let cols = tap_map(ow, w, k, stride, pad);
    let p = if pad == PadMode::Reflect { (k - 1) / 2 } else { 0 };
    // Output columns whose taps are all in range without reflection; these run
    // on a contiguous slice so the inner loop stays branch-free.
    let fast_lo = if stride == 1 { p.min(ow) } else { ow };
    let fast_hi = if stride == 1 { ow.saturating_sub(p).max(fast_lo) } else { fast_lo };

    let x = input.data();
    let wt = weights.data();
    let mut out = Tensor::zeros(vec![co, oh, ow]);
    let od = out.data_mut();

    for o in 0..co {
        for oy in 0..oh {
            let orow = &mut od[(o * oh + oy) * ow..][..ow];
            for c in 0..ci {
                for ky in 0..k {
                    let iy = rows[oy * k + ky];
                    let xrow = &x[(c * h + iy) * w..][..w];
                    let wrow = &wt[((o * ci + c) * k + ky) * k..][..k];
                    for ox in 0..fast_lo {
                        let mut acc = T::zero();
                        for kx in 0..k {
                            acc += wrow[kx] * xrow[cols[ox * k + kx]];
                        }
                        orow[ox] += acc;
                    }
                    for ox in fast_lo..fast_hi {
                        let base = &xrow[ox - p..][..k];
                        let mut acc = T::zero();
                        for kx in 0..k {
                            acc += wrow[kx] * base[kx];
                        }
                        orow[ox] += acc;
                    }
                    for ox in fast_hi..ow {
                        let mut acc = T::zero();
                        for kx in 0..k {
                            acc += wrow[kx] * xrow[cols[ox * k + kx]];
                        }
                        orow[ox] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. conv2d input and weights, given the
/// gradient w.r.t. its output. Reflected taps scatter-add back through the
/// same index map the forward pass used.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: PadMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ci, h, w, co, k) = validate(input, weights, stride)?;
    let oh = output_extent(h, k, stride, pad)?;
    let ow = output_extent(w, k, stride, pad)?;
    let (gco, goh, gow) = grad_out.dims3()?;
    if (gco, goh, gow) != (co, oh, ow) {
        return Err(Error::data(format!(
            "grad_out shape [{gco},{goh},{gow}] does not match conv output [{co},{oh},{ow}]"
        )));
    }
    let rows = tap_map(oh, h, k, stride, pad);
    let cols = tap_map(ow, w, k, stride, pad);

    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gx = Tensor::zeros(input.shape().to_vec());
    let mut gw = Tensor::zeros(weights.shape().to_vec());
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();

    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                let wbase = ((o * ci + c) * k + ky) * k;
                for oy in 0..oh {
                    let iy = rows[oy * k + ky];
                    let grow = &g[(o * oh + oy) * ow..][..ow];
                    let xrow = &x[(c * h + iy) * w..];
                    let gxrow = (c * h + iy) * w;
                    for ox in 0..ow {
                        let go = grow[ox];
                        if go == T::zero() {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = cols[ox * k + kx];
                            gwd[wbase + kx] += go * xrow[ix];
                            gxd[gxrow + ix] += go * wt[wbase + kx];
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}
