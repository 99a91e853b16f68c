//! Convolution kernels over an explicitly padded input plane.
//!
//! Wide convolutions go through im2col + GEMM. Stride-1 convolutions with very
//! few output channels (the 7×7 generator heads) use row-wise
//! multiply-accumulate directly on the padded input, where GEMM would pad the
//! single output row up to a full micro-kernel.

use crate::autodiff::{ConvSpec, PadMode};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Output channel count at or below which stride-1 convs skip im2col.
const DIRECT_MAX_COUT: usize = 8;

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + xa[l] * xb[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i.abs();
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, spec: ConvSpec) -> Result<Self> {
        let (ho, wo) = match (spec.output_size(h, k), spec.output_size(w, k)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Shape(format!(
                    "kernel {k} with padding {} does not fit a {h}×{w} input",
                    spec.pad
                )))
            }
        };
        if spec.pad_mode == PadMode::Reflect && (spec.pad >= h || spec.pad >= w) {
            return Err(Error::Shape(format!(
                "reflect padding {} needs an input larger than {h}×{w}",
                spec.pad
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride: spec.stride,
            pad: spec.pad,
            mode: spec.pad_mode,
            hp: h + 2 * spec.pad,
            wp: w + 2 * spec.pad,
            ho,
            wo,
        })
    }

    pub fn direct(&self, cout: usize) -> bool {
        self.stride == 1 && cout <= DIRECT_MAX_COUT
    }

    /// Source coordinate of padded index `i` along an axis of length `n`,
    /// or `None` for a zero pad.
    fn source(&self, i: usize, n: usize) -> Option<usize> {
        let raw = i as isize - self.pad as isize;
        if (0..n as isize).contains(&raw) {
            return Some(raw as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => Some(reflect(raw, n)),
        }
    }

    /// `c × hp × wp` padded copy of one sample.
    pub fn pad_input<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.resize(self.c * self.hp * self.wp, T::zero());
        let xmap: Vec<Option<usize>> = (0..self.wp).map(|i| self.source(i, self.w)).collect();
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            let dst = &mut out[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
            for py in 0..self.hp {
                let Some(iy) = self.source(py, self.h) else { continue };
                let src = &plane[iy * self.w..(iy + 1) * self.w];
                let row = &mut dst[py * self.wp..(py + 1) * self.wp];
                row[self.pad..self.pad + self.w].copy_from_slice(src);
                for px in (0..self.pad).chain(self.pad + self.w..self.wp) {
                    if let Some(ix) = xmap[px] {
                        row[px] = src[ix];
                    }
                }
            }
        }
    }

    /// Folds a padded-plane gradient back onto the input, accumulating.
    pub fn fold_padded<T: Real>(&self, dpad: &[T], dx: &mut [T]) {
        let xmap: Vec<Option<usize>> = (0..self.wp).map(|i| self.source(i, self.w)).collect();
        for ch in 0..self.c {
            let src = &dpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for py in 0..self.hp {
                let Some(iy) = self.source(py, self.h) else { continue };
                let row = &src[py * self.wp..(py + 1) * self.wp];
                let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                for (d, &g) in dst.iter_mut().zip(&row[self.pad..self.pad + self.w]) {
                    *d = *d + g;
                }
                for px in (0..self.pad).chain(self.pad + self.w..self.wp) {
                    if let Some(ix) = xmap[px] {
                        dst[ix] = dst[ix] + row[px];
                    }
                }
            }
        }
    }

    /// `(c·k·k) × (ho·wo)` patch matrix from a padded sample.
    pub fn im2col<T: Real>(&self, xpad: &[T], cols: &mut [T]) {
        let (k, s, wo, howo) = (self.k, self.stride, self.wo, self.ho * self.wo);
        let mut row = 0;
        for ch in 0..self.c {
            let plane = &xpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
            for ki in 0..k {
                for kj in 0..k {
                    let dst = &mut cols[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        let src = &plane[(oy * s + ki) * self.wp + kj..];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            out.copy_from_slice(&src[..wo]);
                        } else {
                            for (o, v) in out.iter_mut().zip(src.iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatters a patch-matrix gradient onto the padded plane, accumulating.
    pub fn col2im<T: Real>(&self, cols: &[T], dpad: &mut [T]) {
        let (k, s, wo, howo) = (self.k, self.stride, self.wo, self.ho * self.wo);
        let mut row = 0;
        for ch in 0..self.c {
            let plane = &mut dpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
            for ki in 0..k {
                for kj in 0..k {
                    let src = &cols[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        let dst = &mut plane[(oy * s + ki) * self.wp + kj..];
                        let g = &src[oy * wo..(oy + 1) * wo];
                        for (d, &v) in dst.iter_mut().step_by(s).zip(g) {
                            *d = *d + v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Stride-1 forward without im2col: `out` is `cout × ho × wo`, zeroed.
    pub fn direct_forward<T: Real>(&self, xpad: &[T], weight: &[T], cout: usize, out: &mut [T]) {
        let (k, wo, howo) = (self.k, self.wo, self.ho * self.wo);
        for co in 0..cout {
            let o = &mut out[co * howo..(co + 1) * howo];
            for ch in 0..self.c {
                let plane = &xpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weight[((co * self.c + ch) * k + ki) * k + kj];
                        for oy in 0..self.ho {
                            let src = &plane[(oy + ki) * self.wp + kj..][..wo];
                            for (d, &v) in o[oy * wo..(oy + 1) * wo].iter_mut().zip(src) {
                                *d = *d + wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 weight gradient without im2col, accumulated into `dw`.
    pub fn direct_weight_grad<T: Real>(&self, xpad: &[T], dout: &[T], cout: usize, dw: &mut [T]) {
        let (k, wo, howo) = (self.k, self.wo, self.ho * self.wo);
        for co in 0..cout {
            let go = &dout[co * howo..(co + 1) * howo];
            for ch in 0..self.c {
                let plane = &xpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
                for ki in 0..k {
                    for kj in 0..k {
                        let mut acc = T::zero();
                        for oy in 0..self.ho {
                            let src = &plane[(oy + ki) * self.wp + kj..][..wo];
                            acc = acc + dot(&go[oy * wo..(oy + 1) * wo], src);
                        }
                        let slot = &mut dw[((co * self.c + ch) * k + ki) * k + kj];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }

    /// Stride-1 input gradient without im2col, accumulated into the padded plane.
    pub fn direct_input_grad<T: Real>(&self, weight: &[T], dout: &[T], cout: usize, dpad: &mut [T]) {
        let (k, wo, howo) = (self.k, self.wo, self.ho * self.wo);
        for co in 0..cout {
            let go = &dout[co * howo..(co + 1) * howo];
            for ch in 0..self.c {
                let plane = &mut dpad[ch * self.hp * self.wp..(ch + 1) * self.hp * self.wp];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weight[((co * self.c + ch) * k + ki) * k + kj];
                        for oy in 0..self.ho {
                            let dst = &mut plane[(oy + ki) * self.wp + kj..][..wo];
                            for (d, &g) in dst.iter_mut().zip(&go[oy * wo..(oy + 1) * wo]) {
                                *d = *d + wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}
