//! Raw NCHW kernels behind the graph ops. All functions work on flat slices.

use rayon::prelude::*;

use super::{gemm, MatRef, Scalar};

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

// Small problems are not worth the rayon fan-out.
const PAR_MIN_WORK: usize = 1 << 16;

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_one<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, y: &mut [T]) {
    let (k, p) = (g.k(), g.p());
    if g.is_pointwise() {
        gemm(g.cout, k, p, MatRef::rm(w, k), MatRef::rm(x, p), T::zero(), y);
    } else {
        let mut col = vec![T::zero(); k * p];
        im2col(x, g, &mut col);
        gemm(g.cout, k, p, MatRef::rm(w, k), MatRef::rm(&col, p), T::zero(), y);
    }
    if let Some(b) = bias {
        for (co, row) in y.chunks_mut(p).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    n: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.p();
    let mut y = vec![T::zero(); n * out_sz];
    if n > 1 && out_sz * g.k() >= PAR_MIN_WORK {
        y.par_chunks_mut(out_sz)
            .enumerate()
            .for_each(|(i, yi)| conv_one(&x[i * in_sz..(i + 1) * in_sz], w, bias, g, yi));
    } else {
        for (i, yi) in y.chunks_mut(out_sz).enumerate() {
            conv_one(&x[i * in_sz..(i + 1) * in_sz], w, bias, g, yi);
        }
    }
    y
}

/// Per-image backward. Returns (dx, dw) for that image.
fn conv_back_one<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (k, p) = (g.k(), g.p());
    let mut dw = vec![T::zero(); g.cout * k];
    let dx = if g.is_pointwise() {
        gemm(g.cout, p, k, MatRef::rm(dy, p), MatRef::tr(x, p), T::zero(), &mut dw);
        need_dx.then(|| {
            let mut dx = vec![T::zero(); k * p];
            gemm(k, g.cout, p, MatRef::tr(w, k), MatRef::rm(dy, p), T::zero(), &mut dx);
            dx
        })
    } else {
        let mut col = vec![T::zero(); k * p];
        im2col(x, g, &mut col);
        gemm(g.cout, p, k, MatRef::rm(dy, p), MatRef::tr(&col, p), T::zero(), &mut dw);
        need_dx.then(|| {
            gemm(k, g.cout, p, MatRef::tr(w, k), MatRef::rm(dy, p), T::zero(), &mut col);
            let mut dx = vec![T::zero(); g.cin * g.h * g.w];
            col2im(&col, g, &mut dx);
            dx
        })
    };
    (dx, dw)
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.p();
    let per: Vec<(Option<Vec<T>>, Vec<T>)> = if n > 1 && out_sz * g.k() >= PAR_MIN_WORK {
        (0..n)
            .into_par_iter()
            .map(|i| {
                conv_back_one(
                    &x[i * in_sz..(i + 1) * in_sz],
                    w,
                    &dy[i * out_sz..(i + 1) * out_sz],
                    g,
                    need_dx,
                )
            })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                conv_back_one(
                    &x[i * in_sz..(i + 1) * in_sz],
                    w,
                    &dy[i * out_sz..(i + 1) * out_sz],
                    g,
                    need_dx,
                )
            })
            .collect()
    };
    // Reduce in image order so the result does not depend on scheduling.
    let mut dw = vec![T::zero(); g.cout * g.k()];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_sz));
    for (dxi, dwi) in per {
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a += *b;
        }
        if let (Some(acc), Some(d)) = (dx.as_mut(), dxi) {
            acc.extend_from_slice(&d);
        }
    }
    let p = g.p();
    let mut db = vec![T::zero(); g.cout];
    for i in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = i * out_sz + co * p;
            *acc += dy[base..base + p].iter().copied().sum::<T>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Geometry of an unpadded pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Returns pooled values and the flat input index chosen for each output.
pub fn maxpool_forward<T: Scalar>(x: &[T], n: usize, g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = n * g.c;
    let mut y = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let idx = base + (oy * g.s + ky) * g.w + ox * g.s + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}

pub fn avgpool_forward<T: Scalar>(x: &[T], n: usize, g: &PoolGeom) -> Vec<T> {
    let planes = n * g.c;
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut y = Vec::with_capacity(planes * g.ho * g.wo);
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for ky in 0..g.k {
                    let row = base + (oy * g.s + ky) * g.w + ox * g.s;
                    acc += x[row..row + g.k].iter().copied().sum::<T>();
                }
                y.push(acc * inv);
            }
        }
    }
    y
}

pub fn avgpool_backward<T: Scalar>(dy: &[T], n: usize, g: &PoolGeom) -> Vec<T> {
    let planes = n * g.c;
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut dx = vec![T::zero(); planes * g.h * g.w];
    for pl in 0..planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = dy[(pl * g.ho + oy) * g.wo + ox] * inv;
                for ky in 0..g.k {
                    let row = base + (oy * g.s + ky) * g.w + ox * g.s;
                    dx[row..row + g.k].iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.cout * g.ho * g.wo];
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                                let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    y[(co * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let g = ConvGeom { cin: 2, cout: 3, kh: 3, kw: 2, sh: 2, sw: 1, ph: 1, pw: 1, h: 7, w: 5, ho: 4, wo: 6 };
        let x: Vec<f64> = (0..2 * 7 * 5).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 2).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
        let y = conv2d_forward(&x, &w, None, 1, &g);
        let want = naive_conv(&x, &w, &g);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
