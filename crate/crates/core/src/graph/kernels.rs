//! Raw forward/backward kernels over contiguous `(b, c, h, w)` buffers.

use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], out_ch: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let [batch, in_ch, h, w] = x;
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            batch,
            in_ch,
            out_ch,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.out_ch * self.out_hw()
    }
}

/// Valid output column range `[lo, hi)` for kernel offset `kx` along one axis.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    kx: usize,
) -> (usize, usize) {
    // ix = ox * stride + kx - pad must lie in [0, in_len)
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if in_len + pad > kx {
        ((in_len + pad - kx - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Output rows per im2col chunk, sized so a chunk of columns stays cache-resident.
fn chunk_rows(g: &ConvGeom) -> usize {
    const TARGET_ELEMS: usize = 1 << 16;
    (TARGET_ELEMS / (g.patch() * g.ow).max(1))
        .max(256usize.div_ceil(g.ow))
        .clamp(1, g.oh)
}

/// Fill `cols` (`patch x (rows * ow)`) with the patches for output rows `[oy0, oy0 + rows)`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T], oy0: usize, rows: usize) {
    let n = rows * g.ow;
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let dst = &mut cols[row..row + n];
                let (xlo, xhi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                for r in 0..rows {
                    let out_row = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let iy = ((oy0 + r) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        out_row[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *o = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn col2im_add<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T], oy0: usize, rows: usize) {
    let n = rows * g.ow;
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let src = &cols[row..row + n];
                let (xlo, xhi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                for r in 0..rows {
                    let iy = ((oy0 + r) * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[r * g.ow..(r + 1) * g.ow];
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        for (d, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&s[xlo..xhi])
                        {
                            *d = *d + v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = ox * g.stride + kx - g.pad;
                            dst[ix] = dst[ix] + s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row chunks `(oy0, rows)` covering the output.
fn chunks(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let step = chunk_rows(g);
    let oh = g.oh;
    (0..oh)
        .step_by(step)
        .map(move |oy0| (oy0, step.min(oh - oy0)))
}

pub fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut out = vec![T::zero(); g.batch * g.out_item()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * chunk_rows(g) * g.ow]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_item()..(b + 1) * g.in_item()];
        let ob = &mut out[b * g.out_item()..(b + 1) * g.out_item()];
        if g.is_pointwise() {
            T::gemm(
                g.out_ch,
                patch,
                ohw,
                T::one(),
                weight,
                (patch as isize, 1),
                xb,
                (ohw as isize, 1),
                T::zero(),
                ob,
                ohw as isize,
            );
        } else {
            for (oy0, rows) in chunks(g) {
                let n = rows * g.ow;
                im2col(g, xb, &mut cols, oy0, rows);
                T::gemm(
                    g.out_ch,
                    patch,
                    n,
                    T::one(),
                    weight,
                    (patch as isize, 1),
                    &cols[..patch * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut ob[oy0 * g.ow..],
                    ohw as isize,
                );
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut ob[c * ohw..(c + 1) * ohw] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_data<T: Element>(g: &ConvGeom, dy: &[T], weight: &[T]) -> Vec<T> {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut dx = vec![T::zero(); g.batch * g.in_item()];
    let mut dcols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * chunk_rows(g) * g.ow]
    };
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_item()..(b + 1) * g.out_item()];
        let dxb = &mut dx[b * g.in_item()..(b + 1) * g.in_item()];
        // weight^T (patch x out_ch) read through swapped strides.
        if g.is_pointwise() {
            T::gemm(
                patch,
                g.out_ch,
                ohw,
                T::one(),
                weight,
                (1, patch as isize),
                dyb,
                (ohw as isize, 1),
                T::zero(),
                dxb,
                ohw as isize,
            );
        } else {
            for (oy0, rows) in chunks(g) {
                let n = rows * g.ow;
                T::gemm(
                    patch,
                    g.out_ch,
                    n,
                    T::one(),
                    weight,
                    (1, patch as isize),
                    &dyb[oy0 * g.ow..],
                    (ohw as isize, 1),
                    T::zero(),
                    &mut dcols[..patch * n],
                    n as isize,
                );
                col2im_add(g, &dcols, dxb, oy0, rows);
            }
        }
    }
    dx
}

/// Accumulates weight (and optionally bias) gradients over the batch.
pub fn conv2d_backward_params<T: Element>(
    g: &ConvGeom,
    x: &[T],
    dy: &[T],
    dweight: &mut [T],
    mut dbias: Option<&mut [T]>,
) {
    let (patch, ohw) = (g.patch(), g.out_hw());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * chunk_rows(g) * g.ow]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_item()..(b + 1) * g.in_item()];
        let dyb = &dy[b * g.out_item()..(b + 1) * g.out_item()];
        // cols^T (n x patch) read through swapped strides.
        if g.is_pointwise() {
            T::gemm(
                g.out_ch,
                ohw,
                patch,
                T::one(),
                dyb,
                (ohw as isize, 1),
                xb,
                (1, ohw as isize),
                T::one(),
                dweight,
                patch as isize,
            );
        } else {
            for (oy0, rows) in chunks(g) {
                let n = rows * g.ow;
                im2col(g, xb, &mut cols, oy0, rows);
                T::gemm(
                    g.out_ch,
                    n,
                    patch,
                    T::one(),
                    &dyb[oy0 * g.ow..],
                    (ohw as isize, 1),
                    &cols[..patch * n],
                    (1, n as isize),
                    T::one(),
                    dweight,
                    patch as isize,
                );
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (c, d) in db.iter_mut().enumerate() {
                *d = *d + dyb[c * ohw..(c + 1) * ohw].iter().copied().sum::<T>();
            }
        }
    }
}

/// Per-group statistics saved by the forward pass.
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &[T],
    dims: [usize; 4],
    groups: usize,
    scale: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let [b, c, h, w] = dims;
    let cpg = c / groups;
    let span = cpg * h * w;
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cpg) * hw;
            let seg = &x[off..off + span];
            let (m, var) = moments(seg);
            let mean = T::from_f64_lossy(m);
            let rstd = T::from_f64_lossy(1.0 / (var + eps.to_f64().unwrap()).sqrt());
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (s, t) = (scale[ch] * rstd, shift[ch]);
                let base = off + ci * hw;
                for i in base..base + hw {
                    y[i] = (x[i] - mean) * s + t;
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    (y, stats)
}

/// Returns `dx`; accumulates into `dscale`/`dshift` when given.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    dy: &[T],
    dims: [usize; 4],
    groups: usize,
    scale: &[T],
    stats: &GroupStats<T>,
    want_dx: bool,
    mut dscale: Option<&mut [T]>,
    mut dshift: Option<&mut [T]>,
) -> Option<Vec<T>> {
    let [b, c, h, w] = dims;
    let cpg = c / groups;
    let hw = h * w;
    let n = T::from_usize(cpg * hw).unwrap();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    for bi in 0..b {
        for gi in 0..groups {
            let k = bi * groups + gi;
            let (mean, rstd) = (stats.mean[k], stats.rstd[k]);
            let off = (bi * c + gi * cpg) * hw;
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let base = off + ci * hw;
                let mut ds = T::zero();
                let mut dt = T::zero();
                for i in base..base + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let dxhat = dy[i] * scale[ch];
                    s1 = s1 + dxhat;
                    s2 = s2 + dxhat * xhat;
                    ds = ds + dy[i] * xhat;
                    dt = dt + dy[i];
                }
                if let Some(d) = dscale.as_deref_mut() {
                    d[ch] = d[ch] + ds;
                }
                if let Some(d) = dshift.as_deref_mut() {
                    d[ch] = d[ch] + dt;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let (m1, m2) = (s1 / n, s2 / n);
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let base = off + ci * hw;
                    for i in base..base + hw {
                        let xhat = (x[i] - mean) * rstd;
                        dx[i] = rstd * (dy[i] * scale[ch] - m1 - xhat * m2);
                    }
                }
            }
        }
    }
    dx
}

/// Mean and biased variance, accumulated in double precision.
fn moments<T: Element>(seg: &[T]) -> (f64, f64) {
    let n = seg.len() as f64;
    let mean = seg.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let var = seg
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// Per-`(sample, channel)` mean and `1/sqrt(var + eps)` over spatial positions,
/// using the biased (divide-by-n) variance.
pub fn channel_stats<T: Element>(x: &[T], dims: [usize; 4], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let hw = h * w;
    (0..b * c)
        .map(|k| {
            let (m, var) = moments(&x[k * hw..(k + 1) * hw]);
            (m, 1.0 / (var + eps).sqrt())
        })
        .unzip()
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn upsample2x<T: Element>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = src[iy * w + ix];
                let o = 2 * iy * ow + 2 * ix;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Element>(dy: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let ow = 2 * w;
    let mut dx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let o = 2 * iy * ow + 2 * ix;
                dst[iy * w + ix] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        dims: [usize; 4],
        w: &[f64],
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let g = ConvGeom::new(dims, out_ch, k, stride, pad).unwrap();
        let mut y = vec![0.0; g.batch * out_ch * g.oh * g.ow];
        for b in 0..g.batch {
            for o in 0..out_ch {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((b * g.in_ch + ci) * g.h + iy as usize) * g.w
                                        + ix as usize]
                                        * w[((o * g.in_ch + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[((b * out_ch + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(h, w, k, stride, pad) in &[
            (5, 6, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (4, 5, 1, 1, 0),
            (7, 5, 3, 2, 0),
        ] {
            let dims = [2, 3, h, w];
            let x: Vec<f64> = (0..2 * 3 * h * w)
                .map(|i| ((i * 7919) % 13) as f64 - 6.0)
                .collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k)
                .map(|i| ((i * 31) % 7) as f64 * 0.25 - 0.75)
                .collect();
            let g = ConvGeom::new(dims, 4, k, stride, pad).unwrap();
            let got = conv2d_forward(&g, &x, &wt, None);
            assert_eq!(
                got,
                naive_conv(&x, dims, &wt, 4, k, stride, pad),
                "geom {g:?}"
            );
        }
    }

    #[test]
    fn chunked_conv_and_adjoints_match_direct_loops() {
        for &(stride, pad) in &[(1, 1), (2, 1)] {
            let dims = [2, 64, 80, 16];
            let g = ConvGeom::new(dims, 5, 3, stride, pad).unwrap();
            assert!(chunk_rows(&g) < g.oh, "geometry must span several chunks");
            let x: Vec<f64> = (0..dims.iter().product::<usize>())
                .map(|i| ((i * 7919) % 13) as f64 - 6.0)
                .collect();
            let wt: Vec<f64> = (0..5 * 64 * 9)
                .map(|i| ((i * 31) % 7) as f64 - 3.0)
                .collect();
            let y = conv2d_forward(&g, &x, &wt, None);
            assert_eq!(y, naive_conv(&x, dims, &wt, 5, 3, stride, pad));

            let dy: Vec<f64> = (0..y.len()).map(|i| ((i * 17) % 5) as f64 - 2.0).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &dy);
            let dx = conv2d_backward_data(&g, &dy, &wt);
            assert_eq!(dot(&x, &dx), lhs);
            let mut dw = vec![0.0; wt.len()];
            conv2d_backward_params(&g, &x, &dy, &mut dw, None);
            assert_eq!(dot(&wt, &dw), lhs);
        }
    }

    #[test]
    fn valid_range_covers_exactly_in_bounds_columns() {
        for &(ow, w, s, p) in &[(6usize, 6usize, 1usize, 1usize), (3, 6, 2, 1), (3, 7, 2, 0)] {
            for kx in 0..3 {
                let (lo, hi) = valid_range(ow, w, s, p, kx);
                for ox in 0..ow {
                    let ix = (ox * s + kx) as isize - p as isize;
                    let inside = ix >= 0 && ix < w as isize;
                    assert_eq!(
                        inside,
                        ox >= lo && ox < hi,
                        "ow={ow} w={w} s={s} p={p} kx={kx} ox={ox}"
                    );
                }
            }
        }
    }
}
