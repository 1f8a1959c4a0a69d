//! Raw compute kernels on NCHW buffers. No shape validation happens here;
//! callers in `autograd` check shapes before dispatching.

use crate::tensor::{lit, Float};

/// Upper bound on the number of elements in one im2col tile.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Reflection index mapping without edge repetition, extended periodically so
/// that any pad width works on any positive length.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn ho(&self) -> usize {
        self.h - self.k + 1
    }

    pub fn wo(&self) -> usize {
        self.w - self.k + 1
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn tile_rows(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.wo()).max(1)).clamp(1, self.ho())
    }
}

fn im2col<T: Float>(x: &[T], d: &ConvDims, y0: usize, rows: usize, cols: &mut [T]) {
    let (k, wo) = (d.k, d.wo());
    let tile = rows * wo;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * tile..(row + 1) * tile];
                for r in 0..rows {
                    let src_off = (y0 + r + ki) * d.w + kj;
                    dst[r * wo..(r + 1) * wo].copy_from_slice(&plane[src_off..src_off + wo]);
                }
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], d: &ConvDims, y0: usize, rows: usize, dx: &mut [T]) {
    let (k, wo) = (d.k, d.wo());
    let tile = rows * wo;
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * tile..(row + 1) * tile];
                for r in 0..rows {
                    let dst_off = (y0 + r + ki) * d.w + kj;
                    for (a, &b) in plane[dst_off..dst_off + wo].iter_mut().zip(&src[r * wo..(r + 1) * wo]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) stride-1 convolution.
pub fn conv2d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (ho, wo) = (d.ho(), d.wo());
    let hw_out = ho * wo;
    let ckk = d.ckk();
    let mut out = vec![T::zero(); d.n * d.o * hw_out];
    let mut cols = if d.k == 1 { Vec::new() } else { vec![T::zero(); ckk * d.tile_rows() * wo] };
    for n in 0..d.n {
        let xn = &x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let on = &mut out[n * d.o * hw_out..(n + 1) * d.o * hw_out];
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                on[o * hw_out..(o + 1) * hw_out].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if d.k == 1 {
            unsafe {
                T::gemm(
                    d.o, d.c, hw_out, T::one(), w.as_ptr(), d.c as isize, 1, xn.as_ptr(),
                    hw_out as isize, 1, beta, on.as_mut_ptr(), hw_out as isize, 1,
                );
            }
            continue;
        }
        let step = d.tile_rows();
        let mut y0 = 0;
        while y0 < ho {
            let rows = step.min(ho - y0);
            let tile = rows * wo;
            im2col(xn, d, y0, rows, &mut cols[..ckk * tile]);
            unsafe {
                T::gemm(
                    d.o, ckk, tile, T::one(), w.as_ptr(), ckk as isize, 1, cols.as_ptr(),
                    tile as isize, 1, beta, on.as_mut_ptr().add(y0 * wo), hw_out as isize, 1,
                );
            }
            y0 += rows;
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (ho, wo) = (d.ho(), d.wo());
    let hw_out = ho * wo;
    let ckk = d.ckk();
    let mut dx = need_dx.then(|| vec![T::zero(); d.n * d.c * d.h * d.w]);
    let mut dw = need_dw.then(|| vec![T::zero(); d.o * ckk]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); d.o];
        for n in 0..d.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let off = (n * d.o + o) * hw_out;
                *acc += dy[off..off + hw_out].iter().copied().sum::<T>();
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx, dw, db };
    }
    let step = d.tile_rows();
    let mut cols = if d.k == 1 { Vec::new() } else { vec![T::zero(); ckk * step * wo] };
    let mut dcols = if d.k == 1 || !need_dx { Vec::new() } else { vec![T::zero(); ckk * step * wo] };
    for n in 0..d.n {
        let xn = &x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let dyn_ = &dy[n * d.o * hw_out..(n + 1) * d.o * hw_out];
        if d.k == 1 {
            if let Some(dw) = dw.as_mut() {
                unsafe {
                    T::gemm(
                        d.o, hw_out, d.c, T::one(), dyn_.as_ptr(), hw_out as isize, 1, xn.as_ptr(),
                        1, hw_out as isize, T::one(), dw.as_mut_ptr(), d.c as isize, 1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
                unsafe {
                    T::gemm(
                        d.c, d.o, hw_out, T::one(), w.as_ptr(), 1, d.c as isize, dyn_.as_ptr(),
                        hw_out as isize, 1, T::zero(), dxn.as_mut_ptr(), hw_out as isize, 1,
                    );
                }
            }
            continue;
        }
        let mut y0 = 0;
        while y0 < ho {
            let rows = step.min(ho - y0);
            let tile = rows * wo;
            let dy_tile = unsafe { dyn_.as_ptr().add(y0 * wo) };
            if let Some(dw) = dw.as_mut() {
                im2col(xn, d, y0, rows, &mut cols[..ckk * tile]);
                unsafe {
                    T::gemm(
                        d.o, tile, ckk, T::one(), dy_tile, hw_out as isize, 1, cols.as_ptr(), 1,
                        tile as isize, T::one(), dw.as_mut_ptr(), ckk as isize, 1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                unsafe {
                    T::gemm(
                        ckk, d.o, tile, T::one(), w.as_ptr(), 1, ckk as isize, dy_tile,
                        hw_out as isize, 1, T::zero(), dcols.as_mut_ptr(), tile as isize, 1,
                    );
                }
                let dxn = &mut dx[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
                col2im_add(&dcols[..ckk * tile], d, y0, rows, dxn);
            }
            y0 += rows;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Pads every plane of an `[planes, h, w]` buffer by `p` on each side.
pub fn pad_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * hp * wp];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * hp * wp..(pl + 1) * hp * wp];
        for yy in 0..hp {
            let sy = yy as isize - p as isize;
            let row = match mode {
                PadMode::Zero if sy < 0 || sy >= h as isize => continue,
                PadMode::Zero => sy as usize,
                PadMode::Reflect => reflect_index(sy, h),
            };
            let drow = &mut dst[yy * wp..(yy + 1) * wp];
            drow[p..p + w].copy_from_slice(&src[row * w..(row + 1) * w]);
            if mode == PadMode::Reflect {
                for xx in (0..p).chain(p + w..wp) {
                    drow[xx] = src[row * w + reflect_index(xx as isize - p as isize, w)];
                }
            }
        }
    }
    out
}

pub fn pad_backward<T: Float>(dy: &[T], planes: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * hp * wp..(pl + 1) * hp * wp];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for yy in 0..hp {
            let sy = yy as isize - p as isize;
            match mode {
                PadMode::Zero => {
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = sy as usize;
                    for (a, &b) in dst[row * w..(row + 1) * w].iter_mut().zip(&src[yy * wp + p..yy * wp + p + w]) {
                        *a += b;
                    }
                }
                PadMode::Reflect => {
                    let row = reflect_index(sy, h);
                    for xx in 0..wp {
                        let col = reflect_index(xx as isize - p as isize, w);
                        dst[row * w + col] += src[yy * wp + xx];
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling (floor on odd sizes); returns the output and the
/// flat input index selected for every output element.
pub fn max_pool2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] || x[idx].is_nan() {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for y in 0..ho {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, v) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Float>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wo = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    }
    dx
}

/// Per-plane mean over `len` contiguous elements.
pub fn plane_means<T: Float>(x: &[T], len: usize) -> Vec<T> {
    let inv = T::one() / lit::<T>(len as f64);
    x.chunks_exact(len).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

/// Per-plane population standard deviation `sqrt(var + eps)`.
pub fn plane_stds<T: Float>(x: &[T], len: usize, eps: T) -> Vec<T> {
    let means = plane_means(x, len);
    let inv = T::one() / lit::<T>(len as f64);
    x.chunks_exact(len)
        .zip(&means)
        .map(|(p, &m)| {
            let var = p.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
            (var + eps).sqrt()
        })
        .collect()
}
