//! Slice-level forward and backward kernels for the spatial ops.

use crate::real::Real;

/// Unfolds one `[c, h, w]` image into `[c*k*k, h*w]` patches with zero padding `k/2`.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * hw..][..hw];
                let ox_lo = p.saturating_sub(kj);
                let ox_hi = (w + p).saturating_sub(kj).min(w);
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ki;
                    if iy < p || iy - p >= h || ox_lo >= ox_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let iy = iy - p;
                    out[..ox_lo].fill(T::zero());
                    out[ox_hi..].fill(T::zero());
                    let ix_lo = ox_lo + kj - p;
                    out[ox_lo..ox_hi].copy_from_slice(&plane[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * hw..][..hw];
                let ox_lo = p.saturating_sub(kj);
                let ox_hi = (w + p).saturating_sub(kj).min(w);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + ki;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let iy = iy - p;
                    let ix_lo = ox_lo + kj - p;
                    let dst = &mut plane[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * w + ox_lo..oy * w + ox_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<T: Real>(d: &ConvDims, x: &[T], wt: &[T], b: Option<&[T]>) -> Vec<T> {
    let hw = d.h * d.w;
    let ckk = d.ci * d.k * d.k;
    let mut cols = vec![T::zero(); ckk * hw];
    let mut out = vec![T::zero(); d.n * d.co * hw];
    for s in 0..d.n {
        im2col(&x[s * d.ci * hw..(s + 1) * d.ci * hw], d.ci, d.h, d.w, d.k, &mut cols);
        let o = &mut out[s * d.co * hw..(s + 1) * d.co * hw];
        T::gemm(
            d.co,
            ckk,
            hw,
            wt,
            (ckk as isize, 1),
            &cols,
            (hw as isize, 1),
            o,
            (hw as isize, 1),
            false,
        );
        if let Some(b) = b {
            for (row, &bv) in o.chunks_exact_mut(hw).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are requested.
pub(crate) fn conv2d_backward<T: Real>(
    d: &ConvDims,
    x: &[T],
    wt: &[T],
    g: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let ckk = d.ci * d.k * d.k;
    let mut cols = vec![T::zero(); ckk * hw];
    for s in 0..d.n {
        let gs = &g[s * d.co * hw..(s + 1) * d.co * hw];
        if let Some(db) = db.as_deref_mut() {
            for (acc, row) in db.iter_mut().zip(gs.chunks_exact(hw)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[s * d.ci * hw..(s + 1) * d.ci * hw], d.ci, d.h, d.w, d.k, &mut cols);
            T::gemm(
                d.co,
                hw,
                ckk,
                gs,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                dw,
                (ckk as isize, 1),
                true,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                ckk,
                d.co,
                hw,
                wt,
                (1, ckk as isize),
                gs,
                (hw as isize, 1),
                &mut cols,
                (hw as isize, 1),
                false,
            );
            col2im_add(&cols, d.ci, d.h, d.w, d.k, &mut dx[s * d.ci * hw..(s + 1) * d.ci * hw]);
        }
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2; weights `[ci, co, 2, 2]`.
pub(crate) fn conv_t2_forward<T: Real>(d: &ConvDims, x: &[T], wt: &[T], b: Option<&[T]>) -> Vec<T> {
    let hw = d.h * d.w;
    let (h2, w2) = (2 * d.h, 2 * d.w);
    let rows = d.co * 4;
    let mut y = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); d.n * d.co * h2 * w2];
    for s in 0..d.n {
        let xs = &x[s * d.ci * hw..(s + 1) * d.ci * hw];
        T::gemm(
            rows,
            d.ci,
            hw,
            wt,
            (1, rows as isize),
            xs,
            (hw as isize, 1),
            &mut y,
            (hw as isize, 1),
            false,
        );
        let o = &mut out[s * d.co * h2 * w2..(s + 1) * d.co * h2 * w2];
        for co in 0..d.co {
            let bias = b.map_or(T::zero(), |b| b[co]);
            for di in 0..2 {
                for dj in 0..2 {
                    let yr = &y[(co * 4 + di * 2 + dj) * hw..][..hw];
                    for i in 0..d.h {
                        for j in 0..d.w {
                            o[(co * h2 + 2 * i + di) * w2 + 2 * j + dj] = yr[i * d.w + j] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t2_backward<T: Real>(
    d: &ConvDims,
    x: &[T],
    wt: &[T],
    g: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let (h2, w2) = (2 * d.h, 2 * d.w);
    let rows = d.co * 4;
    let mut gy = vec![T::zero(); rows * hw];
    for s in 0..d.n {
        let gs = &g[s * d.co * h2 * w2..(s + 1) * d.co * h2 * w2];
        for co in 0..d.co {
            for di in 0..2 {
                for dj in 0..2 {
                    let r = &mut gy[(co * 4 + di * 2 + dj) * hw..][..hw];
                    for i in 0..d.h {
                        for j in 0..d.w {
                            r[i * d.w + j] = gs[(co * h2 + 2 * i + di) * w2 + 2 * j + dj];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += gs[co * h2 * w2..(co + 1) * h2 * w2].iter().copied().sum::<T>();
            }
        }
        let xs = &x[s * d.ci * hw..(s + 1) * d.ci * hw];
        if let Some(dw) = dw.as_deref_mut() {
            T::gemm(
                d.ci,
                hw,
                rows,
                xs,
                (hw as isize, 1),
                &gy,
                (1, hw as isize),
                dw,
                (rows as isize, 1),
                true,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * d.ci * hw..(s + 1) * d.ci * hw];
            T::gemm(
                d.ci,
                rows,
                hw,
                wt,
                (rows as isize, 1),
                &gy,
                (hw as isize, 1),
                dxs,
                (hw as isize, 1),
                true,
            );
        }
    }
}

/// 2×2 max pooling with stride 2; returns the output and the flat input index of each maximum.
/// Ties go to the first maximal element in scan order.
pub(crate) fn maxpool2_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
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

pub(crate) struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupNormSaved<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let off = (s * c + g * cg) * hw;
            let seg = &x[off..off + m];
            let mean = seg.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(T::lit(inv));
            for (ch, (xs, os)) in seg
                .chunks_exact(hw)
                .zip(xhat[off..off + m].chunks_exact_mut(hw))
                .enumerate()
            {
                let cidx = g * cg + ch;
                let (ga, be) = (gamma[cidx], beta[cidx]);
                let o = &mut out[off + ch * hw..off + (ch + 1) * hw];
                for ((xv, xh), ov) in xs.iter().zip(os.iter_mut()).zip(o.iter_mut()) {
                    *xh = T::lit((xv.to_f64_lossy() - mean) * inv);
                    *ov = *xh * ga + be;
                }
            }
        }
    }
    (out, GroupNormSaved { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Real>(
    saved: &GroupNormSaved<T>,
    (n, c, hw): (usize, usize, usize),
    groups: usize,
    gamma: &[T],
    g: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let cg = c / groups;
    let m = cg * hw;
    for s in 0..n {
        for gi in 0..groups {
            let off = (s * c + gi * cg) * hw;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let r = off + ch * hw..off + (ch + 1) * hw;
                let (gs, xh) = (&g[r.clone()], &saved.xhat[r]);
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for (&gv, &xv) in gs.iter().zip(xh) {
                    sg += gv.to_f64_lossy();
                    sgx += (gv * xv).to_f64_lossy();
                }
                if let Some(db) = dbeta.as_deref_mut() {
                    db[cidx] += T::lit(sg);
                }
                if let Some(dga) = dgamma.as_deref_mut() {
                    dga[cidx] += T::lit(sgx);
                }
                let ga = gamma[cidx].to_f64_lossy();
                sum_d += sg * ga;
                sum_dx += sgx * ga;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let inv = saved.inv_std[s * groups + gi].to_f64_lossy();
                let (mean_d, mean_dx) = (sum_d / m as f64, sum_dx / m as f64);
                for ch in 0..cg {
                    let ga = gamma[gi * cg + ch].to_f64_lossy();
                    let r = off + ch * hw..off + (ch + 1) * hw;
                    for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&saved.xhat[r]) {
                        let dxh = gv.to_f64_lossy() * ga;
                        *d += T::lit(inv * (dxh - mean_d - xv.to_f64_lossy() * mean_dx));
                    }
                }
            }
        }
    }
}
