//! Raw numeric kernels over flat slices.
//!
//! Every reduction runs in a fixed order, so results are bitwise
//! reproducible for identical inputs. Lane-chunked accumulators
//! (`LANES` independent partial sums, combined left to right) are used where
//! a plain sequential sum would block vectorization.

use crate::error::{Error, Result};
use crate::simd::Lanes;
use crate::tensor::Real;

const LANES: usize = 16;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; LANES] = x.try_into().unwrap();
        let y: &[T; LANES] = y.try_into().unwrap();
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let ra = ca.remainder();
    for x in ca {
        let x: &[T; LANES] = x.try_into().unwrap();
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for x in ra {
        s += *x;
    }
    s
}

#[inline]
fn max<T: Real>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let ca = a.chunks_exact(LANES);
    let ra = ca.remainder();
    for x in ca {
        let x: &[T; LANES] = x.try_into().unwrap();
        for l in 0..LANES {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    let mut m = T::neg_infinity();
    for v in acc.iter().chain(ra) {
        if *v > m {
            m = *v;
        }
    }
    m
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

/// In-place numerically stable softmax of one slice.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = max(row);
    for v in row.iter_mut() {
        *v = (*v - m).exp_fast();
    }
    let s = sum(row);
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Geometry of a (grouped) 2-D cross-correlation with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, cin, h, wd] = x[..] else {
            return Err(Error::Rank {
                op,
                expected: 4,
                found: x.to_vec(),
            });
        };
        let [cout, cin_g, kh, kw] = w[..] else {
            return Err(Error::Rank {
                op,
                expected: 4,
                found: w.to_vec(),
            });
        };
        if stride == 0 || groups == 0 {
            return Err(Error::invalid(op, "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(
                op,
                format!("channels {cin}->{cout} not divisible by {groups} groups"),
            ));
        }
        if cin_g != cin / groups {
            return Err(Error::Dimension {
                op,
                axis: "in_channels",
                expected: cin / groups,
                found: cin_g,
            });
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(op, "empty kernel"));
        }
        if h + 2 * pad < kh {
            return Err(Error::Dimension {
                op,
                axis: "height",
                expected: kh,
                found: h + 2 * pad,
            });
        }
        if wd + 2 * pad < kw {
            return Err(Error::Dimension {
                op,
                axis: "width",
                expected: kw,
                found: wd + 2 * pad,
            });
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        valid_range(self.wo, self.w, self.stride, self.pad, k)
    }

    fn valid_rows(&self, k: usize) -> (usize, usize) {
        valid_range(self.ho, self.h, self.stride, self.pad, k)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }
}

fn valid_range(out: usize, inp: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - pad <= inp - 1
    let hi = if inp + pad < k + 1 {
        0
    } else {
        ((inp - 1 + pad - k) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Splits every `h x w` plane into `s*s` phase planes of `hp x wp`, phase
/// `(py, px)` holding pixels `(r*s + py, c*s + px)`. A strided convolution
/// then reads each phase with unit stride.
fn to_phases<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![T::zero(); planes * s * s * hp * wp];
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                let ph = (p * s + iy % s) * s + ix % s;
                out[ph * hp * wp + (iy / s) * wp + ix / s] = x[(p * h + iy) * w + ix];
            }
        }
    }
    (out, hp, wp)
}

fn from_phases<T: Real>(ph: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (hp, wp) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                let k = (p * s + iy % s) * s + ix % s;
                out[(p * h + iy) * w + ix] = ph[k * hp * wp + (iy / s) * wp + ix / s];
            }
        }
    }
    out
}

/// Phase index and phase-grid shift of kernel tap `k`: input coordinate
/// `o*stride + k - pad` lies in phase `p` at grid position `o + shift`.
fn tap_phase(k: usize, pad: usize, stride: usize) -> (usize, isize) {
    let off = k as isize - pad as isize;
    (
        off.rem_euclid(stride as isize) as usize,
        off.div_euclid(stride as isize),
    )
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let s = g.stride;
    let (xph, hp, wp) = if s > 1 {
        to_phases(x, g.batch * g.cin, g.h, g.w, s)
    } else {
        (Vec::new(), g.h, g.w)
    };
    let (src_all, plane_len) = if s > 1 {
        (&xph[..], s * s * hp * wp)
    } else {
        (x, hw)
    };
    let mut out = vec![T::zero(); g.batch * g.cout * ohw];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let plane = &mut out[(b * g.cout + co) * ohw..][..ohw];
            if let Some(bias) = bias {
                plane.fill(bias[co]);
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let src = &src_all[(b * g.cin + ci) * plane_len..][..plane_len];
                let wk = &w[(co * cin_g + cl) * g.kh * g.kw..][..g.kh * g.kw];
                if g.pointwise() {
                    axpy(plane, wk[0], src);
                    continue;
                }
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_rows(ky);
                    let (py, ay) = tap_phase(ky, g.pad, s);
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (ox0, ox1) = g.valid_cols(kx);
                        let (px, ax) = tap_phase(kx, g.pad, s);
                        let phase = &src[(py * s + px) * hp * wp..][..hp * wp];
                        let c0 = (ox0 as isize + ax) as usize;
                        for oy in oy0..oy1 {
                            let r = (oy as isize + ay) as usize;
                            let orow = &mut plane[oy * g.wo..][ox0..ox1];
                            axpy(orow, wv, &phase[r * wp + c0..][..ox1 - ox0]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let ksz = g.kh * g.kw;

    let db = need_db.then(|| {
        (0..g.cout)
            .map(|co| {
                let mut acc = T::zero();
                for b in 0..g.batch {
                    acc += sum(&dout[(b * g.cout + co) * ohw..][..ohw]);
                }
                acc
            })
            .collect()
    });

    let s = g.stride;
    let (xph, hp, wp) = if s > 1 && need_dw {
        to_phases(x, g.batch * g.cin, g.h, g.w, s)
    } else {
        (Vec::new(), g.h.div_ceil(s), g.w.div_ceil(s))
    };
    let plane_len = if s > 1 { s * s * hp * wp } else { hw };

    let dw = need_dw.then(|| {
        let src_all = if s > 1 { &xph[..] } else { x };
        let mut dw = vec![T::zero(); w.len()];
        for co in 0..g.cout {
            let grp = co / cout_g;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_rows(ky);
                    let (py, ay) = tap_phase(ky, g.pad, s);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid_cols(kx);
                        let (px, ax) = tap_phase(kx, g.pad, s);
                        let c0 = (ox0 as isize + ax) as usize;
                        let mut acc = T::zero();
                        for b in 0..g.batch {
                            let dplane = &dout[(b * g.cout + co) * ohw..][..ohw];
                            let src = &src_all[(b * g.cin + ci) * plane_len..][..plane_len];
                            if g.pointwise() {
                                acc += dot(dplane, src);
                                continue;
                            }
                            let phase = &src[(py * s + px) * hp * wp..][..hp * wp];
                            for oy in oy0..oy1 {
                                let r = (oy as isize + ay) as usize;
                                let drow = &dplane[oy * g.wo..][ox0..ox1];
                                acc += dot(drow, &phase[r * wp + c0..][..ox1 - ox0]);
                            }
                        }
                        dw[(co * cin_g + cl) * ksz + ky * g.kw + kx] = acc;
                    }
                }
            }
        }
        dw
    });

    let dx = need_dx.then(|| {
        // Accumulates in phase layout when strided, then interleaves back.
        let mut dx = vec![T::zero(); g.batch * g.cin * plane_len];
        for b in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / cout_g;
                let dplane = &dout[(b * g.cout + co) * ohw..][..ohw];
                for cl in 0..cin_g {
                    let ci = grp * cin_g + cl;
                    let dst = &mut dx[(b * g.cin + ci) * plane_len..][..plane_len];
                    let wk = &w[(co * cin_g + cl) * ksz..][..ksz];
                    if g.pointwise() {
                        axpy(dst, wk[0], dplane);
                        continue;
                    }
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_rows(ky);
                        let (py, ay) = tap_phase(ky, g.pad, s);
                        for kx in 0..g.kw {
                            let wv = wk[ky * g.kw + kx];
                            let (ox0, ox1) = g.valid_cols(kx);
                            let (px, ax) = tap_phase(kx, g.pad, s);
                            let c0 = (ox0 as isize + ax) as usize;
                            let phase = &mut dst[(py * s + px) * hp * wp..][..hp * wp];
                            for oy in oy0..oy1 {
                                let r = (oy as isize + ay) as usize;
                                let drow = &dplane[oy * g.wo..][ox0..ox1];
                                axpy(&mut phase[r * wp + c0..][..ox1 - ox0], wv, drow);
                            }
                        }
                    }
                }
            }
        }
        if s > 1 {
            from_phases(&dx, g.batch * g.cin, g.h, g.w, s)
        } else {
            dx
        }
    });

    (dx, dw, db)
}

/// `out[bt] = a[bt] (m x k) * b[bt] (k x n)`, summing over `k` left to right.
pub fn matmul_forward<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bt in 0..batch {
        let ab = &a[bt * m * k..][..m * k];
        let bb = &b[bt * k * n..][..k * n];
        let ob = &mut out[bt * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..][..n];
            for kk in 0..k {
                axpy(orow, ab[i * k + kk], &bb[kk * n..][..n]);
            }
        }
    }
    out
}

/// Returns `(da, db)`.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dout: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for bt in 0..batch {
        let ab = &a[bt * m * k..][..m * k];
        let bb = &b[bt * k * n..][..k * n];
        let gb = &dout[bt * m * n..][..m * n];
        let dab = &mut da[bt * m * k..][..m * k];
        for i in 0..m {
            for kk in 0..k {
                dab[i * k + kk] = dot(&gb[i * n..][..n], &bb[kk * n..][..n]);
            }
        }
        let dbb = &mut db[bt * k * n..][..k * n];
        for i in 0..m {
            for kk in 0..k {
                axpy(&mut dbb[kk * n..][..n], ab[i * k + kk], &gb[i * n..][..n]);
            }
        }
    }
    (da, db)
}

pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let s = dot(yr, gr);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - s);
        }
    }
    dx
}

/// Layout of a head-split attention problem over channel-major activations
/// `[B, C, N]`: head `h` owns channels `h*d .. (h+1)*d`, tokens are the `N`
/// flattened spatial positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub channels: usize,
    pub tokens: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn block(&self, b: usize, h: usize) -> usize {
        (b * self.channels + h * self.head_dim()) * self.tokens
    }
}

/// Largest head dimension the attention kernels accept.
pub const MAX_HEAD_DIM: usize = 64;

#[inline(always)]
fn ld<T: Real>(s: &[T], at: usize) -> T::Lanes {
    T::Lanes::load(&s[at..])
}

/// Logit of one query against a lane of keys: `sum_c qz[c] * k[c]`, always
/// accumulated in channel order so every pass reproduces it bitwise.
#[inline(always)]
fn logit_lanes<T: Real>(d: usize, qz: &[T::Lanes], kc: &[T::Lanes]) -> T::Lanes {
    let mut a = T::Lanes::splat(T::zero());
    for c in 0..d {
        a = qz[c].mul_add(kc[c], a);
    }
    a
}

#[inline(always)]
fn logit_scalar<T: Real>(d: usize, qz: &[T], k: &[T], n: usize, j: usize) -> T {
    let mut a = T::zero();
    for c in 0..d {
        a = qz[c].mul_add(k[c * n + j], a);
    }
    a
}

/// Forward pass for query rows `i0..i0+R` of one head. `D` bounds the
/// head dimension `d`; the dispatcher passes `D == d` for common sizes so
/// the channel loops unroll. Rows are processed together so each key and
/// value lane is loaded once per block instead of once per row.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_rows<T: Real, const D: usize, const R: usize>(
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    z: T,
    n: usize,
    i0: usize,
    out: &mut [T],
    stats: &mut [T],
) {
    let w = T::Lanes::WIDTH;
    let full = n / w * w;
    let zero = T::Lanes::splat(T::zero());
    let mut qz = [[T::zero(); D]; R];
    let mut qzl = [[zero; D]; R];
    for r in 0..R {
        for c in 0..d {
            qz[r][c] = q[c * n + i0 + r] * z;
            qzl[r][c] = T::Lanes::splat(qz[r][c]);
        }
    }
    let mut kc = [zero; D];
    let mut vc = [zero; D];

    let mut mx = [T::Lanes::splat(T::neg_infinity()); R];
    for j in (0..full).step_by(w) {
        for c in 0..d {
            kc[c] = ld(k, c * n + j);
        }
        for r in 0..R {
            mx[r] = mx[r].max(logit_lanes::<T>(d, &qzl[r], &kc));
        }
    }
    let mut m = [T::neg_infinity(); R];
    for r in 0..R {
        m[r] = mx[r].reduce_max();
        for j in full..n {
            m[r] = m[r].max(logit_scalar(d, &qz[r], k, n, j));
        }
    }

    let ms: [T::Lanes; R] = std::array::from_fn(|r| T::Lanes::splat(m[r]));
    let mut s = [zero; R];
    let mut acc = [[zero; D]; R];
    for j in (0..full).step_by(w) {
        for c in 0..d {
            kc[c] = ld(k, c * n + j);
            vc[c] = ld(v, c * n + j);
        }
        for r in 0..R {
            let e = (logit_lanes::<T>(d, &qzl[r], &kc) - ms[r]).exp_fast();
            s[r] = s[r] + e;
            for c in 0..d {
                acc[r][c] = e.mul_add(vc[c], acc[r][c]);
            }
        }
    }
    for r in 0..R {
        let mut total = s[r].reduce_add();
        let mut o = [T::zero(); D];
        for c in 0..d {
            o[c] = acc[r][c].reduce_add();
        }
        for j in full..n {
            let e = (logit_scalar(d, &qz[r], k, n, j) - m[r]).exp_fast();
            total += e;
            for c in 0..d {
                o[c] = e.mul_add(v[c * n + j], o[c]);
            }
        }
        let inv = T::one() / total;
        let i = i0 + r;
        for c in 0..d {
            out[c * n + i] = o[c] * inv;
        }
        stats[2 * i] = m[r];
        stats[2 * i + 1] = inv;
    }
}

/// Backward pass for query rows `i0..i0+R` of one head; returns their
/// contribution to the gradient of the head's scale. The weights are
/// recomputed from the saved row statistics exactly as the forward pass
/// produced them, and all gradients are accumulated in one sweep.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_rows<T: Real, const D: usize, const R: usize>(
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    z: T,
    n: usize,
    i0: usize,
    out: &[T],
    stats: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) -> T {
    let w = T::Lanes::WIDTH;
    let full = n / w * w;
    let zero = T::Lanes::splat(T::zero());
    let mut qz = [[T::zero(); D]; R];
    let mut qzl = [[zero; D]; R];
    let mut go = [[T::zero(); D]; R];
    let mut gol = [[zero; D]; R];
    // sum_j P_ij dP_ij == dO_i . O_i
    let mut delta = [T::zero(); R];
    for r in 0..R {
        let i = i0 + r;
        for c in 0..d {
            qz[r][c] = q[c * n + i] * z;
            qzl[r][c] = T::Lanes::splat(qz[r][c]);
            go[r][c] = dout[c * n + i];
            gol[r][c] = T::Lanes::splat(go[r][c]);
            delta[r] += go[r][c] * out[c * n + i];
        }
    }
    let m: [T; R] = std::array::from_fn(|r| stats[2 * (i0 + r)]);
    let inv: [T; R] = std::array::from_fn(|r| stats[2 * (i0 + r) + 1]);
    let ms: [T::Lanes; R] = std::array::from_fn(|r| T::Lanes::splat(m[r]));
    let invs: [T::Lanes; R] = std::array::from_fn(|r| T::Lanes::splat(inv[r]));
    let deltas: [T::Lanes; R] = std::array::from_fn(|r| T::Lanes::splat(delta[r]));

    let mut gq = [[zero; D]; R];
    let mut kc = [zero; D];
    let mut vc = [zero; D];
    for j in (0..full).step_by(w) {
        for c in 0..d {
            kc[c] = ld(k, c * n + j);
            vc[c] = ld(v, c * n + j);
        }
        let mut dka = [zero; D];
        let mut dva = [zero; D];
        for r in 0..R {
            let p = (logit_lanes::<T>(d, &qzl[r], &kc) - ms[r]).exp_fast() * invs[r];
            let dp = logit_lanes::<T>(d, &gol[r], &vc);
            let ds = p * (dp - deltas[r]);
            for c in 0..d {
                gq[r][c] = ds.mul_add(kc[c], gq[r][c]);
                dka[c] = ds.mul_add(qzl[r][c], dka[c]);
                dva[c] = p.mul_add(gol[r][c], dva[c]);
            }
        }
        for c in 0..d {
            let at = c * n + j;
            (ld(dk, at) + dka[c]).store(&mut dk[at..]);
            (ld(dv, at) + dva[c]).store(&mut dv[at..]);
        }
    }
    let mut gqs = [[T::zero(); D]; R];
    for r in 0..R {
        for c in 0..d {
            gqs[r][c] = gq[r][c].reduce_add();
        }
    }
    for j in full..n {
        for r in 0..R {
            let p = (logit_scalar(d, &qz[r], k, n, j) - m[r]).exp_fast() * inv[r];
            let dp = logit_scalar(d, &go[r], v, n, j);
            let ds = p * (dp - delta[r]);
            for c in 0..d {
                let at = c * n + j;
                gqs[r][c] = ds.mul_add(k[at], gqs[r][c]);
                dk[at] = ds.mul_add(qz[r][c], dk[at]);
                dv[at] = p.mul_add(go[r][c], dv[at]);
            }
        }
    }
    let mut dz = T::zero();
    for r in 0..R {
        for c in 0..d {
            dq[c * n + i0 + r] = z * gqs[r][c];
            dz += q[c * n + i0 + r] * gqs[r][c];
        }
    }
    dz
}

/// Query rows per block; small heads keep a block's accumulators in registers.
const fn rows_per_block(d: usize) -> usize {
    match d {
        0..=4 => 8,
        5..=8 => 4,
        9..=16 => 2,
        _ => 1,
    }
}

const fn bwd_rows_per_block(d: usize) -> usize {
    match d {
        0..=8 => 4,
        9..=16 => 2,
        _ => 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_head<T: Real, const D: usize>(
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    z: T,
    n: usize,
    out: &mut [T],
    stats: &mut [T],
) {
    let mut i = 0;
    let rb = rows_per_block(D);
    while rb == 8 && i + 8 <= n {
        forward_rows::<T, D, 8>(d, q, k, v, z, n, i, out, stats);
        i += 8;
    }
    while rb == 4 && i + 4 <= n {
        forward_rows::<T, D, 4>(d, q, k, v, z, n, i, out, stats);
        i += 4;
    }
    while rb == 2 && i + 2 <= n {
        forward_rows::<T, D, 2>(d, q, k, v, z, n, i, out, stats);
        i += 2;
    }
    while i < n {
        forward_rows::<T, D, 1>(d, q, k, v, z, n, i, out, stats);
        i += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_head<T: Real, const D: usize>(
    d: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    z: T,
    n: usize,
    out: &[T],
    stats: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) -> T {
    let mut dz = T::zero();
    let mut i = 0;
    let rb = bwd_rows_per_block(D);
    while rb == 8 && i + 8 <= n {
        dz += backward_rows::<T, D, 8>(d, q, k, v, z, n, i, out, stats, dout, dq, dk, dv);
        i += 8;
    }
    while rb == 4 && i + 4 <= n {
        dz += backward_rows::<T, D, 4>(d, q, k, v, z, n, i, out, stats, dout, dq, dk, dv);
        i += 4;
    }
    while rb == 2 && i + 2 <= n {
        dz += backward_rows::<T, D, 2>(d, q, k, v, z, n, i, out, stats, dout, dq, dk, dv);
        i += 2;
    }
    while i < n {
        dz += backward_rows::<T, D, 1>(d, q, k, v, z, n, i, out, stats, dout, dq, dk, dv);
        i += 1;
    }
    dz
}

/// Calls `$f::<T, D>(d, ..)` with `D == d` for the common head sizes and
/// `D == MAX_HEAD_DIM` otherwise.
macro_rules! dispatch_dim {
    ($d:expr, $f:ident, ($($arg:expr),* $(,)?)) => {
        match $d {
            1 => $f::<T, 1>(1, $($arg),*),
            2 => $f::<T, 2>(2, $($arg),*),
            4 => $f::<T, 4>(4, $($arg),*),
            8 => $f::<T, 8>(8, $($arg),*),
            16 => $f::<T, 16>(16, $($arg),*),
            32 => $f::<T, 32>(32, $($arg),*),
            d => $f::<T, MAX_HEAD_DIM>(d, $($arg),*),
        }
    };
}

/// Per head: `softmax(Q K^T * zeta_h) V`. Returns the output and the per-row
/// statistics `(max, 1/sum)` as `[B, heads, N, 2]`, from which the backward
/// pass recomputes the attention weights instead of storing `N x N` maps.
pub fn cross_attention_forward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    zeta: &[T],
) -> (Vec<T>, Vec<T>) {
    let (n, d) = (g.tokens, g.head_dim());
    assert!(
        d <= MAX_HEAD_DIM,
        "head dimension {d} exceeds {MAX_HEAD_DIM}"
    );
    let mut out = vec![T::zero(); q.len()];
    let mut stats = vec![T::zero(); g.batch * g.heads * n * 2];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let base = g.block(b, h);
            let (qb, kb, vb) = (
                &q[base..][..d * n],
                &k[base..][..d * n],
                &v[base..][..d * n],
            );
            let ob = &mut out[base..][..d * n];
            let sb = &mut stats[(b * g.heads + h) * n * 2..][..2 * n];
            dispatch_dim!(d, forward_head, (qb, kb, vb, zeta[h], n, ob, sb));
        }
    }
    (out, stats)
}

/// Gradients of [`cross_attention_forward`] given its output and row
/// statistics: `(dq, dk, dv, dzeta)`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_backward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    zeta: &[T],
    out: &[T],
    stats: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (n, d) = (g.tokens, g.head_dim());
    assert!(
        d <= MAX_HEAD_DIM,
        "head dimension {d} exceeds {MAX_HEAD_DIM}"
    );
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dzeta = vec![T::zero(); g.heads];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let base = g.block(b, h);
            let (qb, kb, vb) = (
                &q[base..][..d * n],
                &k[base..][..d * n],
                &v[base..][..d * n],
            );
            let (ob, gb) = (&out[base..][..d * n], &dout[base..][..d * n]);
            let sb = &stats[(b * g.heads + h) * n * 2..][..2 * n];
            let (dqb, dkb, dvb) = (
                &mut dq[base..][..d * n],
                &mut dk[base..][..d * n],
                &mut dv[base..][..d * n],
            );
            dzeta[h] += dispatch_dim!(
                d,
                backward_head,
                (qb, kb, vb, zeta[h], n, ob, sb, gb, dqb, dkb, dvb)
            );
        }
    }
    (dq, dk, dv, dzeta)
}

/// Nearest-neighbour 2x upsampling of `[B*C, H, W]` planes.
pub fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..][..w];
            for (xo, o) in dst[y * w2..][..w2].iter_mut().enumerate() {
                *o = srow[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..][..h2 * w2];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for xo in 0..w {
                let r0 = &src[(2 * y) * w2 + 2 * xo..];
                let r1 = &src[(2 * y + 1) * w2 + 2 * xo..];
                dst[y * w + xo] = r0[0] + r0[1] + r1[0] + r1[1];
            }
        }
    }
    dx
}

/// Copies the top-left `(min(h,h2), min(w,w2))` window of every plane into
/// planes of size `h2 x w2`, zero elsewhere. Serves both zero-padding and
/// cropping.
pub fn resize_planes<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h2 * w2];
    let (hc, wc) = (h.min(h2), w.min(w2));
    for p in 0..planes {
        for y in 0..hc {
            out[(p * h2 + y) * w2..][..wc].copy_from_slice(&x[(p * h + y) * w..][..wc]);
        }
    }
    out
}

/// Per-position normalization across channels of `[B, C, N]`; returns the
/// output and the per-position reciprocal standard deviations.
pub fn channel_norm_forward<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    n: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); b * n];
    let cn = T::of(c as f64);
    for bi in 0..b {
        let xb = &x[bi * c * n..][..c * n];
        for i in 0..n {
            let mut mean = T::zero();
            for ch in 0..c {
                mean += xb[ch * n + i];
            }
            mean /= cn;
            let mut var = T::zero();
            for ch in 0..c {
                let dlt = xb[ch * n + i] - mean;
                var += dlt * dlt;
            }
            let r = T::one() / (var / cn + eps).sqrt();
            rstd[bi * n + i] = r;
            for ch in 0..c {
                out[bi * c * n + ch * n + i] = (xb[ch * n + i] - mean) * r;
            }
        }
    }
    (out, rstd)
}

pub fn channel_norm_backward<T: Real>(
    y: &[T],
    rstd: &[T],
    dy: &[T],
    b: usize,
    c: usize,
    n: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let cn = T::of(c as f64);
    for bi in 0..b {
        let off = bi * c * n;
        for i in 0..n {
            let mut mg = T::zero();
            let mut mgy = T::zero();
            for ch in 0..c {
                let j = off + ch * n + i;
                mg += dy[j];
                mgy += dy[j] * y[j];
            }
            mg /= cn;
            mgy /= cn;
            let r = rstd[bi * n + i];
            for ch in 0..c {
                let j = off + ch * n + i;
                dx[j] = r * (dy[j] - mg - y[j] * mgy);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_in_bounds_outputs() {
        for &(out, inp, s, p, k) in &[
            (5, 5, 1, 1, 0),
            (5, 5, 1, 1, 2),
            (3, 6, 2, 1, 0),
            (3, 6, 2, 1, 3),
            (4, 8, 2, 1, 3),
        ] {
            let (lo, hi) = valid_range(out, inp, s, p, k);
            for o in 0..out {
                let i = (o * s + k) as isize - p as isize;
                let ok = i >= 0 && (i as usize) < inp;
                assert_eq!(
                    ok,
                    o >= lo && o < hi,
                    "out={out} inp={inp} s={s} p={p} k={k} o={o}"
                );
            }
        }
    }

    #[test]
    fn dot_and_sum_handle_remainders() {
        let a: Vec<f64> = (0..37).map(|i| i as f64).collect();
        let ones = vec![1.0; 37];
        assert_eq!(dot(&a, &ones), 666.0);
        assert_eq!(sum(&a), 666.0);
        assert_eq!(max(&a), 36.0);
    }
}
