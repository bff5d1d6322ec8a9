//! Windowed SSIM over 3x3 uniform windows with reflection padding, plus its
//! adjoint with respect to the first argument.

use crate::error::{Error, Result};
use crate::geometry::{Image, ScalarField};

pub const DEFAULT_C1: f64 = 0.01 * 0.01;
pub const DEFAULT_C2: f64 = 0.03 * 0.03;

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = k.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflected `[k - 1, k, k + 1]` for every `k` in `0..n`.
fn neighbour_table(n: usize) -> Vec<[usize; 3]> {
    (0..n as isize)
        .map(|k| [reflect(k - 1, n), k as usize, reflect(k + 1, n)])
        .collect()
}

/// 3x3 window sums with reflected borders, computed separably.
fn box_sum(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let rows = neighbour_table(h);
    let mut tmp = vec![0.0; h * w];
    for (src, dst) in x.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        if w == 1 {
            dst[0] = 3.0 * src[0];
            continue;
        }
        dst[0] = src[0] + 2.0 * src[1];
        dst[w - 1] = src[w - 1] + 2.0 * src[w - 2];
        for (d, win) in dst[1..w - 1].iter_mut().zip(src.windows(3)) {
            *d = win[0] + win[1] + win[2];
        }
    }
    let mut out = vec![0.0; h * w];
    for (r, dst) in rows.iter().zip(out.chunks_exact_mut(w)) {
        let a = &tmp[r[0] * w..(r[0] + 1) * w];
        let b = &tmp[r[1] * w..(r[1] + 1) * w];
        let c = &tmp[r[2] * w..(r[2] + 1) * w];
        for (((d, a), b), c) in dst.iter_mut().zip(a).zip(b).zip(c) {
            *d = a + b + c;
        }
    }
    out
}

/// Adjoint of [`box_sum`]: scatters every value onto its window.
fn box_sum_transpose(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (rows, cols) = (neighbour_table(h), neighbour_table(w));
    let mut tmp = vec![0.0; h * w];
    for (i, r) in rows.iter().enumerate() {
        for j in 0..w {
            let v = x[i * w + j];
            for &rr in r {
                tmp[rr * w + j] += v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for (j, c) in cols.iter().enumerate() {
            let v = tmp[i * w + j];
            for &cc in c {
                out[i * w + cc] += v;
            }
        }
    }
    out
}

/// Window means `E[x], E[y], E[x²], E[y²], E[xy]`.
struct WindowMoments {
    ex: Vec<f64>,
    ey: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

impl WindowMoments {
    fn new(x: &[f64], y: &[f64], h: usize, w: usize) -> Self {
        let mean = |v: Vec<f64>| -> Vec<f64> {
            let mut m = box_sum(&v, h, w);
            m.iter_mut().for_each(|s| *s /= 9.0);
            m
        };
        WindowMoments {
            ex: mean(x.to_vec()),
            ey: mean(y.to_vec()),
            exx: mean(x.iter().map(|a| a * a).collect()),
            eyy: mean(y.iter().map(|b| b * b).collect()),
            exy: mean(x.iter().zip(y).map(|(a, b)| a * b).collect()),
        }
    }

    /// The four factors of `SSIM = A·B / (C·D)` at pixel `p`.
    #[inline]
    fn factors(&self, p: usize, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
        let (mx, my) = (self.ex[p], self.ey[p]);
        let sxx = self.exx[p] - mx * mx;
        let syy = self.eyy[p] - my * my;
        let sxy = self.exy[p] - mx * my;
        (
            2.0 * mx * my + c1,
            2.0 * sxy + c2,
            mx * mx + my * my + c1,
            sxx + syy + c2,
        )
    }
}

/// Per-pixel SSIM between two single-channel planes of shape `h x w`.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, c1: f64, c2: f64) -> Vec<f64> {
    debug_assert_eq!(x.len(), h * w);
    debug_assert_eq!(y.len(), h * w);
    let m = WindowMoments::new(x, y, h, w);
    (0..h * w)
        .map(|p| {
            let (a, b, c, d) = m.factors(p, c1, c2);
            a * b / (c * d)
        })
        .collect()
}

/// Accumulates `∂(Σ_q upstream[q]·SSIM(x, y)[q]) / ∂x` into `grad_x`.
pub(crate) fn ssim_plane_backward(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    c1: f64,
    c2: f64,
    upstream: &[f64],
    grad_x: &mut [f64],
) {
    let m = WindowMoments::new(x, y, h, w);
    let n = h * w;
    // Upstream-weighted partials with respect to E[x], E[x²] and E[xy].
    let mut g_ex = vec![0.0; n];
    let mut g_exx = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    for p in 0..n {
        let g = upstream[p];
        if g == 0.0 {
            continue;
        }
        let (a, b, c, d) = m.factors(p, c1, c2);
        let (mx, my) = (m.ex[p], m.ey[p]);
        let cd = c * d;
        let da = b / cd;
        let db = a / cd;
        let dc = -a * b / (c * cd);
        let dd = -a * b / (cd * d);
        g_ex[p] = g * (da * 2.0 * my + dc * 2.0 * mx - db * 2.0 * my - dd * 2.0 * mx) / 9.0;
        g_exx[p] = g * dd / 9.0;
        g_exy[p] = g * 2.0 * db / 9.0;
    }
    let s_ex = box_sum_transpose(&g_ex, h, w);
    let s_exx = box_sum_transpose(&g_exx, h, w);
    let s_exy = box_sum_transpose(&g_exy, h, w);
    for p in 0..n {
        grad_x[p] += s_ex[p] + 2.0 * x[p] * s_exx[p] + y[p] * s_exy[p];
    }
}

/// Channel-averaged SSIM map of two images of identical shape.
pub fn ssim(a: &Image, b: &Image, c1: f64, c2: f64) -> Result<ScalarField> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {}x{}x{} and {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut acc = vec![0.0; h * w];
    for c in 0..ch {
        let map = ssim_plane(&a.channel(c), &b.channel(c), h, w, c1, c2);
        for (s, m) in acc.iter_mut().zip(map) {
            *s += m / ch as f64;
        }
    }
    Ok(ScalarField {
        height: h,
        width: w,
        data: acc,
    })
}
