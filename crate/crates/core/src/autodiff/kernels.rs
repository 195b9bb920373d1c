//! Raw numeric kernels on row-major slices. Shape checking happens in the
//! tape; everything here trusts its arguments.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of size `m × k` and `op(b)`
/// of size `k × n`. `a_t` / `b_t` mean the slice stores the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major regions whose lengths are asserted in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `C × H × W` image into a `(C·k·k) × (H·W)` column matrix for a
/// stride-1 convolution with zero padding `k / 2`.
pub fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + ox;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            prow[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// One-axis bilinear tap: lower index, upper index, fraction toward upper,
/// and whether the coordinate was clamped at the border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub clamped: bool,
}

/// Bilinear tap for a continuous pixel coordinate `u` (pixel centres at
/// integers) into an axis of `size` samples, replicating the border.
pub fn tap(u: f64, size: usize) -> Tap {
    let max = (size - 1) as f64;
    let clamped = u < 0.0 || u > max;
    let u = u.clamp(0.0, max);
    let lo = (u.floor() as usize).min(size - 1);
    let hi = (lo + 1).min(size - 1);
    Tap { lo, hi, frac: u - lo as f64, clamped }
}

/// Source coordinate for output pixel centre `p` (normalized) when a source
/// of `size` samples is stretched over `[a, b)`. `None` outside the box.
pub fn warp_coord(p: f64, a: f64, b: f64, size: usize) -> Option<f64> {
    if p < a || p >= b {
        return None;
    }
    Some((p - a) / (b - a) * size as f64 - 0.5)
}

pub fn bilinear(plane: &[f64], w: usize, ty: Tap, tx: Tap) -> f64 {
    let v00 = plane[ty.lo * w + tx.lo];
    let v01 = plane[ty.lo * w + tx.hi];
    let v10 = plane[ty.hi * w + tx.lo];
    let v11 = plane[ty.hi * w + tx.hi];
    (1.0 - ty.frac) * ((1.0 - tx.frac) * v00 + tx.frac * v01) + ty.frac * ((1.0 - tx.frac) * v10 + tx.frac * v11)
}

pub fn bilinear_adjoint(plane: &mut [f64], w: usize, ty: Tap, tx: Tap, g: f64) {
    plane[ty.lo * w + tx.lo] += g * (1.0 - ty.frac) * (1.0 - tx.frac);
    plane[ty.lo * w + tx.hi] += g * (1.0 - ty.frac) * tx.frac;
    plane[ty.hi * w + tx.lo] += g * ty.frac * (1.0 - tx.frac);
    plane[ty.hi * w + tx.hi] += g * ty.frac * tx.frac;
}
