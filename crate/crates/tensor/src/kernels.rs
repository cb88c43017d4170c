//! Raw numeric kernels shared by forward and backward passes.

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents are derived from the slice shapes by the callers;
    // the debug assertions above and in callers pin the bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `channels × h × w` image into a `(channels·k·k) × (h·w)` matrix
/// for a stride-1 convolution with zero "same" padding.
pub(crate) fn im2col(input: &[f32], channels: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(cols.len(), channels * k * k * hw);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + ki as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f32], channels: usize, h: usize, w: usize, k: usize, out: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[iy as usize * w + s0..iy as usize * w + s0 + (x_hi - x_lo)];
                    dst.iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2 over `planes` planes; odd trailing rows/cols are dropped.
/// Returns the flat input index of each selected maximum (first one wins on ties).
pub(crate) fn maxpool2(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
    argmax
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for y in 0..oh {
            let src = &input[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let dst = &mut out[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
}

pub(crate) fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
