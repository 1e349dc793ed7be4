//! Raw forward/backward loops. Shapes are validated by the caller.

/// Geometry of a same-padded, stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// For kernel offset `k`, the output index range that reads in-bounds
    /// input, and the signed input shift.
    fn span(&self, k: usize, extent: usize) -> (usize, usize, isize) {
        let shift = k as isize - (self.kernel / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (extent as isize - shift).min(extent as isize).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Unfolds one sample into a `(in_ch·k²) × (H·W)` patch matrix, zero
/// where the kernel overhangs the border.
fn im2col(d: &ConvDims, x: &[f64], col: &mut [f64]) {
    let plane = d.plane();
    for ci in 0..d.in_ch {
        let xs = &x[ci * plane..][..plane];
        for ky in 0..d.kernel {
            let (y0, y1, sy) = d.span(ky, d.height);
            for kx in 0..d.kernel {
                let (x0, x1, sx) = d.span(kx, d.width);
                let row = (ci * d.kernel + ky) * d.kernel + kx;
                let dst = &mut col[row * plane..][..plane];
                dst[..y0 * d.width].fill(0.0);
                dst[y1 * d.width..].fill(0.0);
                for y in y0..y1 {
                    let src = ((y as isize + sy) as usize * d.width) as isize + sx;
                    let lo = (src + x0 as isize) as usize;
                    let out_row = &mut dst[y * d.width..][..d.width];
                    out_row[..x0].fill(0.0);
                    out_row[x1..].fill(0.0);
                    out_row[x0..x1].copy_from_slice(&xs[lo..lo + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im(d: &ConvDims, col: &[f64], x: &mut [f64]) {
    let plane = d.plane();
    for ci in 0..d.in_ch {
        let xs = &mut x[ci * plane..][..plane];
        for ky in 0..d.kernel {
            let (y0, y1, sy) = d.span(ky, d.height);
            for kx in 0..d.kernel {
                let (x0, x1, sx) = d.span(kx, d.width);
                let row = (ci * d.kernel + ky) * d.kernel + kx;
                let src_row = &col[row * plane..][..plane];
                for y in y0..y1 {
                    let src = ((y as isize + sy) as usize * d.width) as isize + sx;
                    let lo = (src + x0 as isize) as usize;
                    let seg = &src_row[y * d.width + x0..y * d.width + x1];
                    for (dst, v) in xs[lo..lo + (x1 - x0)].iter_mut().zip(seg) {
                        *dst += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    d: ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane = d.plane();
    let rows = d.in_ch * d.kernel * d.kernel;
    let mut col = vec![0.0; rows * plane];
    for b in 0..d.batch {
        im2col(&d, &input[b * d.in_ch * plane..][..d.in_ch * plane], &mut col);
        let o = &mut out[b * d.out_ch * plane..][..d.out_ch * plane];
        for (co, chunk) in o.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias.map_or(0.0, |bias| bias[co]));
        }
        matmul_acc(weight, &col, d.out_ch, rows, plane, o);
    }
}

/// Accumulates input and/or weight/bias gradients of a convolution.
pub(crate) fn conv2d_backward(
    d: ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let plane = d.plane();
    let rows = d.in_ch * d.kernel * d.kernel;
    let mut col = vec![0.0; rows * plane];
    for b in 0..d.batch {
        let g = &grad_out[b * d.out_ch * plane..][..d.out_ch * plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, chunk) in g.chunks_exact(plane).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(&d, &input[b * d.in_ch * plane..][..d.in_ch * plane], &mut col);
            matmul_bt_acc(g, &col, d.out_ch, plane, rows, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            col.fill(0.0);
            matmul_at_acc(weight, g, d.out_ch, rows, plane, &mut col);
            col2im(&d, &col, &mut gi[b * d.in_ch * plane..][..d.in_ch * plane]);
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Blocked over 4×8 output tiles held in registers. Each output still sums
/// its `k` products in ascending order.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { matmul_acc_avx2(a, b, m, k, n, out) };
    }
    matmul_acc_portable(a, b, m, k, n, out)
}

/// Same code compiled for wider vectors. No FMA, so rounding is unchanged.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_acc_portable(a, b, m, k, n, out)
}

#[inline(always)]
fn matmul_acc_portable(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const R: usize = 4;
    const C: usize = 8;
    let (m_main, n_main) = (m - m % R, n - n % C);
    for i in (0..m_main).step_by(R) {
        for j in (0..n_main).step_by(C) {
            let mut acc = [[0.0; C]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..][..C]);
            }
            for p in 0..k {
                let bv: &[f64; C] = b[p * n + j..][..C].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..C {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..][..C].copy_from_slice(row);
            }
        }
    }
    // ragged edges
    for i in 0..m {
        let cols = if i < m_main { n_main..n } else { 0..n };
        if cols.is_empty() {
            continue;
        }
        for p in 0..k {
            let av = a[i * k + p];
            for j in cols.clone() {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

/// Dot product with four interleaved partial sums, so the loop vectorizes.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { matmul_bt_acc_avx2(a, b, m, k, n, out) };
    }
    matmul_bt_acc_portable(a, b, m, k, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_bt_acc_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_bt_acc_portable(a, b, m, k, n, out)
}

#[inline(always)]
fn matmul_bt_acc_portable(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    matmul_acc(&at, b, k, m, n, out);
}

/// Non-overlapping `window×window` average pooling over `planes` maps.
pub(crate) fn avg_pool_forward(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    input: &[f64],
    out: &mut [f64],
) {
    let (oh, ow) = (height / window, width / window);
    let scale = 1.0 / (window * window) as f64;
    for p in 0..planes {
        let x = &input[p * height * width..(p + 1) * height * width];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for y in oy * window..(oy + 1) * window {
                    acc += x[y * width + ox * window..y * width + (ox + 1) * window]
                        .iter()
                        .sum::<f64>();
                }
                o[oy * ow + ox] = acc * scale;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (oh, ow) = (height / window, width / window);
    let scale = 1.0 / (window * window) as f64;
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut grad_in[p * height * width..(p + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                gi[y * width + x] += g[(y / window) * ow + x / window] * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_scales_input() {
        let d = ConvDims {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            height: 3,
            width: 3,
            kernel: 1,
        };
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(d, &input, &[2.0], None, &mut out);
        let expected: Vec<f64> = input.iter().map(|v| 2.0 * v).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn box_kernel_sums_padded_neighbourhood() {
        let d = ConvDims {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            height: 3,
            width: 3,
            kernel: 3,
        };
        let input = vec![1.0; 9];
        let mut out = vec![0.0; 9];
        conv2d_forward(d, &input, &[1.0; 9], Some(&[0.5]), &mut out);
        // corners see 4 pixels, edges 6, centre 9
        assert_eq!(out, vec![4.5, 6.5, 4.5, 6.5, 9.5, 6.5, 4.5, 6.5, 4.5]);
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul(&eye, &a, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }
}
