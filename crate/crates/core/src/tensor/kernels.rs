//! Raw numeric kernels shared by the tape ops and the plain inference path.
//!
//! Keeping a single implementation of each kernel guarantees that a tape
//! forward and a plain forward of the same network are bit-identical.

pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC: f64 = 0.044_715;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Kernel contributions beyond this many bandwidths are below 1e-14 of the
/// peak and are skipped.
pub(crate) const KDE_CUTOFF: f64 = 8.0;

/// C[m,n] = A[m,k] * B[k,n], row-major, accumulation along k outside the
/// inner loop so the j loop vectorizes.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable softmax along `axis` of an arbitrary-rank tensor.
pub(crate) fn softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

/// Layer norm over the last dimension: rows of length `d`, affine gain/bias.
pub(crate) fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    out
}

/// Tanh-approximation GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Standard normal pdf, the KDE kernel.
pub(crate) fn gaussian_kernel(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Rearranges a [c, s, s] image into a [tokens, c*p*p] patch matrix.
/// Token order is row-major over the patch grid; feature order is
/// (channel, dy, dx). A pure permutation, so the backward is the inverse
/// scatter.
pub(crate) fn patchify(img: &[f64], channels: usize, size: usize, patch: usize) -> Vec<f64> {
    let grid = size / patch;
    let feat = channels * patch * patch;
    let mut out = vec![0.0; grid * grid * feat];
    for py in 0..grid {
        for px in 0..grid {
            let tok = py * grid + px;
            for c in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let f = (c * patch + dy) * patch + dx;
                        let src = (c * size + py * patch + dy) * size + px * patch + dx;
                        out[tok * feat + f] = img[src];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify_acc(
    grad_tokens: &[f64],
    grad_img: &mut [f64],
    channels: usize,
    size: usize,
    patch: usize,
) {
    let grid = size / patch;
    let feat = channels * patch * patch;
    for py in 0..grid {
        for px in 0..grid {
            let tok = py * grid + px;
            for c in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let f = (c * patch + dy) * patch + dx;
                        let dst = (c * size + py * patch + dy) * size + px * patch + dx;
                        grad_img[dst] += grad_tokens[tok * feat + f];
                    }
                }
            }
        }
    }
}

/// Gaussian-KDE density at a single point.
pub(crate) fn kde_at(x: f64, centers: &[f64], h: f64) -> f64 {
    let mut acc = 0.0;
    for &c in centers {
        let u = (x - c) / h;
        if u.abs() <= KDE_CUTOFF {
            acc += gaussian_kernel(u);
        }
    }
    acc / (centers.len() as f64 * h)
}

/// Trapezoid rule over a uniform grid: −∫ f̂ log f̂ dx with 0·log 0 := 0.
/// Returns the entropy and the per-grid-point densities (reused by the
/// backward pass).
pub(crate) fn entropy_forward(
    centers: &[f64],
    h: f64,
    grid_min: f64,
    grid_step: f64,
    grid_len: usize,
) -> (f64, Vec<f64>) {
    let mut density = vec![0.0; grid_len];
    for (g, dst) in density.iter_mut().enumerate() {
        *dst = kde_at(grid_min + g as f64 * grid_step, centers, h);
    }
    let mut acc = 0.0;
    for (g, &f) in density.iter().enumerate() {
        if f > 0.0 {
            let w = if g == 0 || g == grid_len - 1 { 0.5 } else { 1.0 };
            acc += w * f * f.ln();
        }
    }
    (-acc * grid_step, density)
}

/// d(entropy)/d(center_m), with `density` from the matching forward call.
/// The bandwidth and grid are treated as constants.
pub(crate) fn entropy_backward(
    centers: &[f64],
    h: f64,
    grid_min: f64,
    grid_step: f64,
    density: &[f64],
    upstream: f64,
    grad_centers: &mut [f64],
) {
    let m = centers.len() as f64;
    let scale = upstream * grid_step / (m * h * h);
    for (g, &f) in density.iter().enumerate() {
        if f <= 0.0 {
            continue;
        }
        let x = grid_min + g as f64 * grid_step;
        let w = if g == 0 || g == density.len() - 1 { 0.5 } else { 1.0 };
        // d(−w·f·ln f)/df = −w·(ln f + 1); df/dc_m = u·K(u)/(M·h²)
        let coeff = -scale * w * (f.ln() + 1.0);
        for (c, gc) in centers.iter().zip(grad_centers.iter_mut()) {
            let u = (x - c) / h;
            if u.abs() <= KDE_CUTOFF {
                *gc += coeff * u * gaussian_kernel(u);
            }
        }
    }
}
