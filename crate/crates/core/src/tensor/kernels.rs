//! Row-major numeric kernels shared by the tape and the cached inference path.

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Dot product with four running sums.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`, accumulated into `out[k,n]`.
pub fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax. `allowed`, when present, has the same layout as `x`;
/// disallowed entries get probability exactly zero and do not take part in
/// the max or the normalizer.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let ys = &mut out[r * cols..(r + 1) * cols];
        let ok = |c: usize| allowed.map_or(true, |m| m[r * cols + c]);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in xs.iter().enumerate() {
            if ok(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            // fully masked row: leave zeros, caller reports non-finite if it matters
            continue;
        }
        let mut sum = 0.0;
        for (c, (&v, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
            if ok(c) {
                *y = (v - max).exp();
                sum += *y;
            }
        }
        for y in ys.iter_mut() {
            *y /= sum;
        }
    }
    out
}

/// Log-softmax of a single row.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

/// Normalized rows (before the affine transform) plus per-row inverse std.
pub fn layernorm_normalize(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mean = xs.iter().sum::<f64>() / cols as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        rstd[r] = inv;
        for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
            *h = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (mut y, _) = layernorm_normalize(x, rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = &mut y[r * cols + c];
            *v = *v * gamma[c] + beta[c];
        }
    }
    y
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `x[m,n] + bias[n]` broadcast over rows, in place.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
