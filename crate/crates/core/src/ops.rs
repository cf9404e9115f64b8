//! Row-major f64 kernels with their adjoints.

use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// `y[rows, out] = x[rows, in] · w[in, out] (+ b)`.
pub fn linear(x: &[f64], rows: usize, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (n_in, n_out) = w.matrix_dims();
    debug_assert_eq!(x.len(), rows * n_in);
    let wd = w.data();
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        if let Some(b) = b {
            yr.copy_from_slice(b.data());
        }
        for (i, &xv) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &wd[i * n_out..(i + 1) * n_out];
            for (acc, &wv) in yr.iter_mut().zip(wr) {
                *acc += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dw += xᵀ dy`, `db += Σ dy` and returns `dx = dy · wᵀ`.
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor<f64>,
    dy: &[f64],
    dw: &mut Tensor<f64>,
    db: Option<&mut Tensor<f64>>,
) -> Vec<f64> {
    let (n_in, n_out) = w.matrix_dims();
    let wd = w.data();
    let mut dx = vec![0.0; rows * n_in];
    {
        let dwd = dw.data_mut();
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            let xr = &x[r * n_in..(r + 1) * n_in];
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for i in 0..n_in {
                let wr = &wd[i * n_out..(i + 1) * n_out];
                let mut s = 0.0;
                for (&g, &wv) in dyr.iter().zip(wr) {
                    s += g * wv;
                }
                dxr[i] = s;
                let xv = xr[i];
                if xv != 0.0 {
                    for (acc, &g) in dwd[i * n_out..(i + 1) * n_out].iter_mut().zip(dyr) {
                        *acc += xv * g;
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        let dbd = db.data_mut();
        for r in 0..rows {
            for (acc, &g) in dbd.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                *acc += g;
            }
        }
    }
    dx
}

/// RMSNorm over each row; returns the output and per-row `1/rms`.
pub fn rmsnorm(x: &[f64], rows: usize, gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for ((o, &xv), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * s * g;
        }
    }
    (y, inv)
}

pub fn rmsnorm_backward(
    x: &[f64],
    rows: usize,
    gain: &[f64],
    inv: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = inv[r];
        let mut dot = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * s;
            dot += gain[i] * dyr[i] * xr[i];
        }
        let k = s * s * s * dot / d as f64;
        for i in 0..d {
            dx[r * d + i] = s * gain[i] * dyr[i] - k * xr[i];
        }
    }
    dx
}

/// Rotary embedding on interleaved pairs of each head; row index is the
/// position. `inverse` applies the transpose rotation (used by backward).
pub fn rope(x: &mut [f64], rows: usize, heads: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for pos in 0..rows {
        for i in 0..half {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let sin = if inverse { -sin } else { sin };
            for h in 0..heads {
                let base = pos * width + h * head_dim + 2 * i;
                let (a, b) = (x[base], x[base + 1]);
                x[base] = a * cos - b * sin;
                x[base + 1] = a * sin + b * cos;
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Softmax in place; returns log-sum-exp of the input.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_inverse_undoes_rotation() {
        let orig: Vec<f64> = (0..3 * 2 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = orig.clone();
        rope(&mut x, 3, 2, 4, false);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope(&mut x, 3, 2, 4, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rmsnorm_of_duplicated_row_is_duplicated() {
        // Values on a 1/8 grid square and sum exactly, so the identity is bitwise.
        let x = [0.5, -1.25, 2.0, 0.125];
        let g = [1.0, 0.5, -2.0, 3.0];
        let (y, _) = rmsnorm(&x, 1, &g);
        let xx: Vec<f64> = x.iter().chain(&x).cloned().collect();
        let gg: Vec<f64> = g.iter().chain(&g).cloned().collect();
        let (yy, _) = rmsnorm(&xx, 1, &gg);
        for i in 0..4 {
            assert_eq!(yy[i].to_bits(), y[i].to_bits());
            assert_eq!(yy[i + 4].to_bits(), y[i].to_bits());
        }
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &v in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((fd - silu_grad(v)).abs() < 1e-8);
        }
    }
}
