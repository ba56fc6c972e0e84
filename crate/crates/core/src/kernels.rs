//! Dense f64 kernels used by the forward and backward passes.
//!
//! Written so the compiler vectorizes the inner loops: reductions keep
//! eight independent accumulators, updates are plain zipped slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[r] += W[r, :] · x` for a row-major `rows × x.len()` matrix.
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ v` for a row-major `v.len() × out.len()` matrix.
pub fn matvec_t_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), v.len() * cols);
    for (&vr, row) in v.iter().zip(w.chunks_exact(cols)) {
        if vr != 0.0 {
            axpy(vr, row, out);
        }
    }
}

/// `out[:, ..cols] += Wᵀ v` restricted to the leading `out.len()` columns of
/// a row-major matrix with `stride` columns.
pub fn matvec_t_acc_prefix(w: &[f64], stride: usize, v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert!(cols <= stride);
    for (&vr, row) in v.iter().zip(w.chunks_exact(stride)) {
        if vr != 0.0 {
            axpy(vr, &row[..cols], out);
        }
    }
}

/// `G += Σ_t d_t ⊗ x_t` where `d` is `steps × rows` row-major and `xs[t]` has
/// `cols` entries. Each gradient row stays hot while the steps stream past.
pub fn outer_acc_batched(d: &[f64], rows: usize, xs: &[&[f64]], g: &mut [f64]) {
    let cols = g.len() / rows;
    debug_assert_eq!(d.len(), rows * xs.len());
    for (r, grow) in g.chunks_exact_mut(cols).enumerate() {
        for (t, x) in xs.iter().enumerate() {
            let dv = d[t * rows + r];
            if dv != 0.0 {
                axpy(dv, x, grow);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn dot_matches_naive() {
        for n in [0, 1, 7, 8, 9, 131, 256] {
            let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
            assert!((dot(&a, &b) - naive_dot(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_matvec() {
        // W = [[1, 2, 3], [4, 5, 6]]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 3];
        matvec_t_acc(&w, &[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut pre = vec![0.0; 2];
        matvec_t_acc_prefix(&w, 3, &[1.0, 2.0], &mut pre);
        assert_eq!(pre, vec![9.0, 12.0]);
        let mut y = vec![0.0; 2];
        matvec_acc(&w, &[1.0, 0.0, 1.0], &mut y);
        assert_eq!(y, vec![4.0, 10.0]);
    }

    #[test]
    fn batched_outer_product() {
        let d = [1.0, 2.0, 3.0, 4.0]; // two steps, two rows
        let x0 = [1.0, 0.0, 1.0];
        let x1 = [0.0, 1.0, 0.0];
        let mut g = vec![0.0; 6];
        outer_acc_batched(&d, 2, &[&x0, &x1], &mut g);
        assert_eq!(g, vec![1.0, 3.0, 1.0, 2.0, 4.0, 2.0]);
    }

    #[test]
    fn softmax_by_hand() {
        let p = softmax(&[3.0f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        let p = softmax(&[1000.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
