//! Dense kernels used by the backbone: strided GEMM, layer norm, GELU.

/// Read-only strided view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Plain row-major `rows x cols` matrix starting at `offset`.
    pub fn mat(data: &'a [f32], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a [f32], offset: usize, rs: usize) -> Self {
        Self {
            data,
            offset,
            rs,
            cs: 1,
        }
    }

    /// The same view read as its transpose.
    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Mutable strided view.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn mat(data: &'a mut [f32], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn strided(data: &'a mut [f32], offset: usize, rs: usize) -> Self {
        Self {
            data,
            offset,
            rs,
            cs: 1,
        }
    }
}

/// `c = alpha * a @ b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: View<'_>,
    b: View<'_>,
    beta: f32,
    c: ViewMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "output view out of bounds");
    // SAFETY: every element addressed by the three views was bounds-checked
    // above, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `y = x @ w + bias` for row-major `x: rows x inp`, `w: inp x out`.
pub(crate) fn linear(x: &[f32], rows: usize, inp: usize, w: &[f32], bias: &[f32], out: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(
        rows,
        inp,
        out,
        1.0,
        View::mat(x, 0, inp),
        View::mat(w, 0, out),
        1.0,
        ViewMut::mat(&mut y, 0, out),
    );
    y
}

/// Backward of [`linear`]: accumulates `dw`, `dbias` and returns `dx`.
pub(crate) fn linear_backward(
    x: &[f32],
    rows: usize,
    inp: usize,
    w: &[f32],
    dy: &[f32],
    out: usize,
    dw: &mut [f32],
    dbias: &mut [f32],
) -> Vec<f32> {
    for row in dy.chunks_exact(out) {
        for (db, g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    gemm(
        inp,
        rows,
        out,
        1.0,
        View::mat(x, 0, inp).t(),
        View::mat(dy, 0, out),
        1.0,
        ViewMut::mat(dw, 0, out),
    );
    let mut dx = vec![0.0f32; rows * inp];
    gemm(
        rows,
        out,
        inp,
        1.0,
        View::mat(dy, 0, out),
        View::mat(w, 0, out).t(),
        0.0,
        ViewMut::mat(&mut dx, 0, inp),
    );
    dx
}

pub(crate) const LN_EPS: f32 = 1e-5;

pub(crate) struct LnCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layer_norm(x: &[f32], dim: usize, gamma: &[f32], beta: &[f32]) -> (Vec<f32>, LnCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f32>() / dim as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / dim as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gamma[i] + beta[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    dy: &[f32],
    dim: usize,
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dxhat = vec![0.0f32; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0f32;
        let mut mean_dx = 0.0f32;
        for i in 0..dim {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            dxhat[i] = g[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= dim as f32;
        mean_dx /= dim as f32;
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[r * dim + i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_C: f32 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place numerically stable softmax over each row of length `n`.
pub(crate) fn softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::mat(&a, 0, k), View::mat(&b, 0, n), 0.0, ViewMut::mat(&mut c, 0, n));
        let expected = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-5);
        }
        // (a^T)^T b through a transposed copy of a
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::mat(&at, 0, m).t(), View::mat(&b, 0, n), 0.0, ViewMut::mat(&mut c2, 0, n));
        assert_eq!(c, c2);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let dim = 6;
        let x: Vec<f32> = (0..2 * dim).map(|i| (i as f32 * 0.7).sin()).collect();
        let gamma: Vec<f32> = (0..dim).map(|i| 1.0 + 0.1 * i as f32).collect();
        let beta = vec![0.05; dim];
        let w: Vec<f32> = (0..2 * dim).map(|i| (i as f32 * 0.3).cos()).collect();
        let loss = |x: &[f32]| -> f32 {
            let (y, _) = layer_norm(x, dim, &gamma, &beta);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, dim, &gamma, &beta);
        let (mut dg, mut db) = (vec![0.0; dim], vec![0.0; dim]);
        let dx = layer_norm_backward(&cache, &w, dim, &gamma, &mut dg, &mut db);
        let h = 1e-2;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 2e-3, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for i in -20..20 {
            let x = i as f32 * 0.25;
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3);
        }
    }
}
