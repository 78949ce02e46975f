//! Dense kernels for the toy model. Matrices are row-major unless a stride
//! argument says otherwise.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    gemm_into(m, k, n, 1.0, a, b, beta, c, n);
}

/// `c = alpha * a * b + beta * c` where rows of `c` are `c_stride` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_stride: usize,
) {
    assert!(c_stride >= n, "output rows overlap");
    let c_fits = m == 0 || n == 0 || (m - 1) * c_stride + n <= c.len();
    assert!(a.fits(m, k) && b.fits(k, n) && c_fits, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three operands were checked above and `c` does
    // not alias `a` or `b` (it is a unique borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            c_stride as isize,
            1,
        );
    }
}

/// `y[rows, out] = x[rows, inp] * w[inp, out] + bias`.
pub(crate) fn linear(x: &[f64], w: View<'_>, bias: &[f64], rows: usize, inp: usize, out: usize, y: &mut [f64]) {
    for row in y.chunks_exact_mut(out).take(rows) {
        row.copy_from_slice(bias);
    }
    gemm(rows, inp, out, View::rows(x, inp), w, 1.0, y);
}

/// Accumulates gradients of [`linear`]: `dw += x^T dy`, `db += sum(dy)`, and
/// writes `dx = dy w^T` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    w: View<'_>,
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    dw: Option<&mut [f64]>,
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    if let Some(dw) = dw {
        gemm(inp, rows, out, View::transposed(x, inp), View::rows(dy, out), 1.0, dw);
    }
    for row in dy.chunks_exact(out).take(rows) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    if let Some(dx) = dx {
        // w^T as an [out, inp] view of the [inp, out] weight
        let wt = View {
            data: w.data,
            row_stride: w.col_stride,
            col_stride: w.row_stride,
        };
        gemm(rows, out, inp, View::rows(dy, out), wt, 0.0, dx);
    }
}

/// Per-row layer normalization. Stores the row mean and reciprocal std.
pub(crate) fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], width: usize, y: &mut [f64], mean: &mut [f64], rstd: &mut [f64]) {
    for (r, (xr, yr)) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)).enumerate() {
        let m = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / width as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..width {
            yr[i] = (xr[i] - m) * s * gain[i] + bias[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward(
    x: &[f64],
    gain: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dy: &[f64],
    width: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = width as f64;
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let (m, s) = (mean[r], rstd[r]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..width {
            let xhat = (xr[i] - m) * s;
            let g = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat;
            dbias[i] += dyr[i];
            sum_g += g;
            sum_gx += g * xhat;
        }
        for i in 0..width {
            let xhat = (xr[i] - m) * s;
            dxr[i] += s * (dyr[i] * gain[i] - sum_g / n - xhat * sum_gx / n);
        }
    }
}

/// Tanh approximation of GELU.
#[cfg(test)]
pub(crate) fn gelu(x: f64) -> f64 {
    gelu_with_tanh(x).0
}

/// GELU and the tanh term its derivative needs.
#[inline]
pub(crate) fn gelu_with_tanh(x: f64) -> (f64, f64) {
    // libm tanh is several times slower than exp and dominated the forward pass
    let t = 1.0 - 2.0 / ((2.0 * GELU_K * (x + GELU_C * x * x * x)).exp() + 1.0);
    (0.5 * x * (1.0 + t), t)
}

#[cfg(test)]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_with_tanh(x).1)
}

#[inline]
pub(crate) fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place softmax of one row, returning `log(sum(exp(row - max)))` + max.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    max + total.ln()
}
