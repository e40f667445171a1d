//! Numeric kernels shared by the forward and backward passes.

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `c += a · b` with explicit element strides `(row, col)` for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every slice covers the extents implied by the dimensions and
    // strides passed alongside it; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Mean and reciprocal standard deviation of one row.
pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, noticeably cheaper than the libm call.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn masked_softmax_row(src: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = src
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &x), &m) in out.iter_mut().zip(src).zip(mask) {
        *o = if m { (x - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_accumulates_transposed_operands() {
        // a: 2x3, bᵀ stored as 2x3, c = a · b
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [10.0; 4];
        gemm(2, 3, 2, &a, (3, 1), &bt, (1, 3), &mut c, 2);
        assert_eq!(c, [14.0, 12.0, 20.0, 15.0]);
    }

    #[test]
    fn tanh_agrees_with_libm() {
        for &u in &[-30.0, -2.0, -1e-9, 0.0, 1e-3, 0.5, 19.0, 800.0] {
            assert!((tanh(u) - u.tanh()).abs() <= 4.0 * f64::EPSILON, "u={u}");
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
