//! Row-major dense products on top of `matrixmultiply::dgemm`.

/// `out[n, o] = x[n, i] * w[o, i]^T + bias[o]`.
pub(crate) fn linear(x: &[f64], n: usize, inp: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let out = bias.len();
    debug_assert_eq!(x.len(), n * inp);
    debug_assert_eq!(w.len(), out * inp);
    let mut c = Vec::with_capacity(n * out);
    for _ in 0..n {
        c.extend_from_slice(bias);
    }
    if n == 0 || out == 0 || inp == 0 {
        return c;
    }
    // SAFETY: every operand slice holds exactly the element count implied by
    // its dimensions and strides, and `c` is not aliased.
    unsafe {
        matrixmultiply::dgemm(
            n,
            inp,
            out,
            1.0,
            x.as_ptr(),
            inp as isize,
            1,
            w.as_ptr(),
            1,
            inp as isize,
            1.0,
            c.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    c
}

/// `dw[o, i] += dz[n, o]^T * x[n, i]`.
pub(crate) fn accumulate_weight_grad(
    dz: &[f64],
    x: &[f64],
    n: usize,
    out: usize,
    inp: usize,
    dw: &mut [f64],
) {
    debug_assert_eq!(dz.len(), n * out);
    debug_assert_eq!(x.len(), n * inp);
    debug_assert_eq!(dw.len(), out * inp);
    if n == 0 || out == 0 || inp == 0 {
        return;
    }
    // SAFETY: see `linear`.
    unsafe {
        matrixmultiply::dgemm(
            out,
            n,
            inp,
            1.0,
            dz.as_ptr(),
            1,
            out as isize,
            x.as_ptr(),
            inp as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
}

/// `dx[n, i] = dz[n, o] * w[o, i]`.
pub(crate) fn input_grad(dz: &[f64], w: &[f64], n: usize, out: usize, inp: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * inp];
    if n == 0 || out == 0 || inp == 0 {
        return dx;
    }
    // SAFETY: see `linear`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            out,
            inp,
            1.0,
            dz.as_ptr(),
            out as isize,
            1,
            w.as_ptr(),
            inp as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
    dx
}

/// Column sums of an `n x c` matrix added into `acc`.
pub(crate) fn accumulate_column_sums(m: &[f64], c: usize, acc: &mut [f64]) {
    for row in m.chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}
