//! Safe wrappers around the `matrixmultiply` GEMM kernels.

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check(
    m: usize,
    k: usize,
    n: usize,
    a: usize,
    a_strides: (isize, isize),
    b: usize,
    b_strides: (isize, isize),
    c: usize,
    c_strides: (isize, isize),
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!(max_offset(m, k, a_strides) < a, "gemm: A out of bounds");
    assert!(max_offset(k, n, b_strides) < b, "gemm: B out of bounds");
    assert!(max_offset(m, n, c_strides) < c, "gemm: C out of bounds");
}

#[allow(clippy::too_many_arguments)]
pub(super) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
    c_strides: (isize, isize),
) {
    check(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
    // SAFETY: every index touched by the kernel was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    check(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        )
    }
}
