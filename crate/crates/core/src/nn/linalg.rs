//! Thin safe wrappers over `matrixmultiply` for the row-major layouts used by
//! the dense layers.

/// `y[batch x out] = x[batch x in] * w[out x in]^T` (overwrites `y`).
pub(crate) fn matmul_xwt(x: &[f64], w: &[f64], y: &mut [f64], batch: usize, fan_in: usize, fan_out: usize) {
    assert_eq!(x.len(), batch * fan_in);
    assert_eq!(w.len(), fan_out * fan_in);
    assert_eq!(y.len(), batch * fan_out);
    if batch == 0 || fan_out == 0 {
        return;
    }
    // SAFETY: the asserted slice lengths bound every index reached by the strides below.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            x.as_ptr(),
            fan_in as isize,
            1,
            w.as_ptr(),
            1,
            fan_in as isize,
            0.0,
            y.as_mut_ptr(),
            fan_out as isize,
            1,
        );
    }
}

/// `dw[out x in] += dz[batch x out]^T * x[batch x in]`.
pub(crate) fn accumulate_dzt_x(dz: &[f64], x: &[f64], dw: &mut [f64], batch: usize, fan_in: usize, fan_out: usize) {
    assert_eq!(dz.len(), batch * fan_out);
    assert_eq!(x.len(), batch * fan_in);
    assert_eq!(dw.len(), fan_out * fan_in);
    if batch == 0 {
        return;
    }
    // SAFETY: see `matmul_xwt`.
    unsafe {
        matrixmultiply::dgemm(
            fan_out,
            batch,
            fan_in,
            1.0,
            dz.as_ptr(),
            1,
            fan_out as isize,
            x.as_ptr(),
            fan_in as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            fan_in as isize,
            1,
        );
    }
}

/// `dx[batch x in] = dz[batch x out] * w[out x in]` (overwrites `dx`).
pub(crate) fn matmul_dz_w(dz: &[f64], w: &[f64], dx: &mut [f64], batch: usize, fan_in: usize, fan_out: usize) {
    assert_eq!(dz.len(), batch * fan_out);
    assert_eq!(w.len(), fan_out * fan_in);
    assert_eq!(dx.len(), batch * fan_in);
    if batch == 0 || fan_in == 0 {
        return;
    }
    // SAFETY: see `matmul_xwt`.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            fan_out,
            fan_in,
            1.0,
            dz.as_ptr(),
            fan_out as isize,
            1,
            w.as_ptr(),
            fan_in as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            fan_in as isize,
            1,
        );
    }
}
