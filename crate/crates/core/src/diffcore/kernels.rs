//! Dense loops behind the graph primitives. All arithmetic is `f64`.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .map(|(a, b)| a * b)
        .sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `da[m×k] += dc[m×n] · bᵀ`
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(dc_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += aip * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Range of output columns `o` for which `o*stride + k - pad` lands inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // need o*stride + k >= pad and o*stride + k - pad < len
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_excl = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// Direct 2-D convolution. `weight` is `c_out × c_in × kh × kw`.
pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let in_plane = g.h_in * g.w_in;
    let out_plane = g.h_out * g.w_out;
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0 {
        for b in 0..g.n {
            matmul_acc(
                weight,
                &input[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane],
                &mut out[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane],
                g.c_out,
                g.c_in,
                in_plane,
            );
        }
        return;
    }
    for b in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (b * g.c_out + co) * out_plane;
            for ci in 0..g.c_in {
                let i_base = (b * g.c_in + ci) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h_in, g.h_out);
                    for kx in 0..g.kw {
                        let w = weight[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w_in, g.w_out);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = o_base + oy * g.w_out;
                            let irow = i_base + iy * g.w_in;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                out[orow + ox] += w * input[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. Either output slice may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
) {
    let in_plane = g.h_in * g.w_in;
    let out_plane = g.h_out * g.w_out;
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0 {
        for b in 0..g.n {
            let x = &input[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane];
            let dy = &dout[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane];
            if let Some(dx) = dinput.as_deref_mut() {
                // dx[ci×P] += Wᵀ[ci×co] · dy[co×P]
                matmul_grad_b(
                    weight,
                    dy,
                    &mut dx[b * g.c_in * in_plane..(b + 1) * g.c_in * in_plane],
                    g.c_out,
                    g.c_in,
                    in_plane,
                );
            }
            if let Some(dw) = dweight.as_deref_mut() {
                // dW[co×ci] += dy[co×P] · xᵀ
                matmul_grad_a(dy, x, dw, g.c_out, g.c_in, in_plane);
            }
        }
        return;
    }
    for b in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (b * g.c_out + co) * out_plane;
            for ci in 0..g.c_in {
                let i_base = (b * g.c_in + ci) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h_in, g.h_out);
                    for kx in 0..g.kw {
                        let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        let w = weight[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w_in, g.w_out);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = o_base + oy * g.w_out;
                            let irow = i_base + iy * g.w_in;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                let gy = dout[orow + ox];
                                acc += gy * input[irow + ix];
                                if let Some(dx) = dinput.as_deref_mut() {
                                    dx[irow + ix] += w * gy;
                                }
                            }
                        }
                        if let Some(dw) = dweight.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution. `weight` is `c_in × c_out × kh × kw`; `g.h_in`
/// refers to the (small) input and `g.h_out` to the upsampled output.
pub(crate) fn conv_transpose2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    out: &mut [f64],
) {
    let in_plane = g.h_in * g.w_in;
    let out_plane = g.h_out * g.w_out;
    for b in 0..g.n {
        for ci in 0..g.c_in {
            let i_base = (b * g.c_in + ci) * in_plane;
            for co in 0..g.c_out {
                let o_base = (b * g.c_out + co) * out_plane;
                for ky in 0..g.kh {
                    // the scatter target oy = iy*stride + ky - pad mirrors the conv gather
                    let (iy_lo, iy_hi) = valid_range(ky, g.padding, g.stride, g.h_out, g.h_in);
                    for kx in 0..g.kw {
                        let w = weight[((ci * g.c_out + co) * g.kh + ky) * g.kw + kx];
                        let (ix_lo, ix_hi) = valid_range(kx, g.padding, g.stride, g.w_out, g.w_in);
                        for iy in iy_lo..iy_hi {
                            let oy = iy * g.stride + ky - g.padding;
                            let orow = o_base + oy * g.w_out;
                            let irow = i_base + iy * g.w_in;
                            for ix in ix_lo..ix_hi {
                                let ox = ix * g.stride + kx - g.padding;
                                out[orow + ox] += w * input[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
) {
    let in_plane = g.h_in * g.w_in;
    let out_plane = g.h_out * g.w_out;
    for b in 0..g.n {
        for ci in 0..g.c_in {
            let i_base = (b * g.c_in + ci) * in_plane;
            for co in 0..g.c_out {
                let o_base = (b * g.c_out + co) * out_plane;
                for ky in 0..g.kh {
                    let (iy_lo, iy_hi) = valid_range(ky, g.padding, g.stride, g.h_out, g.h_in);
                    for kx in 0..g.kw {
                        let widx = ((ci * g.c_out + co) * g.kh + ky) * g.kw + kx;
                        let w = weight[widx];
                        let (ix_lo, ix_hi) = valid_range(kx, g.padding, g.stride, g.w_out, g.w_in);
                        let mut acc = 0.0;
                        for iy in iy_lo..iy_hi {
                            let oy = iy * g.stride + ky - g.padding;
                            let orow = o_base + oy * g.w_out;
                            let irow = i_base + iy * g.w_in;
                            for ix in ix_lo..ix_hi {
                                let ox = ix * g.stride + kx - g.padding;
                                let gy = dout[orow + ox];
                                acc += gy * input[irow + ix];
                                if let Some(dx) = dinput.as_deref_mut() {
                                    dx[irow + ix] += w * gy;
                                }
                            }
                        }
                        if let Some(dw) = dweight.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}
