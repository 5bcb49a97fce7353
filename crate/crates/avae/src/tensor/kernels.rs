//! Raw numeric kernels behind the tape ops. Convolution and the affine layers
//! lower to GEMM (via im2col for convolution); resampling is hand-rolled.
//! Everything here is single-threaded and runs in deterministic order, which
//! keeps whole training runs bitwise reproducible.

use crate::scalar::Scalar;

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit into the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one image `x` of shape `[c, h, w]` into a `[c*k*k, oh*ow]`
/// row-major matrix. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let span = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[(ci * k * k + ki * k + kj) * span..][..span];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst = &mut row[oy * ow..oy * ow + ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..iy as usize * w + w];
                    if stride == 1 {
                        // ix = ox + kj - padding; copy the in-bounds span,
                        // zero-fill both edges.
                        let off = kj as isize - padding as isize;
                        let lo = (-off).max(0) as usize; // first valid ox
                        let hi = ((w as isize - off).max(0) as usize).min(ow); // one past last
                        dst[..lo.min(ow)].fill(T::zero());
                        if lo < hi {
                            let src_lo = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                        }
                        if hi < ow {
                            dst[hi..].fill(T::zero());
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds a `[c*k*k, oh*ow]` column-gradient matrix back onto one image,
/// adding into `dx` (shape `[c, h, w]`).
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let span = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[(ci * k * k + ki * k + kj) * span..][..span];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..iy as usize * w + w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [b, c, h, w]`, `kernel: [f, c, k, k]` → `[b, f, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = c * k * k;
    let span = oh * ow;
    let mut cols = vec![T::zero(); ckk * span];
    let mut out = vec![T::zero(); b * f * span];
    for bi in 0..b {
        im2col(&x[bi * c * h * w..], c, h, w, k, stride, padding, oh, ow, &mut cols);
        T::gemm(
            f,
            ckk,
            span,
            T::one(),
            kernel,
            ckk as isize,
            1,
            &cols,
            span as isize,
            1,
            T::zero(),
            &mut out[bi * f * span..(bi + 1) * f * span],
            span as isize,
            1,
        );
    }
    out
}

/// Backward of [`conv2d_forward`]. Adds the input gradient into `dx` and the
/// kernel gradient into `dkernel`; either may be absent when that side of the
/// graph does not require gradients. The im2col buffer is recomputed rather
/// than cached so forward nodes stay lightweight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
) {
    let ckk = c * k * k;
    let span = oh * ow;
    let mut cols = vec![T::zero(); ckk * span];
    let mut dcols = vec![T::zero(); ckk * span];
    for bi in 0..b {
        let dout_b = &dout[bi * f * span..(bi + 1) * f * span];
        if let Some(dk) = dkernel.as_deref_mut() {
            im2col(&x[bi * c * h * w..], c, h, w, k, stride, padding, oh, ow, &mut cols);
            // dK += dOut_b · colsᵀ   ([f, span] × [span, ckk])
            T::gemm(
                f,
                span,
                ckk,
                T::one(),
                dout_b,
                span as isize,
                1,
                &cols,
                1,
                span as isize,
                T::one(),
                dk,
                ckk as isize,
                1,
            );
        }
        if let Some(dxb) = dx.as_deref_mut() {
            // dcols = kernelᵀ · dOut_b   ([ckk, f] × [f, span])
            T::gemm(
                ckk,
                f,
                span,
                T::one(),
                kernel,
                1,
                ckk as isize,
                dout_b,
                span as isize,
                1,
                T::zero(),
                &mut dcols,
                span as isize,
                1,
            );
            col2im_add(
                &dcols,
                c,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
                &mut dxb[bi * c * h * w..(bi + 1) * c * h * w],
            );
        }
    }
}

/// `x: [b, k]`, `weight: [k, m]`, `bias: [m]` → `[b, m]`.
pub fn linear_forward<T: Scalar>(x: &[T], b: usize, k: usize, weight: &[T], m: usize, bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); b * m];
    T::gemm(
        b,
        k,
        m,
        T::one(),
        x,
        k as isize,
        1,
        weight,
        m as isize,
        1,
        T::zero(),
        &mut out,
        m as isize,
        1,
    );
    for row in out.chunks_exact_mut(m) {
        for (o, bv) in row.iter_mut().zip(bias) {
            *o += *bv;
        }
    }
    out
}

/// Backward of [`linear_forward`], adding into whichever gradients are wanted.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    b: usize,
    k: usize,
    weight: &[T],
    m: usize,
    dout: &[T],
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    if let Some(dxs) = dx {
        // dX += dOut · Wᵀ   ([b, m] × [m, k])
        T::gemm(
            b,
            m,
            k,
            T::one(),
            dout,
            m as isize,
            1,
            weight,
            1,
            m as isize,
            T::one(),
            dxs,
            k as isize,
            1,
        );
    }
    if let Some(dw) = dweight {
        // dW += Xᵀ · dOut   ([k, b] × [b, m])
        T::gemm(
            k,
            b,
            m,
            T::one(),
            x,
            1,
            k as isize,
            dout,
            m as isize,
            1,
            T::one(),
            dw,
            m as isize,
            1,
        );
    }
    if let Some(db) = dbias {
        for row in dout.chunks_exact(m) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += *g;
            }
        }
    }
}

/// 2×2 mean pooling over `[b, c, h, w]` (h, w even) → `[b, c, h/2, w/2]`.
pub fn downsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &src[(2 * oy) * w..(2 * oy) * w + w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
            for ox in 0..ow {
                // Pairwise grouping keeps upsample→downsample bitwise exact:
                // on a constant 2×2 window the sums are 2x + 2x = 4x with no
                // intermediate rounding.
                dst[oy * ow + ox] =
                    ((r0[2 * ox] + r0[2 * ox + 1]) + (r1[2 * ox] + r1[2 * ox + 1])) * quarter;
            }
        }
    }
    out
}

pub fn downsample2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for p in 0..planes {
        let src = &dout[p * oh * ow..];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                dst[(2 * oy) * w + 2 * ox] += g;
                dst[(2 * oy) * w + 2 * ox + 1] += g;
                dst[(2 * oy + 1) * w + 2 * ox] += g;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2× replication over `[b, c, h, w]` → `[b, c, 2h, 2w]`.
pub fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let src_row = &src[(oy / 2) * w..(oy / 2) * w + w];
            let dst_row = &mut dst[oy * ow..oy * ow + ow];
            for ox in 0..ow {
                dst_row[ox] = src_row[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..2 * h {
            let src_row = &src[oy * ow..oy * ow + ow];
            let dst_row = &mut dst[(oy / 2) * w..(oy / 2) * w + w];
            for ox in 0..ow {
                dst_row[ox / 2] += src_row[ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dim_formula() {
        assert_eq!(conv_out_dim(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_dim(5, 3, 2, 0), Some(2));
        assert_eq!(conv_out_dim(2, 3, 1, 0), None);
        assert_eq!(conv_out_dim(2, 3, 1, 1), Some(2));
    }

    #[test]
    fn im2col_matches_direct_window_reads() {
        // 1 channel, 3×3 input, k=2, stride 1, no padding → 4 windows.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let (oh, ow) = (2, 2);
        let mut cols = vec![0.0; 4 * oh * ow];
        im2col(&x, 1, 3, 3, 2, 1, 0, oh, ow, &mut cols);
        // Row for tap (ki=0, kj=0) is the top-left of each window.
        assert_eq!(&cols[0..4], &[1.0, 2.0, 4.0, 5.0]);
        // Tap (1, 1): bottom-right of each window.
        assert_eq!(&cols[12..16], &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn im2col_zero_pads_out_of_bounds() {
        let x = vec![1.0f64; 4]; // 2×2 ones
        let (oh, ow) = (2, 2);
        let mut cols = vec![7.0; 9 * oh * ow];
        im2col(&x, 1, 2, 2, 3, 1, 1, oh, ow, &mut cols);
        // Tap (0,0) reads (-1,-1), (-1,0), (0,-1), (0,0) for the 4 outputs.
        assert_eq!(&cols[0..4], &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn downsample_then_upsample_shapes_and_means() {
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let d = downsample2_forward(&x, 1, 2, 2);
        assert_eq!(d, vec![2.5]);
        let u = upsample2_forward(&d, 1, 1, 1);
        assert_eq!(u, vec![2.5; 4]);
    }
}
