//! Hot numeric routines behind the graph ops.
//!
//! All reductions use a fixed summation order (8 independent lanes folded in
//! a fixed tree, then the tail), so results are bit-identical regardless of
//! how the compiler vectorizes, and identical between runs.

use super::tensor::Real;

/// `y += a * x`, elementwise.
#[inline]
pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + a * *xi;
    }
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    let split = x.len() - (x.len() % 8);
    let (xh, xt) = x.split_at(split);
    let (yh, yt) = y.split_at(split);
    let mut acc = [F::zero(); 8];
    for (xc, yc) in xh.chunks_exact(8).zip(yh.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] = acc[l] + xc[l] * yc[l];
        }
    }
    let mut tail = F::zero();
    for (a, b) in xt.iter().zip(yt.iter()) {
        tail = tail + *a * *b;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Sum with the same fixed 8-lane accumulation order as [`dot`].
#[inline]
pub fn sum<F: Real>(x: &[F]) -> F {
    let split = x.len() - (x.len() % 8);
    let (xh, xt) = x.split_at(split);
    let mut acc = [F::zero(); 8];
    for xc in xh.chunks_exact(8) {
        for l in 0..8 {
            acc[l] = acc[l] + xc[l];
        }
    }
    let mut tail = F::zero();
    for a in xt.iter() {
        tail = tail + *a;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Shape bookkeeping for a same-padded square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    /// Rows of the unrolled patch matrix: `cin * k * k`.
    #[inline]
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    #[inline]
    pub fn pad(&self) -> usize {
        self.k / 2
    }
    /// Scratch length required for the `col` buffers. Large-map 1x1
    /// convolutions run directly on the input and need none.
    pub fn col_len(&self) -> usize {
        if self.k == 1 && self.hw() > SMALL_HW {
            0
        } else {
            self.patch() * self.hw()
        }
    }
}

/// Unrolls one image (`cin * h * w`) into patch-major rows:
/// `col[(ci*k*k + ky*k + kx) * hw + y*w + x] = x[ci, y+ky-pad, x+kx-pad]`,
/// zero outside the image.
pub fn im2col<F: Real>(x: &[F], d: &ConvDims, col: &mut [F]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad());
    let hw = d.hw();
    debug_assert_eq!(col.len(), d.patch() * hw);
    col.iter_mut().for_each(|v| *v = F::zero());
    for ci in 0..d.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let off = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[off..off + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-major gradient back onto the image layout; the
/// adjoint of [`im2col`].
pub fn col2im_add<F: Real>(dcol: &[F], d: &ConvDims, dx: &mut [F]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad());
    let hw = d.hw();
    for ci in 0..d.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx_off = kx as isize - pad as isize;
                let row = &dcol[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx_off).max(0) as usize;
                let x_hi = (w as isize - dx_off).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let off = (x_lo as isize + dx_off) as usize;
                    for (d, s) in dst[off..off + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[x_lo..x_hi])
                    {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Below this many spatial positions the patch-major (axpy over rows of
/// length `hw`) loops degenerate into per-element calls, so convolution
/// switches to a position-major layout where dot products and axpys run over
/// the long `cin*k*k` axis instead.
const SMALL_HW: usize = 16;

/// Position-major unroll: `colt[(y*w+x) * patch + (ci*k*k + ky*k + kx)]`.
fn im2col_t<F: Real>(x: &[F], d: &ConvDims, colt: &mut [F]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad());
    let patch = d.patch();
    colt.iter_mut().for_each(|v| *v = F::zero());
    for y in 0..h {
        for x_ in 0..w {
            let row = &mut colt[(y * w + x_) * patch..][..patch];
            for ci in 0..d.cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x_ as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[(ci * k + ky) * k + kx] =
                            x[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_t`].
fn col2im_t_add<F: Real>(dcolt: &[F], d: &ConvDims, dx: &mut [F]) {
    let (h, w, k, pad) = (d.h, d.w, d.k, d.pad());
    let patch = d.patch();
    for y in 0..h {
        for x_ in 0..w {
            let row = &dcolt[(y * w + x_) * patch..][..patch];
            for ci in 0..d.cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x_ as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let at = (ci * h + sy as usize) * w + sx as usize;
                        dx[at] = dx[at] + row[(ci * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

/// Same-padded convolution. `col` must have length `d.col_len()`.
pub fn conv2d_forward<F: Real>(
    x: &[F],
    d: &ConvDims,
    kernel: &[F],
    bias: &[F],
    out: &mut [F],
    col: &mut [F],
) {
    let hw = d.hw();
    let patch = d.patch();
    for n in 0..d.n {
        let xn = &x[n * d.cin * hw..][..d.cin * hw];
        let on = &mut out[n * d.cout * hw..][..d.cout * hw];
        if hw <= SMALL_HW {
            if d.k == 1 {
                // 1x1 kernels read channel columns; transpose the input.
                for p in 0..hw {
                    for ci in 0..d.cin {
                        col[p * patch + ci] = xn[ci * hw + p];
                    }
                }
            } else {
                im2col_t(xn, d, col);
            }
            let colt: &[F] = col;
            for co in 0..d.cout {
                let wrow = &kernel[co * patch..][..patch];
                for p in 0..hw {
                    on[co * hw + p] = bias[co] + dot(wrow, &colt[p * patch..][..patch]);
                }
            }
        } else if d.k == 1 {
            for co in 0..d.cout {
                let row = &mut on[co * hw..][..hw];
                row.iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..d.cin {
                    axpy(kernel[co * d.cin + ci], &xn[ci * hw..][..hw], row);
                }
            }
        } else {
            im2col(xn, d, col);
            for co in 0..d.cout {
                let row = &mut on[co * hw..][..hw];
                row.iter_mut().for_each(|v| *v = bias[co]);
                for p in 0..patch {
                    axpy(kernel[co * patch + p], &col[p * hw..][..hw], row);
                }
            }
        }
    }
}

/// Accumulates input/kernel/bias gradients of [`conv2d_forward`].
/// `col` and `dcol` must each have length `d.col_len()`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    x: &[F],
    d: &ConvDims,
    kernel: &[F],
    dout: &[F],
    dx: &mut [F],
    dkernel: &mut [F],
    dbias: &mut [F],
    col: &mut [F],
    dcol: &mut [F],
) {
    let hw = d.hw();
    let patch = d.patch();
    for n in 0..d.n {
        let xn = &x[n * d.cin * hw..][..d.cin * hw];
        let dxn = &mut dx[n * d.cin * hw..][..d.cin * hw];
        let don = &dout[n * d.cout * hw..][..d.cout * hw];
        if hw <= SMALL_HW {
            if d.k == 1 {
                for p in 0..hw {
                    for ci in 0..d.cin {
                        col[p * patch + ci] = xn[ci * hw + p];
                    }
                }
            } else {
                im2col_t(xn, d, col);
            }
            dcol.iter_mut().for_each(|v| *v = F::zero());
            for co in 0..d.cout {
                let wrow = &kernel[co * patch..][..patch];
                let dwrow = &mut dkernel[co * patch..][..patch];
                let mut bias_acc = F::zero();
                for p in 0..hw {
                    let g = don[co * hw + p];
                    bias_acc = bias_acc + g;
                    axpy(g, &col[p * patch..][..patch], dwrow);
                    axpy(g, wrow, &mut dcol[p * patch..][..patch]);
                }
                dbias[co] = dbias[co] + bias_acc;
            }
            if d.k == 1 {
                for p in 0..hw {
                    for ci in 0..d.cin {
                        dxn[ci * hw + p] = dxn[ci * hw + p] + dcol[p * patch + ci];
                    }
                }
            } else {
                col2im_t_add(dcol, d, dxn);
            }
        } else if d.k == 1 {
            for co in 0..d.cout {
                let drow = &don[co * hw..][..hw];
                dbias[co] = dbias[co] + sum(drow);
                for ci in 0..d.cin {
                    dkernel[co * d.cin + ci] =
                        dkernel[co * d.cin + ci] + dot(drow, &xn[ci * hw..][..hw]);
                    axpy(kernel[co * d.cin + ci], drow, &mut dxn[ci * hw..][..hw]);
                }
            }
        } else {
            im2col(xn, d, col);
            dcol.iter_mut().for_each(|v| *v = F::zero());
            for co in 0..d.cout {
                let drow = &don[co * hw..][..hw];
                dbias[co] = dbias[co] + sum(drow);
                for p in 0..patch {
                    dkernel[co * patch + p] =
                        dkernel[co * patch + p] + dot(drow, &col[p * hw..][..hw]);
                    axpy(kernel[co * patch + p], drow, &mut dcol[p * hw..][..hw]);
                }
            }
            col2im_add(dcol, d, dxn);
        }
    }
}

/// 2x2 average pooling over `planes` contiguous `h x w` images (`h`, `w` even).
pub fn avg_pool2x2_forward<F: Real>(x: &[F], planes: usize, h: usize, w: usize, out: &mut [F]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &xp[(2 * y) * w..][..w];
            let r1 = &xp[(2 * y + 1) * w..][..w];
            let orow = &mut op[y * ow..][..ow];
            for x_ in 0..ow {
                orow[x_] = (r0[2 * x_] + r0[2 * x_ + 1] + r1[2 * x_] + r1[2 * x_ + 1]) * quarter;
            }
        }
    }
}

pub fn avg_pool2x2_backward<F: Real>(dout: &[F], planes: usize, h: usize, w: usize, dx: &mut [F]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    for p in 0..planes {
        let dop = &dout[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * w..][..h * w];
        for y in 0..oh {
            let dorow = &dop[y * ow..][..ow];
            for x_ in 0..ow {
                let g = dorow[x_] * quarter;
                dxp[(2 * y) * w + 2 * x_] = dxp[(2 * y) * w + 2 * x_] + g;
                dxp[(2 * y) * w + 2 * x_ + 1] = dxp[(2 * y) * w + 2 * x_ + 1] + g;
                dxp[(2 * y + 1) * w + 2 * x_] = dxp[(2 * y + 1) * w + 2 * x_] + g;
                dxp[(2 * y + 1) * w + 2 * x_ + 1] = dxp[(2 * y + 1) * w + 2 * x_ + 1] + g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling over `planes` contiguous `h x w` images.
pub fn upsample_nn2x2_forward<F: Real>(x: &[F], planes: usize, h: usize, w: usize, out: &mut [F]) {
    let ow = 2 * w;
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            let src = &xp[y * w..][..w];
            for dy in 0..2 {
                let dst = &mut op[(2 * y + dy) * ow..][..ow];
                for x_ in 0..w {
                    dst[2 * x_] = src[x_];
                    dst[2 * x_ + 1] = src[x_];
                }
            }
        }
    }
}

pub fn upsample_nn2x2_backward<F: Real>(dout: &[F], planes: usize, h: usize, w: usize, dx: &mut [F]) {
    let ow = 2 * w;
    for p in 0..planes {
        let dop = &dout[p * 4 * h * w..][..4 * h * w];
        let dxp = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            let r0 = &dop[(2 * y) * ow..][..ow];
            let r1 = &dop[(2 * y + 1) * ow..][..ow];
            let dst = &mut dxp[y * w..][..w];
            for x_ in 0..w {
                dst[x_] =
                    dst[x_] + (r0[2 * x_] + r0[2 * x_ + 1]) + (r1[2 * x_] + r1[2 * x_ + 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::rng::RngState;

    /// Naive sliding-window convolution used as the oracle.
    fn conv_oracle(x: &[f64], d: &ConvDims, k: &[f64], b: &[f64]) -> Vec<f64> {
        let hw = d.hw();
        let pad = d.pad() as isize;
        let mut out = vec![0.0; d.n * d.cout * hw];
        for n in 0..d.n {
            for co in 0..d.cout {
                for y in 0..d.h as isize {
                    for x_ in 0..d.w as isize {
                        let mut acc = b[co];
                        for ci in 0..d.cin {
                            for ky in 0..d.k as isize {
                                for kx in 0..d.k as isize {
                                    let (sy, sx) = (y + ky - pad, x_ + kx - pad);
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((n * d.cin + ci) * d.h + sy as usize) * d.w
                                        + sx as usize]
                                        * k[((co * d.cin + ci) * d.k + ky as usize) * d.k
                                            + kx as usize];
                                }
                            }
                        }
                        out[((n * d.cout + co) * d.h + y as usize) * d.w + x_ as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = RngState::new(42);
        for &k in &[1usize, 3] {
            for _ in 0..10 {
                let d = ConvDims {
                    n: 1 + rng.below(2),
                    cin: 1 + rng.below(4),
                    h: 2 + rng.below(6),
                    w: 2 + rng.below(6),
                    cout: 1 + rng.below(4),
                    k,
                };
                let mut x = vec![0.0f64; d.n * d.cin * d.hw()];
                let mut kern = vec![0.0f64; d.cout * d.patch()];
                let mut bias = vec![0.0f64; d.cout];
                rng.fill_uniform(&mut x, -1.0, 1.0);
                rng.fill_uniform(&mut kern, -1.0, 1.0);
                rng.fill_uniform(&mut bias, -1.0, 1.0);
                let mut out = vec![0.0f64; d.n * d.cout * d.hw()];
                let mut col = vec![0.0f64; d.col_len()];
                conv2d_forward(&x, &d, &kern, &bias, &mut out, &mut col);
                let want = conv_oracle(&x, &d, &kern, &bias);
                for (a, b) in out.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let d = ConvDims {
            n: 1,
            cin: 1,
            h: 4,
            w: 5,
            cout: 1,
            k: 3,
        };
        let x: Vec<f32> = (0..20).map(|i| i as f32 * 0.3 - 2.0).collect();
        let mut kern = vec![0.0f32; 9];
        kern[4] = 1.0;
        let mut out = vec![0.0f32; 20];
        let mut col = vec![0.0f32; d.col_len()];
        conv2d_forward(&x, &d, &kern, &[0.0], &mut out, &mut col);
        assert_eq!(out, x);
    }

    #[test]
    fn pool_and_upsample_hand_cases() {
        let x = vec![1.0f32, 3.0, 5.0, 7.0];
        let mut out = vec![0.0f32; 1];
        avg_pool2x2_forward(&x, 1, 2, 2, &mut out);
        assert_eq!(out[0], 4.0);

        let mut up = vec![0.0f32; 4];
        upsample_nn2x2_forward(&[2.5f32], 1, 1, 1, &mut up);
        assert_eq!(up, vec![2.5; 4]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut rng = RngState::new(9);
        let (h, w, planes) = (3, 5, 4);
        let mut x = vec![0.0f32; planes * h * w];
        rng.fill_uniform(&mut x, -2.0, 2.0);
        let mut up = vec![0.0f32; planes * 4 * h * w];
        upsample_nn2x2_forward(&x, planes, h, w, &mut up);
        let mut back = vec![0.0f32; planes * h * w];
        avg_pool2x2_forward(&up, planes, 2 * h, 2 * w, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn dot_and_sum_match_f64_reference() {
        let mut rng = RngState::new(5);
        for len in [0usize, 1, 7, 8, 9, 64, 1000] {
            let mut x = vec![0.0f64; len];
            let mut y = vec![0.0f64; len];
            rng.fill_uniform(&mut x, -1.0, 1.0);
            rng.fill_uniform(&mut y, -1.0, 1.0);
            let want_dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let want_sum: f64 = x.iter().sum();
            assert!((dot(&x, &y) - want_dot).abs() < 1e-12);
            assert!((sum(&x) - want_sum).abs() < 1e-12);
        }
    }
}
