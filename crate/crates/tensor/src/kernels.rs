//! Shape arithmetic and the im2col/col2im pair used by conv2d.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[c, h, w]` into a `[c*kh*kw, oh*ow]` patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(out.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    let base = oi * ow;
                    if ih < 0 || ih >= h as isize {
                        for v in &mut dst[base..base + ow] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        dst[base + oj] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the transpose of `im2col`: fold a patch-matrix gradient back
/// onto the image gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let base = oi * ow;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += src[base + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
