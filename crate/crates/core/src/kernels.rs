//! Raw slice kernels behind the graph operations.
//!
//! Convolution has two forward paths: [`conv2d_reference`], a direct
//! quadruple loop kept as the oracle, and [`conv2d_forward`], which expands
//! patches into a column matrix and runs one GEMM per sample. Both must agree.

use crate::error::{Error, Result};
use crate::tensor::{Mat, MatMut, Real};

/// Resolved extents of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let [out_c, w_in_c, k_h, k_w] = *weight else {
            return Err(Error::shape("conv2d", format!("weights must be OIHW, got {weight:?}")));
        };
        if w_in_c != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("weights expect {w_in_c} input channels, input has {in_c}"),
            ));
        }
        if !matches!(k_h, 1 | 3) || !matches!(k_w, 1 | 3) {
            return Err(Error::shape("conv2d", format!("unsupported kernel {k_h}x{k_w}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integral output extent for size {size}, kernel {k}, pad {pad}, stride {stride}"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad,
            out_h: extent(in_h, k_h)?,
            out_w: extent(in_w, k_w)?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Direct convolution: every output is an explicit sum over channel and
/// kernel window. Slow; used as the reference for the fast path.
pub fn conv2d_reference<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; g.batch * g.out_c * g.out_plane()];
    for n in 0..g.batch {
        for oc in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias[oc];
                    for ic in 0..g.in_c {
                        for ky in 0..g.k_h {
                            for kx in 0..g.k_w {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                let iv = input[((n * g.in_c + ic) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                let wv = weight[((oc * g.in_c + ic) * g.k_h + ky) * g.k_w + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((n * g.out_c + oc) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies
/// inside `0..in_w`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.in_w + g.pad > kx {
        ((g.in_w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Expands one sample into a `patch_len x out_plane` column matrix.
fn im2col<T: Real>(g: &ConvGeometry, sample: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ic in 0..g.in_c {
        let chan = &sample[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..valid.start].fill(T::ZERO);
                    line[valid.end..].fill(T::ZERO);
                    let first = valid.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (d, s) in line[valid.clone()]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], sample: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for ic in 0..g.in_c {
        let chan = &mut sample[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let src = &cols[row * plane..(row + 1) * plane];
                let valid = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize || valid.is_empty() {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w + valid.start..oy * g.out_w + valid.end];
                    let first = valid.start * g.stride + kx - g.pad;
                    for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Patch-matrix convolution: one `out_c x patch_len` by
/// `patch_len x out_plane` product per sample.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::ZERO; g.batch * g.out_c * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; k * plane]
    };
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dst = &mut out[n * g.out_c * plane..(n + 1) * g.out_c * plane];
        for (oc, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[oc]);
        }
        let patches: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut cols);
            &cols
        };
        T::gemm(
            g.out_c,
            k,
            plane,
            T::ONE,
            Mat::rows(weight, k),
            Mat::rows(patches, plane),
            T::ONE,
            MatMut::rows(dst, plane),
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Weight and bias gradients are
/// accumulated into the given buffers; the input gradient is written only
/// when requested.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    // A "same" stride-1 convolution's input gradient is the output gradient
    // convolved with the flipped, channel-transposed kernel.
    if !g.is_pointwise() && g.stride == 1 && 2 * g.pad + 1 == g.k_h && g.k_h == g.k_w {
        if let Some(gi) = grad_input.take() {
            let (kh, kw) = (g.k_h, g.k_w);
            let mut flipped = vec![T::ZERO; weight.len()];
            for oc in 0..g.out_c {
                for ic in 0..g.in_c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            flipped[((ic * g.out_c + oc) * kh + kh - 1 - ky) * kw + kw - 1 - kx] =
                                weight[((oc * g.in_c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            let tg = ConvGeometry::new(
                &[g.batch, g.out_c, g.out_h, g.out_w],
                &[g.in_c, g.out_c, kh, kw],
                1,
                g.pad,
            )
            .expect("transposed geometry mirrors a valid one");
            let full = conv2d_forward(&tg, grad_out, &flipped, &vec![T::ZERO; g.in_c]);
            for (d, s) in gi.iter_mut().zip(full) {
                *d += s;
            }
        }
    }
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; k * plane]
    };
    let mut grad_cols = if grad_input.is_some() {
        vec![T::ZERO; k * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dout = &grad_out[n * g.out_c * plane..(n + 1) * g.out_c * plane];
        for (oc, chunk) in dout.chunks_exact(plane).enumerate() {
            let mut s = T::ZERO;
            for &v in chunk {
                s += v;
            }
            grad_bias[oc] += s;
        }
        let patches: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut cols);
            &cols
        };
        T::gemm(
            g.out_c,
            plane,
            k,
            T::ONE,
            Mat::rows(dout, plane),
            Mat::transposed(patches, plane),
            T::ONE,
            MatMut::rows(grad_weight, k),
        );
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi = &mut gi[n * g.in_sample()..(n + 1) * g.in_sample()];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_c,
                    plane,
                    T::ONE,
                    Mat::transposed(weight, k),
                    Mat::rows(dout, plane),
                    T::ONE,
                    MatMut::rows(gi, plane),
                );
            } else {
                T::gemm(
                    k,
                    g.out_c,
                    plane,
                    T::ONE,
                    Mat::transposed(weight, k),
                    Mat::rows(dout, plane),
                    T::ZERO,
                    MatMut::rows(&mut grad_cols, plane),
                );
                col2im(g, &grad_cols, gi);
            }
        }
    }
}

/// 2x2 stride-2 max pooling over an NCHW buffer. Returns the pooled values
/// and, for each output, the flat input index of the selected maximum.
/// Ties go to the first element in row-major window order.
pub fn maxpool2_forward<T: Real>(shape: &[usize], input: &[T]) -> Result<(Vec<T>, Vec<u32>)> {
    let [n, c, h, w] = *shape else {
        return Err(Error::shape("maxpool2", format!("input must be NCHW, got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("odd spatial extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Real>(argmax: &[u32], grad_out: &[T], grad_input: &mut [T]) {
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_input[idx as usize] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(input: [usize; 4], weight: [usize; 4], pad: usize) -> ConvGeometry {
        ConvGeometry::new(&input, &weight, 1, pad).unwrap()
    }

    /// Input, weight and bias gradients of `sum(conv(x) * dout)` by direct
    /// summation.
    fn naive_backward(g: &ConvGeometry, x: &[f64], w: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut gx, mut gw, mut gb) = (vec![0.0; x.len()], vec![0.0; w.len()], vec![0.0; g.out_c]);
        for n in 0..g.batch {
            for oc in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let d = dout[((n * g.out_c + oc) * g.out_h + oy) * g.out_w + ox];
                        gb[oc] += d;
                        for ic in 0..g.in_c {
                            for ky in 0..g.k_h {
                                for kx in 0..g.k_w {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_c + ic) * g.in_h + iy as usize) * g.in_w + ix as usize;
                                    let wi = ((oc * g.in_c + ic) * g.k_h + ky) * g.k_w + kx;
                                    gx[xi] += d * w[wi];
                                    gw[wi] += d * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }

    #[test]
    fn backward_matches_direct_summation() {
        let mut state = 1u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for (input, weight, stride, pad) in [
            ([2, 3, 7, 6], [4, 3, 3, 3], 1, 1),
            ([1, 2, 9, 7], [3, 2, 3, 3], 2, 1),
            ([2, 3, 5, 5], [2, 3, 1, 1], 1, 0),
            ([1, 2, 6, 5], [2, 2, 3, 3], 1, 0),
        ] {
            let g = ConvGeometry::new(&input, &weight, stride, pad).unwrap();
            let x: Vec<f64> = (0..input.iter().product::<usize>()).map(|_| next()).collect();
            let w: Vec<f64> = (0..weight.iter().product::<usize>()).map(|_| next()).collect();
            let dout: Vec<f64> = (0..g.output_shape().iter().product::<usize>())
                .map(|_| next())
                .collect();
            let (ex, ew, eb) = naive_backward(&g, &x, &w, &dout);
            let (mut gx, mut gw, mut gb) = (vec![0.5; x.len()], vec![0.0; w.len()], vec![0.0; g.out_c]);
            conv2d_backward(&g, &x, &w, &dout, Some(&mut gx), &mut gw, &mut gb);
            let close =
                |a: &[f64], b: &[f64], offset: f64| a.iter().zip(b).all(|(p, q)| (p - offset - q).abs() < 1e-12);
            assert!(close(&gx, &ex, 0.5), "input grad {input:?} {weight:?}");
            assert!(close(&gw, &ew, 0.0), "weight grad {input:?} {weight:?}");
            assert!(close(&gb, &eb, 0.0));
        }
    }

    #[test]
    fn ones_kernel_on_3x3() {
        let g = geometry([1, 1, 3, 3], [1, 1, 3, 3], 1);
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let expected = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0];
        assert_eq!(conv2d_reference(&g, &input, &[1.0; 9], &[0.0]), expected);
        assert_eq!(conv2d_forward(&g, &input, &[1.0; 9], &[0.0]), expected);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let g = geometry([1, 1, 5, 4], [1, 1, 3, 3], 1);
        let input: Vec<f32> = (0..20).map(|v| v as f32 * 0.5 - 3.0).collect();
        let mut kernel = [0.0f32; 9];
        kernel[4] = 1.0;
        assert_eq!(conv2d_forward(&g, &input, &kernel, &[0.0]), input);
    }

    #[test]
    fn identity_matrix_pointwise_kernel() {
        let g = geometry([1, 64, 12, 12], [64, 64, 1, 1], 0);
        let input: Vec<f32> = (0..64 * 144).map(|v| (v % 97) as f32 - 40.0).collect();
        let kernel: Vec<f32> = (0..64 * 64).map(|i| if i / 64 == i % 64 { 1.0 } else { 0.0 }).collect();
        assert_eq!(conv2d_forward(&g, &input, &kernel, &[0.0; 64]), input);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeometry::new(&[1, 2, 8, 8], &[4, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 1, 8, 8], &[1, 1, 5, 5], 1, 2).is_err());
        assert!(ConvGeometry::new(&[1, 1, 8, 8], &[1, 1, 3, 3], 2, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 9, 9], &[1, 1, 3, 3], 2, 0).is_ok());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn strided_paths_agree() {
        let g = ConvGeometry::new(&[2, 3, 9, 7], &[4, 3, 3, 3], 2, 1).unwrap();
        let input: Vec<f64> = (0..2 * 3 * 63).map(|v| ((v * 37) % 23) as f64 - 11.0).collect();
        let weight: Vec<f64> = (0..4 * 27).map(|v| ((v * 13) % 7) as f64 - 3.0).collect();
        let bias = [0.5, -1.0, 2.0, 0.0];
        assert_eq!(
            conv2d_reference(&g, &input, &weight, &bias),
            conv2d_forward(&g, &input, &weight, &bias)
        );
    }

    #[test]
    fn maxpool_basic_cases() {
        let (out, arg) = maxpool2_forward(&[1, 1, 2, 2], &[1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out, [4.0]);
        assert_eq!(arg, [3]);
        let (out, _) = maxpool2_forward(&[1, 1, 4, 4], &[7.0f32; 16]).unwrap();
        assert_eq!(out, [7.0; 4]);
        assert!(maxpool2_forward(&[1, 1, 3, 4], &[0.0f32; 12]).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (_, arg) = maxpool2_forward(&[1, 1, 2, 2], &[5.0f32, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(arg, [0]);
    }
}
