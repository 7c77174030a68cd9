//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to GEMM
//! through im2col. Work is split over fixed-size batch chunks.

use crate::error::{invalid, shape_err, Result};
use crate::par;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Output extent `floor((size + 2*padding - k) / stride) + 1`.
pub fn out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid!("stride must be >= 1"));
    }
    let padded = size + 2 * padding;
    if k == 0 || padded < k {
        return Err(shape_err!(
            "kernel {k} does not fit input extent {size} with padding {padding}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let oh = out_extent(h, k, stride, pad)?;
        let ow = out_extent(w, k, stride, pad)?;
        Ok(Geometry { c, h, w, k, oh, ow, stride, pad })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unroll one sample `[c, h, w]` into `[c*k*k, oh*ow]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let Geometry { c, h, w, k, oh, ow, stride, pad } = *self;
        let cols = oh * ow;
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `[c*k*k, oh*ow]` back onto a zeroed `[c, h, w]` sample.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let Geometry { c, h, w, k, oh, ow, stride, pad } = *self;
        let cols = oh * ow;
        for ch in 0..c {
            let plane = &mut x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_kernels<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<(usize, usize)> {
    let (_, c, _, _) = input.nchw()?;
    let (o, kc, kh, kw) = kernels.nchw()?;
    if kh != kw {
        return Err(shape_err!("kernels must be square, got {kh}x{kw}"));
    }
    if kc != c {
        return Err(shape_err!("input has {c} channels but kernels expect {kc}"));
    }
    Ok((o, kh))
}

/// Output extents `(oh, ow)` for a convolution of `input` dims.
pub fn output_dims(
    dims: &[usize],
    out_channels: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>> {
    match *dims {
        [n, _, h, w] => Ok(vec![
            n,
            out_channels,
            out_extent(h, k, stride, padding)?,
            out_extent(w, k, stride, padding)?,
        ]),
        _ => Err(shape_err!("expected NCHW dims, got {dims:?}")),
    }
}

/// `input [n,c,h,w]` ⋆ `kernels [o,c,k,k]` → `[n,o,oh,ow]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let (o, k) = check_kernels(input, kernels)?;
    let g = Geometry::new(c, h, w, k, stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = c * h * w;
    let out_len = o * cols;
    let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
    let x = input.data();
    let wk = kernels.data();
    par::for_each_chunk(out.data_mut(), par::CHUNK * out_len, |ci, chunk| {
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        for (j, dst) in chunk.chunks_mut(out_len).enumerate() {
            let s = ci * par::CHUNK + j;
            let xs = &x[s * in_len..(s + 1) * in_len];
            let col_ref = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut col);
                &col
            };
            gemm(Trans::N, Trans::N, o, rows, cols, wk, col_ref, T::zero(), dst);
        }
    });
    Ok(out)
}

/// Gradients of `sum(upstream ⊙ conv2d_forward(input, kernels))` with respect
/// to `input` and `kernels`.
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.nchw()?;
    let (o, k) = check_kernels(input, kernels)?;
    let g = Geometry::new(c, h, w, k, stride, padding)?;
    let expect = [n, o, g.oh, g.ow];
    if upstream.dims() != expect {
        return Err(shape_err!(
            "upstream grad dims {:?} differ from forward output {expect:?}",
            upstream.dims()
        ));
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_len = c * h * w;
    let out_len = o * cols;
    let x = input.data();
    let dy = upstream.data();
    let wk = kernels.data();
    let n_chunks = n.div_ceil(par::CHUNK);

    let parts = par::map_range(n_chunks, |ci| {
        let lo = ci * par::CHUNK;
        let hi = (lo + par::CHUNK).min(n);
        let mut dw = vec![T::zero(); o * rows];
        let mut dx = vec![T::zero(); (hi - lo) * in_len];
        let mut col = vec![T::zero(); rows * cols];
        for s in lo..hi {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let dys = &dy[s * out_len..(s + 1) * out_len];
            let dxs = &mut dx[(s - lo) * in_len..(s - lo + 1) * in_len];
            if g.is_pointwise() {
                gemm(Trans::N, Trans::T, o, cols, rows, dys, xs, T::one(), &mut dw);
                gemm(Trans::T, Trans::N, rows, o, cols, wk, dys, T::zero(), dxs);
            } else {
                g.im2col(xs, &mut col);
                gemm(Trans::N, Trans::T, o, cols, rows, dys, &col, T::one(), &mut dw);
                gemm(Trans::T, Trans::N, rows, o, cols, wk, dys, T::zero(), &mut col);
                g.col2im(&col, dxs);
            }
        }
        (dw, dx)
    });

    let mut grad_kernels = Tensor::zeros(kernels.dims());
    let mut grad_input = Vec::with_capacity(n * in_len);
    for (dw, dx) in parts {
        grad_kernels
            .data_mut()
            .iter_mut()
            .zip(&dw)
            .for_each(|(a, &b)| *a = *a + b);
        grad_input.extend_from_slice(&dx);
    }
    Ok((Tensor::from_vec(input.dims(), grad_input)?, grad_kernels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Four nested loops over the receptive field, zero outside the input.
    fn direct(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.nchw().unwrap();
        let (o, _, ks, _) = k.nchw().unwrap();
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for m in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for p in 0..ks {
                                for q in 0..ks {
                                    let yy = (i * stride + p) as isize - pad as isize;
                                    let xx = (j * stride + q) as isize - pad as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        acc += x.at(&[b, ch, yy as usize, xx as usize]) * k.at(&[m, ch, p, q]);
                                    }
                                }
                            }
                        }
                        y.set(&[b, m, i, j], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d_forward(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn same_padding_keeps_resolution() {
        let x = Tensor::<f32>::zeros(&[1, 1, 28, 28]);
        let k = Tensor::zeros(&[9, 1, 3, 3]);
        assert_eq!(conv2d_forward(&x, &k, 1, 1).unwrap().dims(), &[1, 9, 28, 28]);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        for stride in [1, 2, 4] {
            for pad in [0, 1] {
                let got = conv2d_forward(&x, &k, stride, pad).unwrap();
                assert!(got.max_abs_diff(&direct(&x, &k, stride, pad)) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 5, 5]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 2]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let dy = Tensor::zeros(&[2, 3, 6, 6]);
        let (dx, dk) = conv2d_backward(&dy, &x, &k, 1, 1).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert_eq!(dk.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_wrong_upstream() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&Tensor::zeros(&[1, 1, 4, 4]), &x, &k, 1, 0).is_err());
    }

    #[test]
    fn kernel_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let dy = random(&[1, 1, 2, 2], &mut rng);
        let (_, dk) = conv2d_backward(&dy, &x, &k, 1, 0).unwrap();
        let objective = |k: &Tensor<f64>| conv2d_forward(&x, k, 1, 0).unwrap().dot(&dy);
        for i in 0..k.len() {
            let h = 1e-5 * k.data()[i].abs().max(1.0);
            let mut kp = k.clone();
            kp.data_mut()[i] += h;
            let mut km = k.clone();
            km.data_mut()[i] -= h;
            let numeric = (objective(&kp) - objective(&km)) / (2.0 * h);
            let analytic = dk.data()[i];
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-6, "coord {i}: {analytic} vs {numeric}");
        }
    }

    /// Analytic gradient of the direct-summation oracle, written out as loops.
    fn direct_grads(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        dy: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let (n, c, h, w) = x.nchw().unwrap();
        let (o, _, ks, _) = k.nchw().unwrap();
        let (_, _, oh, ow) = dy.nchw().unwrap();
        let mut dx = Tensor::zeros(x.dims());
        let mut dk = Tensor::zeros(k.dims());
        for b in 0..n {
            for m in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dy.at(&[b, m, i, j]);
                        for ch in 0..c {
                            for p in 0..ks {
                                for q in 0..ks {
                                    let yy = (i * stride + p) as isize - pad as isize;
                                    let xx = (j * stride + q) as isize - pad as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        let (yy, xx) = (yy as usize, xx as usize);
                                        let xi = [b, ch, yy, xx];
                                        let ki = [m, ch, p, q];
                                        dx.set(&xi, dx.at(&xi) + g * k.at(&ki));
                                        dk.set(&ki, dk.at(&ki) + g * x.at(&xi));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dk)
    }

    #[test]
    fn strided_backward_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(2, 0), (2, 1), (4, 1), (1, 1)] {
            let x = random(&[3, 2, 9, 9], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let y = conv2d_forward(&x, &k, stride, pad).unwrap();
            let dy = random(y.dims(), &mut rng);
            let (dx, dk) = conv2d_backward(&dy, &x, &k, stride, pad).unwrap();
            let (ex, ek) = direct_grads(&x, &k, &dy, stride, pad);
            assert!(dx.max_abs_diff(&ex) < 1e-12);
            assert!(dk.max_abs_diff(&ek) < 1e-12);
        }
    }
}
