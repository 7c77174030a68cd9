//! Average pooling and nearest-neighbour upsampling.

use crate::error::{shape_err, Result};
use crate::ops::conv::out_extent;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Average pooling with zero padding; every window is divided by
/// `window²`, padded taps included.
pub fn avgpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let oh = out_extent(h, window, stride, padding)?;
    let ow = out_extent(w, window, stride, padding)?;
    let norm = T::one() / T::from_usize(window * window).unwrap();
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for (iy, ix) in taps(oy, ox, window, stride, padding, h, w) {
                    acc = acc + src[iy * w + ix];
                }
                yd[(plane * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    Ok(y)
}

pub fn avgpool_backward<T: Scalar>(
    dy: &Tensor<T>,
    input_dims: &[usize],
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.nchw()?;
    let [_, _, h, w] = *input_dims else {
        return Err(shape_err!("expected NCHW input dims, got {input_dims:?}"));
    };
    if oh != out_extent(h, window, stride, padding)? || ow != out_extent(w, window, stride, padding)? {
        return Err(shape_err!("upstream grad {:?} inconsistent with input {input_dims:?}", dy.dims()));
    }
    let norm = T::one() / T::from_usize(window * window).unwrap();
    let mut dx = Tensor::zeros(input_dims);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for plane in 0..n * c {
        let dst = &mut dxd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyd[(plane * oh + oy) * ow + ox] * norm;
                for (iy, ix) in taps(oy, ox, window, stride, padding, h, w) {
                    dst[iy * w + ix] = dst[iy * w + ix] + g;
                }
            }
        }
    }
    Ok(dx)
}

fn taps(
    oy: usize,
    ox: usize,
    window: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let y0 = (oy * stride) as isize - padding as isize;
    let x0 = (ox * stride) as isize - padding as isize;
    (0..window as isize).flat_map(move |dy| {
        (0..window as isize).filter_map(move |dx| {
            let (iy, ix) = (y0 + dy, x0 + dx);
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                .then_some((iy as usize, ix as usize))
        })
    })
}

/// Source index for output position `o` when resizing `inp` → `out`.
fn nearest(o: usize, inp: usize, out: usize) -> usize {
    (o * inp / out).min(inp - 1)
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(shape_err!("empty extent in upsample {h}x{w} -> {oh}x{ow}"));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = nearest(oy, h, oh);
            for ox in 0..ow {
                yd[(plane * oh + oy) * ow + ox] = xd[(plane * h + iy) * w + nearest(ox, w, ow)];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &Tensor<T>, input_dims: &[usize]) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.nchw()?;
    let [_, _, h, w] = *input_dims else {
        return Err(shape_err!("expected NCHW input dims, got {input_dims:?}"));
    };
    let mut dx = Tensor::zeros(input_dims);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = nearest(oy, h, oh);
            for ox in 0..ow {
                let i = (plane * h + iy) * w + nearest(ox, w, ow);
                dxd[i] = dxd[i] + dyd[(plane * oh + oy) * ow + ox];
            }
        }
    }
    Ok(dx)
}
