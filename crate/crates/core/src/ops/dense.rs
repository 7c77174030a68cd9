//! Fully connected layer `y = x Wᵀ + b` with `W: [out, in]`.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, fin] = *x.dims() else {
        return Err(shape_err!("dense input must be [n, features], got {:?}", x.dims()));
    };
    let [fout, win] = *weight.dims() else {
        return Err(shape_err!("dense weight must be [out, in], got {:?}", weight.dims()));
    };
    if win != fin || bias.dims() != [fout] {
        return Err(shape_err!(
            "dense expects {win} inputs and bias [{fout}], got {fin} and {:?}",
            bias.dims()
        ));
    }
    Ok((n, fin, fout))
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin, fout) = check(x, weight, bias)?;
    let mut y = Tensor::zeros(&[n, fout]);
    for row in y.data_mut().chunks_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    gemm(Trans::N, Trans::T, n, fin, fout, x.data(), weight.data(), T::one(), y.data_mut());
    Ok(y)
}

/// Returns `(dx, dweight, dbias)`.
pub fn dense_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin, fout) = check(x, weight, bias)?;
    if dy.dims() != [n, fout] {
        return Err(shape_err!("dense upstream grad {:?} != [{n}, {fout}]", dy.dims()));
    }
    let mut dx = Tensor::zeros(&[n, fin]);
    gemm(Trans::N, Trans::N, n, fout, fin, dy.data(), weight.data(), T::zero(), dx.data_mut());
    let mut dw = Tensor::zeros(&[fout, fin]);
    gemm(Trans::T, Trans::N, fout, n, fin, dy.data(), x.data(), T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[fout]);
    for row in dy.data().chunks(fout) {
        db.data_mut().iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    Ok((dx, dw, db))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    dy.check_same(x)?;
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dense_gradients_match_central_differences() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        let w = Tensor::<f64>::from_fn(&[2, 4], |i| (i as f64 * 1.3).cos());
        let b = Tensor::<f64>::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let dy = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 - 2.5);
        let (dx, dw, db) = dense_backward(&dy, &x, &w, &b).unwrap();
        let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dense_forward(x, w, b).unwrap().dot(&dy);
        let fd = |t: &Tensor<f64>, i: usize, f: &dyn Fn(&Tensor<f64>) -> f64| {
            let h = 1e-5 * t.data()[i].abs().max(1.0);
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        };
        let close = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0) < 1e-6;
        for i in 0..x.len() {
            assert!(close(dx.data()[i], fd(&x, i, &|t| obj(t, &w, &b))));
        }
        for i in 0..w.len() {
            assert!(close(dw.data()[i], fd(&w, i, &|t| obj(&x, t, &b))));
        }
        for i in 0..b.len() {
            assert!(close(db.data()[i], fd(&b, i, &|t| obj(&x, &w, t))));
        }
    }
}
