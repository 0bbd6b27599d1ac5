//! Central finite-difference check for scalar-valued graph functions.

use crate::scalar::Scalar;

use super::graph::{Graph, NodeId};
use super::tensor::{Tensor, TensorError};

/// Max over coordinates of `|analytic - central| / (|central| + 1e-12)`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// single-element node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let root = f(&mut g, leaf)?;
    let analytic = g.backward(root)?.take(leaf).expect("leaf requires grad");

    let eval = |v: Tensor<T>| -> Result<T, TensorError> {
        let mut g = Graph::new();
        let leaf = g.leaf(v);
        let root = f(&mut g, leaf)?;
        Ok(g.value(root).data()[0])
    };
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (two * h);
        let err = (analytic.data()[i] - central).abs() / (central.abs() + T::lit(1e-12));
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_self_test() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn constant_offset_drops_out() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let d = g.dot(x, x)?;
                let three = g.constant(Tensor::scalar(3.0));
                g.add(d, three)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn softmax_first_component() {
        let x = Tensor::new([2], vec![0.3, -0.7]).unwrap();
        let pick = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let p = g.softmax(x, 1.0)?;
                let m = g.constant(pick.clone());
                g.dot(p, m)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }
}
