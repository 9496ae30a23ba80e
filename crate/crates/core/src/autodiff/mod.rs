//! Minimal dense reverse-mode autodiff: a tape of ops over [`Tensor`]s.
//!
//! [`Tensor`]: crate::tensor::Tensor

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{check_gradients, op_suite, GradCheck, OpCheck};
pub use graph::{sigmoid, BatchStats, Gradients, Graph, Op, Var};
pub use kernels::NormKind;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut g = Graph::new();
        let img = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.3 - 1.0);
        let x = g.input(img.clone());
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn avg_pool_2x2() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_leaves_params_disconnected() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.input(t(&[2], &[1.0, 1.0]));
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.is_disconnected(p));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add#2"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[1000.0]));
        let err = g.exp(a).unwrap_err().to_string();
        assert!(err.contains("exp#1"), "{err}");
    }

    #[test]
    fn transposed_conv_output_size() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(&[2, 3, 3, 3]));
        let y = g.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 8, 8]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |g: &mut Graph<f64>, w: Var, x: Var| {
            let y = g.conv2d(x, w, None, 1, 1).unwrap();
            let a = g.tanh(y).unwrap();
            let l1 = g.sum(a).unwrap();
            let sq = g.square(y).unwrap();
            let l2 = g.mean(sq).unwrap();
            (l1, l2)
        };
        let wt = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7) % 5) as f64 * 0.1 - 0.2);
        let xt = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 3) % 11) as f64 * 0.1 - 0.5);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let w = g.param(wt.clone());
            let x = g.input(xt.clone());
            let (l1, l2) = build(&mut g, w, x);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap().get(w).unwrap().clone()
        };
        let (a, b, total) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..total.numel() {
            assert!((total.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-10);
        }
    }
}
