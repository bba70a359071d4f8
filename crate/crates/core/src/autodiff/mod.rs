//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! [`Graph`] records operations eagerly (define-by-run): building a node
//! evaluates it, so "evaluating a graph" is simply constructing it from its
//! inputs. [`Graph::backward`] then propagates adjoints from a scalar sink.
//! [`grad_check`] is the central-difference oracle used to verify every loss.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Tensor {
        Tensor::matrix(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn log_softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(row(&[0.3; 4])).unwrap();
        let y = g.log_softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
            assert!((v + 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar(y).unwrap(), 0.5);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let a = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 1.5 - 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let an = g.constant(a.clone()).unwrap();
        let out = g.matmul(i, an).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_output_names_the_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        match g.log(x) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn log_softmax_adjoint_is_indicator_minus_softmax() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[0.0; 4]), true).unwrap();
        let y = g.log_softmax_rows(x).unwrap();
        let pick = g.gather(y, &[(0, 2)]).unwrap();
        let s = g.sum(pick).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap().data();
        for (j, &v) in gx.iter().enumerate() {
            let want = if j == 2 { 0.75 } else { -0.25 };
            assert!((v - want).abs() < 1e-15, "j={j}: {v}");
        }
    }

    #[test]
    fn sum_adjoint_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_adjoint_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true).unwrap();
        let s = g.sigmoid(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar_sink() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_both_adjoints() {
        // f(x) = sum(x * x) + sum(3x)  =>  df/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -1.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let tri = g.scale(x, 3.0).unwrap();
        let a = g.sum(sq).unwrap();
        let b = g.sum(tri).unwrap();
        let f = g.add(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 1.0]);
    }

    #[test]
    fn max0_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 2.0, -1.0]), true).unwrap();
        let y = g.max0(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0, -2.0]), true).unwrap();
        let y = g.gelu(x).unwrap();
        let want = [0.0, 0.8411919906082768, -0.04540230591222494];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn grad_check_sum_sigmoid() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, -0.7, 1.9]);
        let err = grad_check(
            |g, ids| {
                let s = g.sigmoid(ids[0])?;
                g.sum(s)
            },
            &[x],
            &GradCheckOptions::with_eps(1e-5),
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, _ids| g.constant(Tensor::scalar(4.2)),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_eps_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(|g, ids| g.sum(ids[0]), &[x], &GradCheckOptions::with_eps(1e-2));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    /// Exercises every primitive in one scalar function.
    fn composite(g: &mut Graph<'_>, ids: &[NodeId]) -> crate::Result<NodeId> {
        let (x, w, b) = (ids[0], ids[1], ids[2]);
        let h = g.matmul(x, w)?; // 3x4
        let h = g.add(h, b)?;
        let n = g.layer_norm_rows(h, 1e-5)?;
        let n = g.mul(n, b)?;
        let r = g.max0(n)?;
        let t = g.transpose(h)?; // 4x3
        let sq = g.matmul(h, t)?; // 3x3
        let sq = g.scale(sq, 0.5)?;
        let p = g.causal_softmax_rows(sq)?;
        let pv = g.matmul(p, r)?; // 3x4
        let left = g.slice_cols(pv, 0, 2)?;
        let right = g.slice_cols(h, 2, 2)?;
        let cat = g.concat_cols(&[left, right])?;
        let ls = g.log_softmax_rows(cat)?;
        let picked = g.gather(ls, &[(0, 1), (1, 3), (2, 0)])?;
        let e = g.embedding(w, &[1, 0, 1])?;
        let es = g.sigmoid(e)?;
        let es = g.add_const(es, 0.5)?;
        let el = g.log(es)?;
        let ex = g.exp(picked)?;
        let lsig = g.log_sigmoid(ex)?;
        let neg = g.neg(lsig)?;
        let a = g.sum(neg)?;
        let gl = g.gelu(h)?;
        let gs = g.mean(gl)?;
        let m = g.mean(el)?;
        let m = g.add(m, gs)?;
        let d = g.sub(a, m)?;
        let s2 = g.sum(picked)?;
        g.add(d, s2)
    }

    fn composite_leaves(seed: u64) -> Vec<Tensor> {
        let f = |i: usize, k: u64| ((i as f64 + 1.0) * 0.7 + k as f64 * 1.3 + seed as f64).sin();
        vec![
            Tensor::matrix(3, 2, (0..6).map(|i| f(i, 1)).collect()).unwrap(),
            Tensor::matrix(2, 4, (0..8).map(|i| f(i, 2)).collect()).unwrap(),
            Tensor::vector((0..4).map(|i| f(i, 3)).collect()),
        ]
    }

    #[test]
    fn grad_check_covers_every_primitive() {
        for seed in 0..5 {
            let err =
                grad_check(composite, &composite_leaves(seed), &GradCheckOptions::default()).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn log_softmax_rows_normalize(vals in proptest::collection::vec(-30.0f64..30.0, 2..12)) {
            let mut g = Graph::new();
            let x = g.constant(row(&vals)).unwrap();
            let y = g.log_softmax_rows(x).unwrap();
            let total: f64 = g.value(y).data().iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn log_softmax_is_shift_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 2..12),
            c in -50.0f64..50.0,
        ) {
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let mut g = Graph::new();
            let x = g.constant(row(&vals)).unwrap();
            let xs = g.constant(row(&shifted)).unwrap();
            let y = g.log_softmax_rows(x).unwrap();
            let ys = g.log_softmax_rows(xs).unwrap();
            for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn random_composites_pass_grad_check(seed in 0u64..1000) {
            let err = grad_check(composite, &composite_leaves(seed), &GradCheckOptions::default()).unwrap();
            prop_assert!(err <= 1e-5, "{}", err);
        }
    }
}
