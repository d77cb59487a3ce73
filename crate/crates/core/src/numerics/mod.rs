//! Dense tensors, a gradient tape and plain SGD.

mod tape;
mod tensor;

pub use tape::{sigmoid, Tape, Var};
pub use tensor::{argmax, softmax, Tensor};

use crate::error::{Error, Result};

/// Vanilla stochastic gradient descent: `p ← p − lr · ∇p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::arg(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(Sgd { learning_rate })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&self, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::dim("sgd step", param.shape(), &[grad.len()]));
        }
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        for (p, g) in param.data_mut().iter_mut().zip(grad) {
            *p -= self.learning_rate * g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of `f` around `x`.
    fn finite_diff(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod), tape.value(a));

        let ones = tape.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let prod = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random_tensor(&mut rng, &[3, 4]);
        let b0 = random_tensor(&mut rng, &[4, 2]);
        let eval = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
            let p = t.matmul(a, b).unwrap();
            let s = t.sum(p);
            t.value(s).item().unwrap()
        };
        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(b0.clone());
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let fd_a = finite_diff(&a0, |x| eval(x, &b0));
        let fd_b = finite_diff(&b0, |x| eval(&a0, x));
        for (g, f) in tape.grad(a).unwrap().iter().zip(&fd_a) {
            assert!(rel_err(*g, *f) < 1e-6);
        }
        for (g, f) in tape.grad(b).unwrap().iter().zip(&fd_b) {
            assert!(rel_err(*g, *f) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let confident = tape.constant(Tensor::from_rows(&[[0.0, 1e4, 0.0]]).unwrap());
        let l = tape.cross_entropy(confident, &[1]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        let logits = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let l = tape.cross_entropy(logits, &[2]).unwrap();
        // -ln(0.6652409557748219)
        assert!((tape.value(l).item().unwrap() - 0.4076059644443803).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn elementwise_primitives() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let ones = tape.constant(Tensor::filled(&[3], 1.0));
        let gated = tape.mul(r, ones).unwrap();
        assert_eq!(tape.value(gated), tape.value(r));

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item().unwrap(), 0.5);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 0.0);

        let c = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stop_grad_blocks_gradient_exactly() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![0.3, -1.0]));
        let b = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sa = tape.stop_grad(a);
        assert_eq!(tape.value(sa), tape.value(a));
        let l = tape.mse(sa, b).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Argument(_))));
    }

    #[test]
    fn two_layer_mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[5, 4]);
        let params = [
            random_tensor(&mut rng, &[6, 4]),
            random_tensor(&mut rng, &[6]),
            random_tensor(&mut rng, &[3, 6]),
            random_tensor(&mut rng, &[3]),
        ];
        let labels = [0, 2, 1, 1, 0];
        let forward = |t: &mut Tape, vars: &[Var]| {
            let xv = t.constant(x.clone());
            let h = t.linear(xv, vars[0], Some(vars[1])).unwrap();
            let h = t.tanh(h);
            let o = t.linear(h, vars[2], Some(vars[3])).unwrap();
            t.cross_entropy(o, &labels).unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = forward(&mut tape, &vars);
        tape.backward(loss).unwrap();
        for (pi, p) in params.iter().enumerate() {
            let fd = finite_diff(p, |perturbed| {
                let mut t = Tape::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| t.constant(if j == pi { perturbed.clone() } else { q.clone() }))
                    .collect();
                let l = forward(&mut t, &vars);
                t.value(l).item().unwrap()
            });
            for (g, f) in tape.grad(vars[pi]).unwrap().iter().zip(&fd) {
                assert!(rel_err(*g, *f) < 1e-4, "param {pi}: {g} vs {f}");
            }
        }
    }

    #[test]
    fn sgd_step_moves_by_lr_times_grad() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        Sgd::new(0.5).unwrap().step(&mut p, &[2.0, 4.0]).unwrap();
        assert_eq!(p.data(), &[0.0, -4.0]);
        assert!(Sgd::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sgd_with_zero_rate_is_bit_identical(
            p in prop::collection::vec(-1e3f64..1e3, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = p.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut t = Tensor::vector(p.clone());
            Sgd::new(0.0).unwrap().step(&mut t, &g).unwrap();
            prop_assert!(t.data().iter().zip(&p).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
