//! Dense `f64` tensors, a reverse-mode tape, parameter storage with Adam, and
//! a finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, InputReport};
pub use params::{Adam, AdamConfig, Bound, ParamId, ParamStore};
pub use tape::{logsumexp, softmax, Gradients, Tape, Var, NEG_MASK};
pub use tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// The crate's single PRNG: ChaCha with 8 rounds, seeded from a `u64`.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half-width of the uniform parameter initialization interval.
pub const INIT_RANGE: f64 = 0.08;

/// Uniform `[-INIT_RANGE, INIT_RANGE]` initialization.
pub fn uniform_init(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Uniform `[-scale, scale]` tensor, used by tests and fixtures.
pub fn uniform_tensor(shape: &[usize], scale: f64, rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn mul_product_rule() {
        let tape = Tape::new();
        let a = tape.var(Tensor::scalar(2.0));
        let b = tape.var(Tensor::scalar(3.0));
        let c = a.mul(b).unwrap();
        assert_eq!(c.value().item(), 6.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(a).item(), 3.0);
        assert_eq!(g.get(b).item(), 2.0);
    }

    #[test]
    fn logsumexp_of_equal_entries() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0, 0.0]));
        let y = x.logsumexp().unwrap();
        assert!((y.value().item() - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_matches_finite_difference() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.5));
        let y = x.tanh().unwrap();
        assert_eq!(y.value().item(), 0.5f64.tanh());
        let g = tape.backward(y).unwrap().get(x).item();
        let fd = central_difference(f64::tanh, 0.5);
        assert!(((g - fd) / fd).abs() < 1e-6, "{} vs {}", g, fd);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, -2.0, 4.0]));
        let y = x.sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.var(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let y = x.tanh().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss { .. }));
    }

    #[test]
    fn tape_is_single_use() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        let y = x.scale(2.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), NumericsError::TapeConsumed);
        assert_eq!(x.scale(3.0).unwrap_err(), NumericsError::TapeConsumed);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        match err {
            NumericsError::Shape { op, detail } => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3] x [2, 3]"), "{}", detail);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn topological_order_holds() {
        let tape = Tape::new();
        let x = tape.var(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.var(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let _ = x.matmul(w).unwrap().tanh().unwrap().softmax().unwrap().sum().unwrap();
        for (id, inputs) in tape.node_inputs().iter().enumerate() {
            assert!(inputs.iter().all(|&i| i < id));
        }
    }

    #[test]
    fn softmax_with_masked_entries_is_exactly_zero() {
        let t = Tensor::vector(vec![1.0, NEG_MASK, 2.0, NEG_MASK]);
        let p = softmax(&t);
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[3], 0.0);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seeded_init_is_in_range_and_reproducible() {
        let a = uniform_init(&[10, 10], &mut seeded_rng(7));
        let b = uniform_init(&[10, 10], &mut seeded_rng(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| x.abs() <= INIT_RANGE));
    }
}
