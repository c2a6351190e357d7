//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, ParamCheck};
pub use params::{AdamConfig, Bound, Parameter, ParameterStore};
pub use tape::{elu, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Primitive identifiers for dynamic dispatch through [`apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Mean { axis: usize },
    Sum { axis: usize },
    Softmax { axis: usize },
    Sigmoid,
    Exp,
    Log,
    LeakyRelu { slope: f64 },
    Elu,
    Sqrt,
    Broadcast { shape: Vec<usize> },
}

/// Applies `op` to `inputs`, recording it when any input carries gradients.
pub fn apply(tape: &mut Tape, op: &Primitive, inputs: &[Var]) -> Result<Var> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::Shape(format!("{op:?} takes {n} inputs, got {}", inputs.len())))
        }
    };
    match op {
        Primitive::Concat { axis } => tape.concat(inputs, *axis),
        Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match op {
                Primitive::MatMul => tape.matmul(a, b),
                Primitive::Add => tape.add(a, b),
                Primitive::Sub => tape.sub(a, b),
                _ => tape.mul(a, b),
            }
        }
        unary => {
            arity(1)?;
            let a = inputs[0];
            match unary {
                Primitive::ScalarMul(s) => tape.scale(a, *s),
                Primitive::Slice { axis, start, len } => tape.slice(a, *axis, *start, *len),
                Primitive::Transpose => tape.transpose(a),
                Primitive::Mean { axis } => tape.mean(a, *axis),
                Primitive::Sum { axis } => tape.sum(a, *axis),
                Primitive::Softmax { axis } => tape.softmax(a, *axis),
                Primitive::Sigmoid => tape.sigmoid(a),
                Primitive::Exp => tape.exp(a),
                Primitive::Log => tape.log(a),
                Primitive::LeakyRelu { slope } => tape.leaky_relu(a, *slope),
                Primitive::Elu => tape.elu(a),
                Primitive::Sqrt => tape.sqrt(a),
                Primitive::Broadcast { shape } => tape.broadcast(a, shape),
                _ => unreachable!("binary primitives handled above"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let y = apply(&mut tape, &Primitive::Softmax { axis: 1 }, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = apply(&mut tape, &Primitive::Sigmoid, &[x]).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn matmul_row_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 1], 1.0));
        let c = apply(&mut tape, &Primitive::MatMul, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let neg = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(tape.log(neg), Err(Error::Domain(_))));
        assert!(matches!(tape.sqrt(neg), Err(Error::Domain(_))));
        let z = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.log(z), Err(Error::Domain(_))));
    }

    #[test]
    fn quadratic_and_sigmoid_derivatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let err = grad_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.2))),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.exp(x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let _ = tape.sum_all(z).unwrap();
        for (id, inputs) in tape.entries() {
            assert!(inputs.iter().all(|&i| i < id));
        }
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
        assert!(tape.entries().is_empty());
    }
}
