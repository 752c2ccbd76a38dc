//! Dense tensors, reverse-mode gradients, finite-difference checking and SGD.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, finite_difference_gradient, FiniteDifference, GradCheckReport,
};
pub use params::{sgd_step, GradientMap, NamedTensors, ParameterStore};
pub use tape::{adain_forward, channel_moments, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{cvar_objective, margin_xent_forward};

use crate::error::Result;

/// A differentiable computation that records itself onto a tape and returns
/// its scalar output node.
pub trait Objective {
    fn build(&self, tape: &mut Tape, params: &ParameterStore) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, params: &ParameterStore) -> Result<Var> {
        self(tape, params)
    }
}

/// Forward value of `graph` at `params`.
pub fn evaluate<O: Objective + ?Sized>(graph: &O, params: &ParameterStore) -> Result<f64> {
    let mut tape = Tape::new();
    let out = graph.build(&mut tape, params)?;
    scalar_output(&tape, out)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(crate::Error::shape("objective", &[], v.shape()));
    }
    Ok(v.item())
}

/// Loss value and `∂loss/∂p` for every parameter in `params`.
pub fn evaluate_with_gradients<O: Objective + ?Sized>(
    graph: &O,
    params: &ParameterStore,
) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let out = graph.build(&mut tape, params)?;
    let loss = scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    Ok((loss, tape.param_gradients(&grads, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, values: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::vector(values.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn quadratic(t: &mut Tape, p: &ParameterStore) -> Result<Var> {
        let x = t.param(p, "p")?;
        let sq = t.mul(x, x)?;
        t.sum(sq)
    }

    fn hinge(t: &mut Tape, p: &ParameterStore) -> Result<Var> {
        let x = t.param(p, "p")?;
        let x = t.sum(x)?;
        let neg = t.scale(x, -1.0)?;
        let m = t.shift(neg, 2.0)?;
        t.hinge(m)
    }

    #[test]
    fn quadratic_value_and_gradient() {
        let p = store("p", &[1.0, 2.0]);
        let (loss, g) = evaluate_with_gradients(&quadratic, &p).unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(g.get("p").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_empty_gradient_map() {
        let graph = |t: &mut Tape, _: &ParameterStore| t.constant_scalar(3.0);
        let (loss, g) = evaluate_with_gradients(&graph, &ParameterStore::new()).unwrap();
        assert_eq!(loss, 3.0);
        assert!(g.is_empty());
    }

    #[test]
    fn hinge_branches() {
        let (l, g) = evaluate_with_gradients(&hinge, &store("p", &[3.0])).unwrap();
        assert_eq!((l, g.get("p").unwrap().data()[0]), (0.0, 0.0));
        let (l, g) = evaluate_with_gradients(&hinge, &store("p", &[1.0])).unwrap();
        assert_eq!((l, g.get("p").unwrap().data()[0]), (1.0, -1.0));
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let graph = |t: &mut Tape, _: &ParameterStore| {
            let a = t.constant(Tensor::zeros(&[2]))?;
            let b = t.constant(Tensor::zeros(&[3]))?;
            let s = t.add(a, b)?;
            t.sum(s)
        };
        let err = evaluate(&graph, &ParameterStore::new()).unwrap_err();
        assert_eq!(err, crate::Error::shape("add", &[2], &[3]));
        assert!(alloc::format!("{err}").contains("add"));
    }

    #[test]
    fn unknown_parameter_is_reported() {
        let err = evaluate(&quadratic, &store("q", &[1.0])).unwrap_err();
        assert_eq!(err, crate::Error::UnknownParameter("p".into()));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let p = store("p", &[0.1, -0.7, 3.3]);
        let a = evaluate_with_gradients(&quadratic, &p).unwrap();
        let b = evaluate_with_gradients(&quadratic, &p).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let graph = |t: &mut Tape, _: &ParameterStore| {
            let a = t.constant(Tensor::full(&[1], 1e308))?;
            let b = t.scale(a, 10.0)?;
            t.sum(b)
        };
        assert_eq!(
            evaluate(&graph, &ParameterStore::new()),
            Err(crate::Error::NonFinite { op: "scale" })
        );
    }
}
