//! Recorded computation graph with reverse-mode differentiation.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::ops::{primitive_backward, primitive_forward, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum NodeKind<T> {
    Constant,
    Param,
    Op(Op<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    kind: NodeKind<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Append-only record of primitive operations.
///
/// Node inputs always refer to earlier nodes, so the graph is acyclic by
/// construction. A tape is meant to stay on one thread; independent samples
/// use independent tapes.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Size of a recorded graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub nodes: usize,
    /// Total number of scalars held by node values.
    pub scalars: usize,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `param`; parameters the output does not depend on get zeros.
    pub fn get(&self, param: Var) -> Option<&Tensor<T>> {
        self.grads.get(&param.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (Var(k), v))
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifferenceReport {
    pub checked: usize,
    /// Flat parameter indices skipped because a perturbation crossed a kink
    /// (relu, abs, max-over-window winner change).
    pub excluded: Vec<usize>,
    /// Whether the unperturbed point sits exactly on a kink of some recorded op.
    pub base_at_kink: bool,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Magnitudes below this are treated as this value when forming relative errors.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn footprint(&self) -> Footprint {
        let nodes = self.nodes.borrow();
        Footprint { nodes: nodes.len(), scalars: nodes.iter().map(|n| n.value.numel()).sum() }
    }

    fn push(&self, kind: NodeKind<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind, inputs, value });
        Var(nodes.len() - 1)
    }

    fn recorded_values(&self) -> Vec<Tensor<T>> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    /// Re-execute every recorded op from the leaves, optionally substituting
    /// leaf values. Returns the value of every node.
    pub fn replay(&self, overrides: &HashMap<usize, Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let v = match &node.kind {
                NodeKind::Constant | NodeKind::Param => overrides.get(&i).cloned().unwrap_or_else(|| node.value.clone()),
                NodeKind::Op(op) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &values[j]).collect();
                    primitive_forward(op, &inputs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Whether replaying the tape reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay(&HashMap::new())?;
        let recorded = self.recorded_values();
        Ok(replayed.iter().zip(&recorded).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_eq(*y))
        }))
    }

    /// Reverse traversal from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::NonScalarOutput { node: output.0, shape: out.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        for i in (0..=output.0).rev() {
            let NodeKind::Op(op) = &nodes[i].kind else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = nodes[i].inputs.iter().map(|&j| &nodes[j].value).collect();
            let input_grads = primitive_backward(op, &inputs, &nodes[i].value, &g)?;
            for (&j, gj) in nodes[i].inputs.iter().zip(input_grads) {
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.zip_map(&gj, |a, b| a + b)?,
                    None => gj,
                });
            }
        }
        let mut out_grads = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Param) {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out_grads.insert(i, g);
            }
        }
        Ok(Gradients { grads: out_grads })
    }

    fn kink_state(&self, values: &[Tensor<T>]) -> (Vec<Option<Vec<i64>>>, bool) {
        let nodes = self.nodes.borrow();
        let mut at_kink = false;
        let sigs = nodes
            .iter()
            .map(|node| match &node.kind {
                NodeKind::Op(op) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &values[j]).collect();
                    at_kink |= op.at_kink(&inputs);
                    op.kink_signature(&inputs)
                }
                _ => None,
            })
            .collect();
        (sigs, at_kink)
    }

    /// Compare the reverse-mode gradient of `output` with respect to `param`
    /// against central differences with step `h`. Entries whose perturbation
    /// moves any recorded op across a kink are excluded and listed.
    pub fn finite_difference_check(&self, output: Var, param: Var, h: f64, tol: f64) -> Result<FiniteDifferenceReport> {
        if !(h > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        let grads = self.backward(output)?;
        let base_param = self.value(&param);
        let analytic = grads
            .get(param)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("node {} is not a parameter", param.0)))?;
        let base_values = self.replay(&HashMap::new())?;
        let (base_sigs, base_at_kink) = self.kink_state(&base_values);
        let step = T::lit(h);
        let mut report = FiniteDifferenceReport {
            checked: 0,
            excluded: Vec::new(),
            base_at_kink,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            tolerance: tol,
            passed: true,
        };
        for i in 0..base_param.numel() {
            let mut evals = [0.0f64; 2];
            let mut crossed = false;
            for (slot, sign) in [(0usize, T::one()), (1, -T::one())] {
                let mut data = base_param.to_vec();
                data[i] = data[i] + sign * step;
                let perturbed = Tensor::new(base_param.shape().to_vec(), data)?;
                let values = self.replay(&HashMap::from([(param.0, perturbed)]))?;
                let (sigs, _) = self.kink_state(&values);
                crossed |= sigs != base_sigs;
                evals[slot] = values[output.0].item()?.as_f64();
            }
            if crossed {
                report.excluded.push(i);
                continue;
            }
            let numeric = (evals[0] - evals[1]) / (2.0 * h);
            let a = analytic.data()[i].as_f64();
            let abs_err = (a - numeric).abs();
            let rel = abs_err / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs_err);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        report.passed = report.max_rel_error <= tol;
        Ok(report)
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Scalars are f32/f64; equal values or both NaN count as identical.
        self == other || (self.is_nan() && other.is_nan())
    }
}

impl<T: Scalar> Backend<T> for Tape<T> {
    type Value = Var;

    fn constant(&self, t: Tensor<T>) -> Var {
        self.push(NodeKind::Constant, Vec::new(), t)
    }

    fn param(&self, t: Tensor<T>) -> Var {
        self.push(NodeKind::Param, Vec::new(), t)
    }

    fn value(&self, v: &Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn apply(&self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            primitive_forward(&op, &values)?
        };
        Ok(self.push(NodeKind::Op(op), inputs.iter().map(|v| v.0).collect(), value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_is_zero_when_inactive_and_at_zero() {
        for x0 in [-1.0, 0.0] {
            let tape = Tape::<f64>::new();
            let x = tape.param(Tensor::scalar(x0));
            let y = tape.relu(&x).unwrap();
            assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let v = tape.param(Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]));
        let s = tape.softmax(&v).unwrap();
        let total = tape.sum(&s).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn unreached_parameters_get_zeros() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.param(Tensor::from_vec(vec![5.0]));
        let y = tape.sum(&a).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(&a).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn quadratic_passes_finite_differences() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(vec![0.7, -1.3, 2.0]));
        let sq = tape.powi(&a, 2).unwrap();
        let y = tape.sum(&sq).unwrap();
        let report = tape.finite_difference_check(y, a, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn kink_is_flagged_and_excluded() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(vec![0.0, 1.5]));
        let r = tape.relu(&a).unwrap();
        let y = tape.sum(&r).unwrap();
        let report = tape.finite_difference_check(y, a, 1e-5, 1e-4).unwrap();
        assert!(report.base_at_kink);
        assert_eq!(report.excluded, vec![0]);
        assert!(report.passed);
    }

    #[test]
    fn replay_is_bit_identical() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let s = tape.sigmoid(&a).unwrap();
        let t = tape.tanh(&s).unwrap();
        let _ = tape.l2_norm_sq(&t).unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
