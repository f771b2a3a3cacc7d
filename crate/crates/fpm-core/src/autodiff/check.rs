//! Finite-difference validation of the backward pass.

use super::{DiffGraph, NodeId, Tensor};
use crate::error::{FpmError, Result};

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-12;

/// Compares the backward pass of the scalar function wired by `f` against
/// central finite differences at `x`, componentwise over every real degree
/// of freedom, and returns the worst relative error with denominator
/// max(|analytic|, |numeric|, 1e-12).
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// real scalar loss node. Any extra leaves `f` creates are held fixed.
pub fn check_gradient<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut DiffGraph, NodeId) -> Result<NodeId>,
{
    let mut graph = DiffGraph::new();
    let x_id = graph.leaf(x.clone());
    let loss = f(&mut graph, x_id)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(x_id)
        .ok_or_else(|| FpmError::Domain("loss does not depend on x".into()))?
        .clone();

    let mut worst = 0.0f64;
    for i in 0..x.dof() {
        let base = x.get_dof(i);

        let mut plus = x.clone();
        plus.set_dof(i, base + STEP);
        graph.set_leaf(x_id, plus)?;
        graph.recompute()?;
        let lp = scalar_value(&graph, loss);

        let mut minus = x.clone();
        minus.set_dof(i, base - STEP);
        graph.set_leaf(x_id, minus)?;
        graph.recompute()?;
        let lm = scalar_value(&graph, loss);

        let numeric = (lp - lm) / (2.0 * STEP);
        let a = analytic.get_dof(i);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        if err > worst {
            worst = err;
        }
    }

    graph.set_leaf(x_id, x.clone())?;
    graph.recompute()?;
    Ok(worst)
}

fn scalar_value(graph: &DiffGraph, id: NodeId) -> f64 {
    graph.value(id).as_real()[ndarray::IxDyn(&[])]
}
