//! Dense tensors, an eager reverse-mode graph over the handful of operators
//! the model needs, and a central-difference gradient checker.

mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Adjoints, Graph, Var, LOG_EPS};
pub use param::{Param, ParamStore};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use crate::error::Result;

/// A scalar-valued computation over the parameters in a [`ParamStore`].
///
/// Inputs other than parameters are captured by the implementor and recorded
/// as constants.
pub trait Objective {
    fn build(&self, graph: &mut Graph, params: &ParamStore) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    fn build(&self, graph: &mut Graph, params: &ParamStore) -> Result<Var> {
        self(graph, params)
    }
}

pub fn evaluate(objective: &impl Objective, params: &ParamStore) -> Result<Tensor> {
    let mut graph = Graph::new();
    let out = objective.build(&mut graph, params)?;
    Ok(graph.value(out).clone())
}

/// Exact gradients of a scalar objective with respect to the named
/// parameters. Parameters the objective never touches get a zero gradient.
pub fn gradients(
    objective: &impl Objective,
    params: &ParamStore,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor>> {
    let mut graph = Graph::new();
    let root = objective.build(&mut graph, params)?;
    let adjoints = graph.backward(root)?;
    let mut by_index = graph.param_grads(&adjoints);
    wrt.iter()
        .map(|&name| {
            let idx = params.position(name)?;
            let g = by_index
                .remove(&idx)
                .unwrap_or_else(|| Tensor::zeros(params.by_index(idx).value().shape()));
            Ok((name.to_string(), g))
        })
        .collect()
}

/// Evaluates the objective and stores its gradient in every unfrozen
/// parameter. Frozen parameters get a zero gradient. Returns the loss value.
pub fn backprop(objective: &impl Objective, params: &mut ParamStore) -> Result<f64> {
    let mut graph = Graph::new();
    let root = objective.build(&mut graph, params)?;
    store_gradients(&graph, root, params)?;
    Ok(graph.value(root).item())
}

/// Back-propagates from `root` of an already built graph and writes the
/// result into the store, as [`backprop`] does.
pub fn store_gradients(graph: &Graph, root: Var, params: &mut ParamStore) -> Result<()> {
    let adjoints = graph.backward(root)?;
    let mut by_index = graph.param_grads(&adjoints);
    for i in 0..params.len() {
        let p = params.by_index_mut(i);
        let g = match by_index.remove(&i) {
            Some(g) if !p.is_frozen() => g,
            _ => Tensor::zeros(p.value().shape()),
        };
        p.set_grad(g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
