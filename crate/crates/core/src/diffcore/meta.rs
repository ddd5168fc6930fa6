//! Gradients of scalar objectives over parameter sets, including the
//! meta-gradient of an outer objective through one inner descent step.

use super::{GradSet, Graph, ParamSet, Scalar, Var, Vars};
use crate::error::{Error, Result};

/// Objective value with its gradient.
#[derive(Clone, Debug)]
pub struct Evaluated<F> {
    pub value: F,
    pub grad: GradSet<F>,
}

/// Result of [`grad_through_update`].
#[derive(Clone, Debug)]
pub struct MetaGradient<F> {
    /// Derivative of the outer objective with respect to the outer parameters.
    pub grad: GradSet<F>,
    pub inner_value: F,
    pub outer_value: F,
}

/// How the meta-gradient through the inner step is obtained.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Exact second-order derivative.
    SecondOrder,
    /// Central finite difference of first-order gradients along the outer
    /// gradient direction; needs no second derivatives.
    FiniteDifference {
        /// Step size is `scale / ‖∇ outer‖`.
        scale: f64,
    },
}

fn checked<F: Scalar>(v: Var<'_, F>, entry: &str) -> Result<F> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            entry: entry.to_string(),
        })
    }
}

fn check_params<F: Scalar>(params: &ParamSet<F>) -> Result<()> {
    match params.first_non_finite() {
        Some(name) => Err(Error::NonFinite {
            entry: name.to_string(),
        }),
        None => Ok(()),
    }
}

/// Reverse-mode gradient of `objective` at `params`.
pub fn grad<F, Obj>(objective: Obj, params: &ParamSet<F>) -> Result<Evaluated<F>>
where
    F: Scalar,
    Obj: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    check_params(params)?;
    let graph = Graph::first_order();
    let vars = params.leaves(&graph);
    let out = objective(&graph, &vars)?;
    let value = checked(out, "objective")?;
    let wrt: Vec<_> = vars.values().copied().collect();
    let grads = graph.grad(out, &wrt)?;
    Ok(Evaluated {
        value,
        grad: GradSet::from_vars(params, &grads)?,
    })
}

/// Derivative with respect to `outer_params` of
/// `outer(inner_params − lr · ∂inner(outer_params, inner_params)/∂inner_params)`.
///
/// Neither parameter set is modified.
pub fn grad_through_update<F, Inner, Outer>(
    inner: Inner,
    outer: Outer,
    outer_params: &ParamSet<F>,
    inner_params: &ParamSet<F>,
    lr: F,
) -> Result<MetaGradient<F>>
where
    F: Scalar,
    Inner: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
    Outer: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    grad_through_update_on(&Graph::new(), inner, outer, outer_params, inner_params, lr)
}

/// [`grad_through_update`] on a caller-supplied graph, which must support
/// higher-order differentiation.
pub fn grad_through_update_on<F, Inner, Outer>(
    graph: &Graph<F>,
    inner: Inner,
    outer: Outer,
    outer_params: &ParamSet<F>,
    inner_params: &ParamSet<F>,
    lr: F,
) -> Result<MetaGradient<F>>
where
    F: Scalar,
    Inner: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
    Outer: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    if !graph.supports_higher_order() {
        return Err(Error::SecondOrderUnavailable);
    }
    check_params(outer_params)?;
    check_params(inner_params)?;

    let t = outer_params.leaves(graph);
    let s = inner_params.leaves(graph);
    let inner_out = inner(graph, &t, &s)?;
    let inner_value = checked(inner_out, "inner objective")?;

    let s_list: Vec<_> = s.values().copied().collect();
    let gs = graph.grad(inner_out, &s_list)?;
    let virtual_params: Vars<'_, F> = s
        .iter()
        .zip(gs)
        .map(|((name, &sv), gv)| (name.clone(), sv - gv.scale(lr)))
        .collect();

    let outer_out = outer(graph, &virtual_params)?;
    let outer_value = checked(outer_out, "outer objective")?;
    let t_list: Vec<_> = t.values().copied().collect();
    let gt = graph.grad(outer_out, &t_list)?;
    Ok(MetaGradient {
        grad: GradSet::from_vars(outer_params, &gt)?,
        inner_value,
        outer_value,
    })
}

/// First-order substitute for [`grad_through_update`].
///
/// The exact meta-gradient is `−lr · (∂²inner/∂outer∂inner) · v` with
/// `v = ∇outer` at the virtual parameters. The mixed-derivative product is
/// replaced by a central difference of `∂inner/∂outer_params` at
/// `inner_params ± ε·v`.
pub fn approx_grad_through_update<F, Inner, Outer>(
    inner: Inner,
    outer: Outer,
    outer_params: &ParamSet<F>,
    inner_params: &ParamSet<F>,
    lr: F,
    scale: f64,
) -> Result<MetaGradient<F>>
where
    F: Scalar,
    Inner: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
    Outer: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    check_params(outer_params)?;
    check_params(inner_params)?;

    // ∂inner/∂outer_params (`wrt_outer`) or ∂inner/∂inner_params at the given point.
    let inner_grad = |at: &ParamSet<F>, wrt_outer: bool| -> Result<(F, GradSet<F>)> {
        let graph = Graph::first_order();
        let t = outer_params.leaves(&graph);
        let s = at.leaves(&graph);
        let out = inner(&graph, &t, &s)?;
        let value = checked(out, "inner objective")?;
        let (set, vars) = if wrt_outer {
            (outer_params, &t)
        } else {
            (at, &s)
        };
        let wrt: Vec<_> = vars.values().copied().collect();
        let grads = graph.grad(out, &wrt)?;
        Ok((value, GradSet::from_vars(set, &grads)?))
    };

    let (inner_value, gs) = inner_grad(inner_params, false)?;
    let virtual_params = inner_params.descend(&gs, lr)?;
    let outer_eval = grad(&outer, &virtual_params)?;
    let direction = &outer_eval.grad;

    let norm = direction
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || lr == F::ZERO {
        return Ok(MetaGradient {
            grad: GradSet::zeros_like(outer_params),
            inner_value,
            outer_value: outer_eval.value,
        });
    }
    let eps = scale / norm;
    let plus = inner_params.descend(direction, F::from_f64(-eps))?;
    let minus = inner_params.descend(direction, F::from_f64(eps))?;
    let (_, g_plus) = inner_grad(&plus, true)?;
    let (_, g_minus) = inner_grad(&minus, true)?;
    let k = -lr.to_f64() / (2.0 * eps);
    Ok(MetaGradient {
        grad: g_plus.combine(F::from_f64(k), &g_minus, F::from_f64(-k)),
        inner_value,
        outer_value: outer_eval.value,
    })
}

/// Dispatches on `mode`.
pub fn meta_gradient<F, Inner, Outer>(
    mode: MetaGradMode,
    inner: Inner,
    outer: Outer,
    outer_params: &ParamSet<F>,
    inner_params: &ParamSet<F>,
    lr: F,
) -> Result<MetaGradient<F>>
where
    F: Scalar,
    Inner: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
    Outer: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    match mode {
        MetaGradMode::SecondOrder => {
            grad_through_update(inner, outer, outer_params, inner_params, lr)
        }
        MetaGradMode::FiniteDifference { scale } => {
            approx_grad_through_update(inner, outer, outer_params, inner_params, lr, scale)
        }
    }
}
