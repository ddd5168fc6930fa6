//! Differentiable computation: tensors, parameter sets, a reverse-mode graph
//! with higher-order support, and meta-gradients through a descent step.

mod graph;
mod meta;
mod params;
mod scalar;
mod tensor;

pub use graph::{Graph, Var};
pub use meta::{
    approx_grad_through_update, grad, grad_through_update, grad_through_update_on, meta_gradient,
    Evaluated, MetaGradMode, MetaGradient,
};
pub use params::{GradSet, ParamSet, Vars};
pub use scalar::Scalar;
pub use tensor::{col2im, im2col, ConvGeom, Tensor};

/// Central finite-difference gradient of a plain function of a parameter
/// set; used as an oracle for the reverse-mode routines.
pub fn finite_difference<F: Scalar>(
    f: impl Fn(&ParamSet<F>) -> crate::Result<F>,
    params: &ParamSet<F>,
    step: f64,
) -> crate::Result<GradSet<F>> {
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let mut g = Tensor::zeros(t.shape());
        for i in 0..t.len() {
            let probe = |delta: f64| {
                let shifted = params.map_entries(|k, v| {
                    let mut v = v.clone();
                    if k == name {
                        v.data_mut()[i] += F::from_f64(delta);
                    }
                    v
                });
                f(&shifted)
            };
            let (hi, lo) = (probe(step)?, probe(-step)?);
            g.data_mut()[i] = F::from_f64((hi.to_f64() - lo.to_f64()) / (2.0 * step));
        }
        entries.push((name.to_string(), g));
    }
    Ok(entries.into_iter().collect())
}

/// Largest relative error between two gradients, with absolute values
/// below `floor` compared absolutely.
pub fn max_relative_error<F: Scalar>(a: &GradSet<F>, b: &GradSet<F>, floor: f64) -> f64 {
    a.iter()
        .flat_map(|(name, ta)| {
            let tb = b.get(name).expect("gradient names differ");
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| {
                let (x, y) = (x.to_f64(), y.to_f64());
                (x - y).abs() / x.abs().max(y.abs()).max(floor)
            })
        })
        .fold(0.0, f64::max)
}
