use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

/// Gradient with the same names and shapes as the [`ParamSet`] it was taken
/// against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradSet<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

/// Graph leaves for a parameter set, keyed like the set itself.
pub type Vars<'g, F> = BTreeMap<String, Var<'g, F>>;

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts an entry, rejecting non-finite values and duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if !value.all_finite() {
            return Err(Error::NonFinite { entry: name });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// The first entry containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
    }

    /// Registers every entry as a differentiable leaf of `graph`.
    pub fn leaves<'g>(&self, graph: &'g Graph<F>) -> Vars<'g, F> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect()
    }

    /// Registers every entry as a constant of `graph`.
    pub fn constants<'g>(&self, graph: &'g Graph<F>) -> Vars<'g, F> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect()
    }

    /// Whether both sets have identical names and shapes.
    pub fn congruent(&self, other: &ParamSet<F>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// One plain gradient-descent step: `self − lr · grad`.
    pub fn descend(&self, grad: &GradSet<F>, lr: F) -> Result<ParamSet<F>> {
        self.check_congruent(grad)?;
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let g = &grad.entries[k];
                let next = v.zip_map(g, |p, d| p - lr * d);
                if !next.all_finite() {
                    return Err(Error::NonFinite { entry: k.clone() });
                }
                Ok((k.clone(), next))
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet { entries })
    }

    fn check_congruent(&self, grad: &GradSet<F>) -> Result<()> {
        let same = self.entries.len() == grad.entries.len()
            && self
                .entries
                .iter()
                .zip(&grad.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape());
        if same {
            Ok(())
        } else {
            Err(Error::Shape {
                context: "parameter/gradient congruence".into(),
                expected: format!("{:?}", self.names().collect::<Vec<_>>()),
                actual: format!("{:?}", grad.names().collect::<Vec<_>>()),
            })
        }
    }

    /// Largest element-wise absolute difference. Requires congruent sets.
    pub fn max_abs_diff(&self, other: &ParamSet<F>) -> f64 {
        assert!(self.congruent(other), "max_abs_diff on incongruent sets");
        self.entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Exact bit equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_identical(&self, other: &ParamSet<F>) -> bool {
        self.congruent(other)
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .flat_map(|(a, b)| a.data().iter().zip(b.data()))
                .all(|(&x, &y)| x.to_f64().to_bits() == y.to_f64().to_bits())
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet<F>) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone())?;
        }
        Ok(())
    }

    pub(crate) fn map_entries(&self, f: impl Fn(&str, &Tensor<F>) -> Tensor<F>) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        }
    }
}

impl<F: Scalar> FromIterator<(String, Tensor<F>)> for ParamSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

impl<F: Scalar> GradSet<F> {
    /// Builds a gradient from graph variables, validating congruence with
    /// `params` and finiteness.
    pub(crate) fn from_vars(params: &ParamSet<F>, grads: &[Var<'_, F>]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for ((name, p), g) in params.iter().zip(grads) {
            let value = g.value().reshape(p.shape());
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    entry: name.to_string(),
                });
            }
            entries.insert(name.to_string(), value);
        }
        Ok(GradSet { entries })
    }

    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        GradSet {
            entries: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|&v| v == F::ZERO))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// `a·self + b·other`, entry-wise.
    pub fn combine(&self, a: F, other: &GradSet<F>, b: F) -> GradSet<F> {
        GradSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.zip_map(&other.entries[k], |x, y| a * x + b * y),
                    )
                })
                .collect(),
        }
    }

    pub fn scale(&self, a: F) -> GradSet<F> {
        GradSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| a * x)))
                .collect(),
        }
    }
}

impl<F: Scalar> FromIterator<(String, Tensor<F>)> for GradSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        GradSet {
            entries: iter.into_iter().collect(),
        }
    }
}
