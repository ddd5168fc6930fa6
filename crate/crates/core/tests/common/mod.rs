//! Small dense architectures and fixtures shared by the integration tests.

#![allow(dead_code)]

use l2tkt::data::{LabeledSample, MaskedSample};
use l2tkt::diffcore::{ParamSet, Scalar, Tensor, Var, Vars};
use l2tkt::models::Architecture;
use l2tkt::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense encoder on `n×C×1×1` inputs: `x·w + b`, or with a hidden layer
/// `relu(x·w1 + b1)·w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub features: usize,
    pub hidden: Option<usize>,
}

impl Dense {
    pub fn linear(inputs: usize, features: usize) -> Self {
        Self {
            inputs,
            features,
            hidden: None,
        }
    }
}

fn uniform<F: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| F::from_f64(rng.random_range(-scale..scale)))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl Architecture for Dense {
    fn input_channels(&self) -> usize {
        self.inputs
    }

    fn feature_dim(&self) -> usize {
        self.features
    }

    fn with_input_channels(&self, channels: usize) -> Self {
        Self {
            inputs: channels,
            ..self.clone()
        }
    }

    fn input_weight(&self) -> (&'static str, usize) {
        (if self.hidden.is_some() { "w1" } else { "w" }, 0)
    }

    fn init_params<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<F>> {
        let mut p = ParamSet::new();
        let mut k = self.inputs;
        if let Some(h) = self.hidden {
            p.insert("w1", uniform(&[k, h], 1.0, rng))?;
            p.insert("b1", uniform(&[h], 0.5, rng))?;
            k = h;
        }
        p.insert("w", uniform(&[k, self.features], 1.0, rng))?;
        p.insert("b", uniform(&[self.features], 0.5, rng))?;
        Ok(p)
    }

    fn forward<'g, F: Scalar>(
        &self,
        params: &Vars<'g, F>,
        input: Var<'g, F>,
    ) -> Result<Var<'g, F>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.inputs {
            return Err(Error::Channels {
                expected: self.inputs,
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let n = shape[0];
        let get = |k: &str| {
            params
                .get(k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing {k}")))
        };
        let mut x = input.reshape(&[n, self.inputs * shape[2] * shape[3]]);
        if let Some(h) = self.hidden {
            x = (x.matmul(get("w1")?) + get("b1")?.reshape(&[1, h]).broadcast_rows(n)).relu();
        }
        Ok(x.matmul(get("w")?) + get("b")?.reshape(&[1, self.features]).broadcast_rows(n))
    }
}

/// Column tensor `n×c×1×1` from rows.
pub fn column_batch<F: Scalar>(rows: &[Vec<f64>]) -> Tensor<F> {
    let c = rows[0].len();
    Tensor::new(
        vec![rows.len(), c, 1, 1],
        rows.iter().flatten().map(|&v| F::from_f64(v)).collect(),
    )
    .unwrap()
}

pub fn random_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small synthetic splits for end-to-end training tests.
pub struct SmallData {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub aux: Vec<MaskedSample>,
}

pub fn small_synth(n: usize, n_aux: usize, seed: u64) -> SmallData {
    use l2tkt::data::{split, synth_generate, SplitFractions, SynthConfig};
    let out = synth_generate(&SynthConfig {
        n,
        n_aux,
        image_size: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let parts = split(&out.labeled, |s| s.id, SplitFractions::default(), seed).unwrap();
    SmallData {
        train: parts.train,
        val: parts.val,
        test: parts.test,
        aux: out.masked,
    }
}

pub fn small_encoder() -> l2tkt::models::EncoderConfig {
    l2tkt::models::EncoderConfig {
        input_channels: 3,
        block_widths: vec![4, 8],
        feature_dim: 8,
        image_size: 16,
    }
}
pub mod oracles;
