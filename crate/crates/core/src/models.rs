//! Encoders, the student classifier and the mask-conditioned teacher.
//!
//! A model's parameters live in a single [`ParamSet`]: encoder entries are
//! prefixed `enc.`, the student head is `head.w` (`D×1`) and `head.b` (`[1]`).

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, MASK_CHANNELS};
use crate::diffcore::{ConvGeom, Graph, ParamSet, Scalar, Tensor, Var, Vars};
use crate::error::{Error, Result};

pub const ENC_PREFIX: &str = "enc.";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// A differentiable feature extractor with a fixed parameter layout.
pub trait Architecture:
    Clone + Debug + PartialEq + Send + Sync + Serialize + DeserializeOwned
{
    fn input_channels(&self) -> usize;

    fn feature_dim(&self) -> usize;

    /// The same architecture with a different input channel count.
    fn with_input_channels(&self, channels: usize) -> Self;

    /// Name of the first-layer weight and the axis holding input channels.
    fn input_weight(&self) -> (&'static str, usize);

    /// Freshly initialized encoder parameters, without the `enc.` prefix.
    fn init_params<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<F>>;

    /// Maps an `n×C×H×W` batch to `n×D` features. `params` holds this
    /// encoder's entries under their unprefixed names.
    fn forward<'g, F: Scalar>(&self, params: &Vars<'g, F>, input: Var<'g, F>)
        -> Result<Var<'g, F>>;
}

/// The reference convolutional encoder: stride-2 3×3 conv blocks with ReLU,
/// global average pooling and a linear projection to `feature_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub block_widths: Vec<usize>,
    pub feature_dim: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            block_widths: vec![8, 16, 32],
            feature_dim: 32,
            image_size: 32,
        }
    }
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("encoder needs at least one input channel"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config(format!(
                "feature_dim must be ≥ 2, got {}",
                self.feature_dim
            )));
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::config(
                "block widths must be a nonempty list of positive integers",
            ));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        Ok(())
    }

    fn conv_names(i: usize) -> (String, String) {
        (format!("conv{i}.w"), format!("conv{i}.b"))
    }
}

fn he_normal<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| F::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Reorders `n×C×H×W` into the `(n·H·W)×C` activation layout.
pub fn nchw_to_rows<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, c, h, w] = dims4(t)?;
    let src = t.data();
    let mut out = vec![F::ZERO; src.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out[(b * h * w + p) * c + ch] = src[(b * c + ch) * h * w + p];
            }
        }
    }
    Tensor::new(vec![n * h * w, c], out)
}

fn dims4<F: Scalar>(t: &Tensor<F>) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape()).map_err(|_| Error::Shape {
        context: "image batch".into(),
        expected: "n×C×H×W".into(),
        actual: format!("{:?}", t.shape()),
    })
}

/// `n × (n·hw)` matrix averaging each image's `hw` activation rows.
fn pooling_matrix<F: Scalar>(n: usize, hw: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; n * n * hw];
    let v = F::from_f64(1.0 / hw as f64);
    for b in 0..n {
        data[b * n * hw + b * hw..b * n * hw + (b + 1) * hw].fill(v);
    }
    Tensor::new(vec![n, n * hw], data).expect("pooling shape")
}

fn param<'g, F: Scalar>(params: &Vars<'g, F>, name: &str) -> Result<Var<'g, F>> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
}

/// Adds a `[c]` bias to every row of an `m×c` matrix.
fn add_bias<'g, F: Scalar>(x: Var<'g, F>, b: Var<'g, F>) -> Var<'g, F> {
    let (m, c) = (x.shape()[0], x.shape()[1]);
    x + b.reshape(&[1, c]).broadcast_rows(m)
}

impl Architecture for EncoderConfig {
    fn input_channels(&self) -> usize {
        self.input_channels
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn with_input_channels(&self, channels: usize) -> Self {
        Self {
            input_channels: channels,
            ..self.clone()
        }
    }

    fn input_weight(&self) -> (&'static str, usize) {
        ("conv0.w", 2)
    }

    fn init_params<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<F>> {
        self.validate()?;
        let mut p = ParamSet::new();
        let mut cin = self.input_channels;
        for (i, &cout) in self.block_widths.iter().enumerate() {
            let (w, b) = Self::conv_names(i);
            p.insert(
                w,
                he_normal(&[KERNEL, KERNEL, cin, cout], KERNEL * KERNEL * cin, rng),
            )?;
            p.insert(b, Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        p.insert("fc.w", he_normal(&[cin, self.feature_dim], cin, rng))?;
        p.insert("fc.b", Tensor::zeros(&[self.feature_dim]))?;
        Ok(p)
    }

    fn forward<'g, F: Scalar>(
        &self,
        params: &Vars<'g, F>,
        input: Var<'g, F>,
    ) -> Result<Var<'g, F>> {
        let [n, c, h, w] = dims4(&input.value())?;
        check_channels(self.input_channels, c)?;
        if (h, w) != (self.image_size, self.image_size) {
            return Err(Error::Shape {
                context: "encoder input size".into(),
                expected: format!("{0}×{0}", self.image_size),
                actual: format!("{h}×{w}"),
            });
        }
        let graph = input.graph();
        // Inputs are constants, so the layout change happens outside the graph.
        let mut x = graph.constant(nchw_to_rows(&input.value())?);
        let (mut h, mut w, mut cin) = (h, w, c);
        for (i, &cout) in self.block_widths.iter().enumerate() {
            let geom = ConvGeom {
                n,
                h,
                w,
                c: cin,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let (wn, bn) = Self::conv_names(i);
            let weight = param(params, &wn)?.reshape(&[KERNEL * KERNEL * cin, cout]);
            x = add_bias(x.im2col(geom).matmul(weight), param(params, &bn)?).relu();
            (h, w, cin) = (geom.out_h(), geom.out_w(), cout);
        }
        let pooled = graph.constant(pooling_matrix(n, h * w)).matmul(x);
        Ok(add_bias(
            pooled.matmul(param(params, "fc.w")?),
            param(params, "fc.b")?,
        ))
    }
}

fn check_channels(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Channels { expected, actual })
    }
}

/// Encoder entries of a model's parameter set, as graph variables keyed
/// without the `enc.` prefix.
pub fn encoder_vars<'g, F: Scalar>(vars: &Vars<'g, F>) -> Vars<'g, F> {
    vars.iter()
        .filter_map(|(k, v)| k.strip_prefix(ENC_PREFIX).map(|s| (s.to_string(), *v)))
        .collect()
}

/// Features of a model whose parameters are `vars`, on a constant batch.
pub fn features_var<'g, A: Architecture, F: Scalar>(
    arch: &A,
    vars: &Vars<'g, F>,
    input: Var<'g, F>,
) -> Result<Var<'g, F>> {
    arch.forward(&encoder_vars(vars), input)
}

/// Student logits `features·w + b` (`n×1`).
pub fn logits_var<'g, F: Scalar>(vars: &Vars<'g, F>, features: Var<'g, F>) -> Result<Var<'g, F>> {
    let n = features.shape()[0];
    let w = param(vars, HEAD_W)?;
    let b = param(vars, HEAD_B)?;
    Ok(features.matmul(w) + b.reshape(&[1, 1]).broadcast_rows(n))
}

fn run_forward<A: Architecture, F: Scalar>(
    arch: &A,
    params: &ParamSet<F>,
    batch: &Tensor<F>,
    head: bool,
) -> Result<Tensor<F>> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let graph = Graph::first_order();
    let vars = params.constants(&graph);
    let input = graph.constant(batch.clone());
    let mut out = features_var(arch, &vars, input)?;
    if head {
        out = logits_var(&vars, out)?.sigmoid();
    }
    let value = (*out.value()).clone();
    if !value.all_finite() {
        return Err(Error::NonFinite {
            entry: if head { "predictions" } else { "features" }.into(),
        });
    }
    Ok(value)
}

/// Student: encoder plus logistic head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "A: Architecture, F: Scalar + DeserializeOwned"))]
pub struct StudentModel<A = EncoderConfig, F = f32> {
    pub arch: A,
    pub params: ParamSet<F>,
}

/// Teacher: encoder over image and mask channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "A: Architecture, F: Scalar + DeserializeOwned"))]
pub struct TeacherModel<A = EncoderConfig, F = f32> {
    pub arch: A,
    pub params: ParamSet<F>,
}

pub fn init_student<A: Architecture, F: Scalar>(arch: &A, seed: u64) -> Result<StudentModel<A, F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.merge_prefixed(ENC_PREFIX, &arch.init_params(&mut rng)?)?;
    let d = arch.feature_dim();
    params.insert(HEAD_W, he_normal(&[d, 1], d, &mut rng))?;
    params.insert(HEAD_B, Tensor::zeros(&[1]))?;
    Ok(StudentModel {
        arch: arch.clone(),
        params,
    })
}

/// Teacher whose encoder copies the baseline student's and whose first-layer
/// weights for the `mask_channels` extra inputs are zero.
pub fn init_teacher_from_baseline<A: Architecture, F: Scalar>(
    baseline: &StudentModel<A, F>,
    mask_channels: usize,
) -> Result<TeacherModel<A, F>> {
    let arch = baseline
        .arch
        .with_input_channels(baseline.arch.input_channels() + mask_channels);
    let (first, axis) = arch.input_weight();
    let first = format!("{ENC_PREFIX}{first}");
    let mut params = ParamSet::new();
    for (name, t) in baseline.params.iter() {
        if !name.starts_with(ENC_PREFIX) {
            continue;
        }
        let t = if name == first {
            widen(t, axis, mask_channels)?
        } else {
            t.clone()
        };
        params.insert(name, t)?;
    }
    let expected: ParamSet<F> = arch
        .init_params(&mut ChaCha8Rng::seed_from_u64(0))?
        .iter()
        .map(|(k, v)| (format!("{ENC_PREFIX}{k}"), v.clone()))
        .collect();
    if !params.congruent(&expected) {
        return Err(Error::Shape {
            context: "teacher from baseline".into(),
            expected: format!(
                "{:?}",
                expected
                    .iter()
                    .map(|(k, v)| (k, v.shape().to_vec()))
                    .collect::<Vec<_>>()
            ),
            actual: format!(
                "{:?}",
                params
                    .iter()
                    .map(|(k, v)| (k, v.shape().to_vec()))
                    .collect::<Vec<_>>()
            ),
        });
    }
    Ok(TeacherModel { arch, params })
}

/// Appends `extra` zero slices along `axis`.
fn widen<F: Scalar>(t: &Tensor<F>, axis: usize, extra: usize) -> Result<Tensor<F>> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "input-channel axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (old, new) = (shape[axis], shape[axis] + extra);
    let mut data = vec![F::ZERO; outer * new * inner];
    for o in 0..outer {
        let src = &t.data()[o * old * inner..(o + 1) * old * inner];
        data[o * new * inner..o * new * inner + old * inner].copy_from_slice(src);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = new;
    Tensor::new(new_shape, data)
}

impl<A: Architecture, F: Scalar> StudentModel<A, F> {
    /// `n×D` features of an `n×C×H×W` batch.
    pub fn encode(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        run_forward(&self.arch, &self.params, batch, false)
    }

    /// Positive-class probabilities, one per batch row.
    pub fn predict(&self, batch: &Tensor<F>) -> Result<Vec<F>> {
        Ok(run_forward(&self.arch, &self.params, batch, true)?.into_data())
    }

    /// [`Self::predict`] over many images, `chunk` at a time.
    pub fn predict_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let batch = crate::data::stack_images(part.iter().copied())?;
            out.extend(self.predict(&batch)?);
        }
        Ok(out)
    }
}

impl<A: Architecture, F: Scalar> TeacherModel<A, F> {
    /// `n×D` features of an `n×(C+mask)×H×W` batch.
    pub fn encode(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        run_forward(&self.arch, &self.params, batch, false)
    }
}

/// Concatenates image and mask channels into the teacher's input batch.
pub fn teacher_input<F: Scalar>(images: &[&Image], masks: &[&Mask]) -> Result<Tensor<F>> {
    if images.len() != masks.len() {
        return Err(Error::invalid("image and mask counts differ"));
    }
    let imgs = crate::data::stack_images::<F>(images.iter().copied())?;
    let msks = crate::data::stack_masks::<F>(masks.iter().copied())?;
    concat_channels(&imgs, &msks)
}

/// Channel-wise concatenation of two `n×C×H×W` tensors.
pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, ca, h, w] = dims4(a)?;
    let [nb, cb, hb, wb] = dims4(b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape {
            context: "channel concatenation".into(),
            expected: format!("{n}×·×{h}×{w}"),
            actual: format!("{nb}×·×{hb}×{wb}"),
        });
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Default teacher mask channel count.
pub const TEACHER_MASK_CHANNELS: usize = MASK_CHANNELS;

/// Uniform `[0,1)` batch, handy for tests and benchmarks.
pub fn random_batch<F: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let data = (0..len).map(|_| F::from_f64(rng.random::<f64>())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}
