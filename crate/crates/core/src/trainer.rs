//! The three-stage teacher–student loop, the supervised baseline, and
//! resumable training state.
//!
//! Each iteration runs, in order: a knowledge-transfer step of the student
//! towards the teacher's features on an auxiliary batch; a supervised BCE
//! step of the student on a textbook batch; and a teacher step along the
//! meta-gradient of the quiz loss of a virtually updated student.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::cka::kt_loss_var;
use crate::data::{stack_images, LabeledSample, MaskedSample, MASK_CHANNELS};
use crate::diffcore::{self, GradSet, Graph, MetaGradMode, ParamSet, Scalar, Tensor, Var, Vars};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{
    features_var, init_student, init_teacher_from_baseline, logits_var, teacher_input,
    Architecture, EncoderConfig, StudentModel, TeacherModel,
};
use crate::quizpool::{self, Candidate, PoolConfig, PoolMode, QuizPool};

/// Optimizer for the supervised student step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    /// Adam with its own learning rate; `lambda_s` still drives the
    /// knowledge-transfer and virtual steps.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Student learning rate.
    pub lambda_s: f64,
    /// Teacher learning rate.
    pub lambda_t: f64,
    pub batch_size_aux: usize,
    pub batch_size_tp: usize,
    pub batch_size_qp: usize,
    pub epochs: usize,
    /// Probabilities are clamped to `[ε, 1−ε]` inside the BCE loss.
    pub bce_epsilon: f64,
    /// Exact meta-gradient; otherwise the finite-difference approximation.
    pub second_order: bool,
    /// Relative step of the finite-difference meta-gradient.
    pub fd_scale: f64,
    pub pool: PoolConfig,
    pub seed: u64,
    pub cka_centered: bool,
    /// Assert stage isolation and pool disjointness at every stage.
    pub check_isolation: bool,
    /// Applies to the supervised step only.
    pub optimizer: Optimizer,
    /// Batch size used for evaluation passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_s: 3e-4,
            lambda_t: 3e-4,
            batch_size_aux: 16,
            batch_size_tp: 32,
            batch_size_qp: 32,
            epochs: 20,
            bce_epsilon: 1e-7,
            second_order: true,
            fd_scale: 1e-3,
            pool: PoolConfig::default(),
            seed: 0,
            cka_centered: true,
            check_isolation: false,
            optimizer: Optimizer::Sgd,
            eval_batch: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_t", self.lambda_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size_aux < 2 {
            return Err(Error::config("batch_size_aux must be ≥ 2 for CKA"));
        }
        if self.batch_size_tp == 0 || self.batch_size_qp == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.01) {
            return Err(Error::config(format!(
                "bce_epsilon must lie in (0, 0.01), got {}",
                self.bce_epsilon
            )));
        }
        if !self.second_order && !(self.fd_scale > 0.0 && self.fd_scale.is_finite()) {
            return Err(Error::config("fd_scale must be positive"));
        }
        if let Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } = self.optimizer
        {
            if lr.is_nan()
                || lr <= 0.0
                || !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || eps <= 0.0
            {
                return Err(Error::config(
                    "adam needs lr > 0, betas in [0, 1) and eps > 0",
                ));
            }
        }
        self.pool.validate()
    }

    pub fn meta_mode(&self) -> MetaGradMode {
        if self.second_order {
            MetaGradMode::SecondOrder
        } else {
            MetaGradMode::FiniteDifference {
                scale: self.fd_scale,
            }
        }
    }
}

/// Binary cross-entropy of one prediction, with `p` clamped to `[ε, 1−ε]`.
pub fn bce(y: u8, p: f64, eps: f64) -> Result<f64> {
    if y > 1 {
        return Err(Error::invalid(format!("label must be 0 or 1, got {y}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    let p = p.clamp(eps, 1.0 - eps);
    Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// Mean clamped BCE of an `n×1` probability column.
pub fn bce_var<'g, F: Scalar>(probs: Var<'g, F>, labels: &[u8], eps: f64) -> Result<Var<'g, F>> {
    let n = labels.len();
    if probs.shape() != [n, 1] || n == 0 {
        return Err(Error::Shape {
            context: "BCE probabilities".into(),
            expected: format!("[{n}, 1]"),
            actual: format!("{:?}", probs.shape()),
        });
    }
    let graph = probs.graph();
    let y = Tensor::new(
        vec![n, 1],
        labels.iter().map(|&l| F::from_f64(l as f64)).collect(),
    )?;
    let not_y = y.map(|v| F::ONE - v);
    let p = probs.clamp(F::from_f64(eps), F::from_f64(1.0 - eps));
    let log_p = p.ln() * graph.constant(y);
    let log_q = (-p).add_scalar(F::ONE).ln() * graph.constant(not_y);
    Ok(-(log_p + log_q).mean())
}

/// Auxiliary batch: images for the student, images plus masks for the teacher.
#[derive(Clone, Debug)]
pub struct AuxBatch<F> {
    pub ids: Vec<u64>,
    pub student_input: Tensor<F>,
    pub teacher_input: Tensor<F>,
}

impl<F: Scalar> AuxBatch<F> {
    pub fn from_samples(samples: &[&MaskedSample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            student_input: stack_images(images.iter().copied())?,
            teacher_input: teacher_input(&images, &masks)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LabeledBatch<F> {
    pub ids: Vec<u64>,
    pub input: Tensor<F>,
    pub labels: Vec<u8>,
}

impl<F: Scalar> LabeledBatch<F> {
    pub fn from_samples(samples: &[&LabeledSample]) -> Result<Self> {
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            input: stack_images(samples.iter().map(|s| &s.image))?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// The four batches consumed by one iteration.
#[derive(Clone, Debug)]
pub struct IterationBatches<F> {
    pub aux_kt: AuxBatch<F>,
    pub textbook: LabeledBatch<F>,
    pub aux_meta: AuxBatch<F>,
    pub quiz: LabeledBatch<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    KnowledgeTransfer,
    Supervised,
    TeacherMeta,
}

/// Snapshot handed to an observer after each stage.
pub struct StageEvent<'a, F> {
    pub epoch: usize,
    pub iteration: u64,
    pub stage: Stage,
    pub student_before: &'a ParamSet<F>,
    pub student_after: &'a ParamSet<F>,
    pub teacher_before: &'a ParamSet<F>,
    pub teacher_after: &'a ParamSet<F>,
    pub batch_ids: &'a [u64],
    pub pool: &'a QuizPool,
}

pub type Observer<'o, F> = Option<&'o mut dyn FnMut(&StageEvent<'_, F>)>;

/// One per-epoch (or final) evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
    pub auc: f64,
    pub loss_kt: Option<f64>,
    pub loss_bce_student: Option<f64>,
    pub loss_bce_teacher: Option<f64>,
    pub pool_mean_difficulty: Option<f64>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "split",
    "acc",
    "sen",
    "spec",
    "auc",
    "loss_kt",
    "loss_bce_student",
    "loss_bce_teacher",
    "pool_mean_difficulty",
];

/// Pool composition at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolLogRow {
    pub sample_id: u64,
    pub label: u8,
    pub psi: f64,
    pub epoch: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(path, rows, &METRICS_HEADER)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    read_csv(path)
}

pub fn write_pool_log_csv(path: &Path, rows: &[PoolLogRow]) -> Result<()> {
    write_csv(path, rows, &["sample_id", "label", "psi", "epoch"])
}

pub fn read_pool_log_csv(path: &Path) -> Result<Vec<PoolLogRow>> {
    read_csv(path)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Best-validation-AUC student seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestStudent<A, F> {
    pub epoch: usize,
    pub auc: f64,
    pub student: StudentModel<A, F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub t: u64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState<A = EncoderConfig, F = f32> {
    pub student: StudentModel<A, F>,
    pub teacher: TeacherModel<A, F>,
    /// Textbook ids, sorted.
    pub textbook: Vec<u64>,
    pub pool: QuizPool,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
    pub pool_log: Vec<PoolLogRow>,
    pub best: Option<BestStudent<A, F>>,
    pub adam: Option<AdamState<F>>,
}

/// Coerces a closure to the higher-ranked signature of an objective.
fn objective<F, C>(c: C) -> C
where
    F: Scalar,
    C: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    c
}

fn inner_objective<F, C>(c: C) -> C
where
    F: Scalar,
    C: for<'g> Fn(&'g Graph<F>, &Vars<'g, F>, &Vars<'g, F>) -> Result<Var<'g, F>>,
{
    c
}

/// `1 − CKA` between teacher and student features on an auxiliary batch.
pub fn kt_objective<'g, A: Architecture, F: Scalar>(
    student_arch: &A,
    teacher_arch: &A,
    teacher: &Vars<'g, F>,
    student: &Vars<'g, F>,
    batch: &AuxBatch<F>,
    centered: bool,
) -> Result<Var<'g, F>> {
    let graph = student
        .values()
        .next()
        .ok_or_else(|| Error::invalid("student has no parameters"))?
        .graph();
    if batch.ids.len() < 2 {
        return Err(Error::invalid("auxiliary batch needs at least 2 samples"));
    }
    let t = features_var(
        teacher_arch,
        teacher,
        graph.constant(batch.teacher_input.clone()),
    )?;
    let s = features_var(
        student_arch,
        student,
        graph.constant(batch.student_input.clone()),
    )?;
    kt_loss_var(t, s, centered)
}

/// Mean clamped BCE of the student on a labeled batch.
pub fn bce_objective<'g, A: Architecture, F: Scalar>(
    arch: &A,
    student: &Vars<'g, F>,
    batch: &LabeledBatch<F>,
    eps: f64,
) -> Result<Var<'g, F>> {
    let graph = student
        .values()
        .next()
        .ok_or_else(|| Error::invalid("student has no parameters"))?
        .graph();
    let feats = features_var(arch, student, graph.constant(batch.input.clone()))?;
    let probs = logits_var(student, feats)?.sigmoid();
    bce_var(probs, &batch.labels, eps)
}

fn adam_step<F: Scalar>(
    params: &ParamSet<F>,
    grad: &GradSet<F>,
    state: &mut Option<AdamState<F>>,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<ParamSet<F>> {
    let st = state.get_or_insert_with(|| AdamState {
        m: params.map_entries(|_, v| v.map(|_| F::ZERO)),
        v: params.map_entries(|_, v| v.map(|_| F::ZERO)),
        t: 0,
    });
    st.t += 1;
    let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
    let m = st.m.map_entries(|k, m| {
        m.zip_map(grad.get(k).expect("congruent gradient"), |m, g| {
            b1 * m + (F::ONE - b1) * g
        })
    });
    let v = st.v.map_entries(|k, v| {
        v.zip_map(grad.get(k).expect("congruent gradient"), |v, g| {
            b2 * v + (F::ONE - b2) * g * g
        })
    });
    let c1 = F::from_f64(1.0 - beta1.powi(st.t as i32));
    let c2 = F::from_f64(1.0 - beta2.powi(st.t as i32));
    let e = F::from_f64(eps);
    let step: GradSet<F> = m
        .iter()
        .map(|(k, mt)| {
            let vt = v.get(k).expect("same names");
            (
                k.to_string(),
                mt.zip_map(vt, |m, v| (m / c1) / ((v / c2).sqrt() + e)),
            )
        })
        .collect();
    st.m = m;
    st.v = v;
    params.descend(&step, F::from_f64(lr))
}

fn isolation_error(stage: Stage, which: &str) -> Error {
    Error::StageIsolation(format!("{stage:?} modified the {which} parameters"))
}

impl<A: Architecture, F: Scalar> TrainState<A, F> {
    /// Fresh state: the quiz pool is split from `train_labels` with the
    /// configured fraction and scored with the initial student.
    pub fn new(
        cfg: &TrainConfig,
        student: StudentModel<A, F>,
        teacher: TeacherModel<A, F>,
        train: &[LabeledSample],
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let pairs: Vec<(u64, u8)> = train.iter().map(|s| (s.id, s.label)).collect();
        let (textbook, pool) = quizpool::static_split(&pairs, &cfg.pool, &mut rng)?;
        let mut state = Self {
            student,
            teacher,
            textbook,
            pool,
            epoch: 0,
            iteration: 0,
            rng,
            history: Vec::new(),
            pool_log: Vec::new(),
            best: None,
            adam: None,
        };
        let index = SampleIndex::new(train)?;
        let preds = state.predict_ids(cfg, &index, state.pool.ids().collect())?;
        state.pool.refresh(&preds)?;
        Ok(state)
    }

    /// Stage 1: one descent step of the student on the knowledge-transfer
    /// loss. Returns the pre-step loss.
    pub fn student_kt_step(&mut self, cfg: &TrainConfig, batch: &AuxBatch<F>) -> Result<F> {
        let (sa, ta) = (&self.student.arch, &self.teacher.arch);
        let teacher = &self.teacher.params;
        let eval = diffcore::grad(
            objective(|g: &Graph<F>, s| {
                let t = teacher.constants(g);
                kt_objective(sa, ta, &t, s, batch, cfg.cka_centered)
            }),
            &self.student.params,
        )?;
        self.student.params = self
            .student
            .params
            .descend(&eval.grad, F::from_f64(cfg.lambda_s))?;
        Ok(eval.value)
    }

    /// Stage 2: one supervised step on a textbook batch. Quiz-pool ids in
    /// the batch are a hard error.
    pub fn student_bce_step(&mut self, cfg: &TrainConfig, batch: &LabeledBatch<F>) -> Result<F> {
        if batch.ids.is_empty() {
            return Err(Error::invalid("empty textbook batch"));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| self.pool.contains(id)) {
            return Err(Error::Leakage { id });
        }
        let arch = &self.student.arch;
        let eval = diffcore::grad(
            objective(|_g: &Graph<F>, s| bce_objective(arch, s, batch, cfg.bce_epsilon)),
            &self.student.params,
        )?;
        self.student.params = match cfg.optimizer {
            Optimizer::Sgd => self
                .student
                .params
                .descend(&eval.grad, F::from_f64(cfg.lambda_s))?,
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => adam_step(
                &self.student.params,
                &eval.grad,
                &mut self.adam,
                lr,
                (beta1, beta2, eps),
            )?,
        };
        Ok(eval.value)
    }

    /// Stage 3: the teacher descends the derivative of the quiz loss of the
    /// virtually updated student. The student itself is not touched.
    pub fn teacher_meta_step(
        &mut self,
        cfg: &TrainConfig,
        aux: &AuxBatch<F>,
        quiz: &LabeledBatch<F>,
    ) -> Result<diffcore::MetaGradient<F>> {
        if quiz.ids.is_empty() {
            return Err(Error::invalid("empty quiz batch"));
        }
        if let Some(&id) = quiz.ids.iter().find(|&&id| !self.pool.contains(id)) {
            return Err(Error::invalid(format!(
                "quiz batch sample {id} is not in the quiz pool"
            )));
        }
        let (sa, ta) = (&self.student.arch, &self.teacher.arch);
        let meta = diffcore::meta_gradient(
            cfg.meta_mode(),
            inner_objective(|_g: &Graph<F>, t, s| {
                kt_objective(sa, ta, t, s, aux, cfg.cka_centered)
            }),
            objective(|_g: &Graph<F>, s| bce_objective(sa, s, quiz, cfg.bce_epsilon)),
            &self.teacher.params,
            &self.student.params,
            F::from_f64(cfg.lambda_s),
        )?;
        self.teacher.params = self
            .teacher
            .params
            .descend(&meta.grad, F::from_f64(cfg.lambda_t))?;
        Ok(meta)
    }

    /// One full iteration on the given batches.
    pub fn iteration(
        &mut self,
        cfg: &TrainConfig,
        batches: &IterationBatches<F>,
        mut observer: Observer<'_, F>,
    ) -> Result<IterationLosses> {
        let watch = cfg.check_isolation || observer.is_some();
        let mut losses = IterationLosses::default();
        for stage in [
            Stage::KnowledgeTransfer,
            Stage::Supervised,
            Stage::TeacherMeta,
        ] {
            let before = watch.then(|| (self.student.params.clone(), self.teacher.params.clone()));
            let ids: &[u64] = match stage {
                Stage::KnowledgeTransfer => {
                    losses.kt = self.student_kt_step(cfg, &batches.aux_kt)?.to_f64();
                    &batches.aux_kt.ids
                }
                Stage::Supervised => {
                    losses.bce_student = self.student_bce_step(cfg, &batches.textbook)?.to_f64();
                    &batches.textbook.ids
                }
                Stage::TeacherMeta => {
                    let meta = self.teacher_meta_step(cfg, &batches.aux_meta, &batches.quiz)?;
                    losses.bce_teacher = meta.outer_value.to_f64();
                    &batches.quiz.ids
                }
            };
            let Some((s0, t0)) = before else { continue };
            if cfg.check_isolation {
                match stage {
                    Stage::KnowledgeTransfer | Stage::Supervised => {
                        if !t0.bit_identical(&self.teacher.params) {
                            return Err(isolation_error(stage, "teacher"));
                        }
                    }
                    Stage::TeacherMeta => {
                        if !s0.bit_identical(&self.student.params) {
                            return Err(isolation_error(stage, "student"));
                        }
                    }
                }
                if stage == Stage::Supervised {
                    if let Some(&id) = ids.iter().find(|&&id| self.pool.contains(id)) {
                        return Err(Error::Leakage { id });
                    }
                }
            }
            if let Some(obs) = observer.as_mut() {
                obs(&StageEvent {
                    epoch: self.epoch,
                    iteration: self.iteration,
                    stage,
                    student_before: &s0,
                    student_after: &self.student.params,
                    teacher_before: &t0,
                    teacher_after: &self.teacher.params,
                    batch_ids: ids,
                    pool: &self.pool,
                });
            }
        }
        self.iteration += 1;
        Ok(losses)
    }

    fn predict_ids(
        &self,
        cfg: &TrainConfig,
        index: &SampleIndex<'_>,
        ids: Vec<u64>,
    ) -> Result<BTreeMap<u64, f64>> {
        let images = ids
            .iter()
            .map(|id| index.get(*id).map(|s| &s.image))
            .collect::<Result<Vec<_>>>()?;
        let preds = self.student.predict_images(&images, cfg.eval_batch)?;
        Ok(ids
            .into_iter()
            .zip(preds.into_iter().map(|p| p.to_f64()))
            .collect())
    }

    /// Re-scores the pool and, in dynamic mode, runs one admission round
    /// over the textbook pool.
    fn update_pool(&mut self, cfg: &TrainConfig, index: &SampleIndex<'_>) -> Result<()> {
        let all: Vec<u64> = self
            .pool
            .ids()
            .chain(self.textbook.iter().copied())
            .collect();
        let preds = self.predict_ids(cfg, index, all)?;
        self.pool.refresh(&preds)?;
        if cfg.pool.mode == PoolMode::Dynamic {
            let candidates = self
                .textbook
                .iter()
                .map(|&id| {
                    Ok(Candidate {
                        id,
                        label: index.get(id)?.label,
                        pred: preds[&id],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let upd = quizpool::update_pool(&self.pool, &candidates, &cfg.pool, &mut self.rng)?;
            self.pool = upd.pool;
            self.textbook = upd.textbook;
        }
        Ok(())
    }
}

/// Losses of one iteration, each measured before its own step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IterationLosses {
    pub kt: f64,
    pub bce_student: f64,
    /// Quiz loss of the virtual student.
    pub bce_teacher: f64,
}

/// Labeled samples by id.
pub struct SampleIndex<'a> {
    by_id: BTreeMap<u64, &'a LabeledSample>,
}

impl<'a> SampleIndex<'a> {
    pub fn new(samples: &'a [LabeledSample]) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for s in samples {
            if by_id.insert(s.id, s).is_some() {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { by_id })
    }

    pub fn get(&self, id: u64) -> Result<&'a LabeledSample> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown sample id {id}")))
    }
}

/// Datasets for [`fit`].
#[derive(Clone, Copy)]
pub struct FitData<'a> {
    pub train: &'a [LabeledSample],
    pub val: &'a [LabeledSample],
    pub aux: &'a [MaskedSample],
}

/// Metrics of `student` on `samples`; undefined entries (a class missing)
/// are NaN.
pub fn evaluate_student<A: Architecture, F: Scalar>(
    student: &StudentModel<A, F>,
    samples: &[LabeledSample],
    chunk: usize,
) -> Result<metrics::EvalResult> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds: Vec<f64> = student
        .predict_images(&images, chunk)?
        .into_iter()
        .map(|p| p.to_f64())
        .collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    match metrics::evaluate(&preds, &labels, metrics::DEFAULT_THRESHOLD) {
        Err(Error::UndefinedAuc(_)) => {
            let counts = metrics::confusion(&preds, &labels, metrics::DEFAULT_THRESHOLD)?;
            let ratio = |a: usize, b: usize| {
                if b == 0 {
                    f64::NAN
                } else {
                    a as f64 / b as f64
                }
            };
            Ok(metrics::EvalResult {
                acc: ratio(counts.tp + counts.tn, counts.total()),
                sen: ratio(counts.tp, counts.tp + counts.fn_),
                spec: ratio(counts.tn, counts.tn + counts.fp),
                auc: f64::NAN,
                threshold: metrics::DEFAULT_THRESHOLD,
                counts,
            })
        }
        other => other,
    }
}

fn metric_row(epoch: usize, split: &str, r: &metrics::EvalResult) -> MetricRow {
    MetricRow {
        epoch,
        split: split.to_string(),
        acc: r.acc,
        sen: r.sen,
        spec: r.spec,
        auc: r.auc,
        loss_kt: None,
        loss_bce_student: None,
        loss_bce_teacher: None,
        pool_mean_difficulty: None,
    }
}

fn sample_refs<'a, T>(items: &'a [T], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    index::sample(rng, items.len(), k.min(items.len()))
        .into_iter()
        .map(|i| &items[i])
        .collect()
}

fn update_best<A: Architecture, F: Scalar>(
    best: &mut Option<BestStudent<A, F>>,
    epoch: usize,
    auc: f64,
    student: &StudentModel<A, F>,
) {
    let better = !auc.is_nan() && best.as_ref().is_none_or(|b| auc > b.auc);
    if better {
        *best = Some(BestStudent {
            epoch,
            auc,
            student: student.clone(),
        });
    }
}

/// Runs the remaining epochs of `state` up to `cfg.epochs`.
pub fn fit<A: Architecture, F: Scalar>(
    cfg: &TrainConfig,
    state: &mut TrainState<A, F>,
    data: FitData<'_>,
    mut observer: Observer<'_, F>,
) -> Result<()> {
    cfg.validate()?;
    if data.aux.len() < 2 {
        return Err(Error::DatasetTooSmall(
            "auxiliary set needs at least 2 samples".into(),
        ));
    }
    let index = SampleIndex::new(data.train)?;
    while state.epoch < cfg.epochs {
        let mut order = state.textbook.clone();
        order.shuffle(&mut state.rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut iters = 0usize;
        let mut start = 0;
        while start < order.len() {
            let end = (start + cfg.batch_size_tp).min(order.len());
            // Per-iteration pool updates can move ids out of the textbook pool.
            let tp: Vec<&LabeledSample> = order[start..end]
                .iter()
                .filter(|&&id| !state.pool.contains(id))
                .map(|&id| index.get(id))
                .collect::<Result<_>>()?;
            start = end;
            if tp.is_empty() {
                continue;
            }
            let aux_kt = sample_refs(data.aux, cfg.batch_size_aux, &mut state.rng);
            let aux_meta = sample_refs(data.aux, cfg.batch_size_aux, &mut state.rng);
            let pool_ids: Vec<u64> = state.pool.ids().collect();
            let quiz: Vec<&LabeledSample> =
                sample_refs(&pool_ids, cfg.batch_size_qp, &mut state.rng)
                    .into_iter()
                    .map(|&id| index.get(id))
                    .collect::<Result<_>>()?;
            let batches = IterationBatches {
                aux_kt: AuxBatch::from_samples(&aux_kt)?,
                textbook: LabeledBatch::from_samples(&tp)?,
                aux_meta: AuxBatch::from_samples(&aux_meta)?,
                quiz: LabeledBatch::from_samples(&quiz)?,
            };
            let obs: Observer<'_, F> = match observer.as_mut() {
                Some(o) => Some(&mut **o),
                None => None,
            };
            let l = state.iteration(cfg, &batches, obs)?;
            sums.0 += l.kt;
            sums.1 += l.bce_student;
            sums.2 += l.bce_teacher;
            iters += 1;
            if cfg.pool.cadence == quizpool::Cadence::PerIteration {
                state.update_pool(cfg, &index)?;
            }
        }
        if cfg.pool.cadence == quizpool::Cadence::PerEpoch {
            state.update_pool(cfg, &index)?;
        } else {
            let preds = state.predict_ids(cfg, &index, state.pool.ids().collect())?;
            state.pool.refresh(&preds)?;
        }
        let epoch = state.epoch + 1;
        if cfg.pool.mode == PoolMode::Dynamic {
            state
                .pool_log
                .extend(state.pool.members().iter().map(|m| PoolLogRow {
                    sample_id: m.id,
                    label: m.label,
                    psi: m.psi,
                    epoch,
                }));
        }
        let val = evaluate_student(&state.student, data.val, cfg.eval_batch)?;
        let n = iters.max(1) as f64;
        let mut row = metric_row(epoch, "val", &val);
        row.loss_kt = Some(sums.0 / n);
        row.loss_bce_student = Some(sums.1 / n);
        row.loss_bce_teacher = Some(sums.2 / n);
        row.pool_mean_difficulty = Some(quizpool::mean_difficulty(&state.pool)?);
        state.history.push(row);
        update_best(&mut state.best, epoch, val.auc, &state.student);
        state.epoch = epoch;
    }
    Ok(())
}

/// State for a full run: random student, teacher from `baseline`.
pub fn init_state<A: Architecture, F: Scalar>(
    cfg: &TrainConfig,
    arch: &A,
    baseline: &StudentModel<A, F>,
    train: &[LabeledSample],
) -> Result<TrainState<A, F>> {
    cfg.validate()?;
    if baseline.arch != *arch {
        return Err(Error::config(
            "baseline checkpoint architecture differs from the student's",
        ));
    }
    let student = init_student(arch, cfg.seed)?;
    let teacher = init_teacher_from_baseline(baseline, MASK_CHANNELS)?;
    TrainState::new(cfg, student, teacher, train)
}

/// Outcome of [`train_baseline`].
#[derive(Clone, Debug)]
pub struct BaselineRun<A, F> {
    pub student: StudentModel<A, F>,
    pub best: Option<BestStudent<A, F>>,
    pub history: Vec<MetricRow>,
}

/// Plain supervised training on the whole training split.
pub fn train_baseline<A: Architecture, F: Scalar>(
    cfg: &TrainConfig,
    arch: &A,
    train: &[LabeledSample],
    val: &[LabeledSample],
) -> Result<BaselineRun<A, F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::DatasetTooSmall(
            "baseline needs training samples".into(),
        ));
    }
    let mut student: StudentModel<A, F> = init_student(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam = None;
    let mut history = Vec::new();
    let mut best = None;
    let mut order: Vec<&LabeledSample> = train.iter().collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut iters = 0usize;
        for chunk in order.chunks(cfg.batch_size_tp) {
            let batch = LabeledBatch::from_samples(chunk)?;
            let a = &student.arch;
            let eval = diffcore::grad(
                objective(|_g: &Graph<F>, s| bce_objective(a, s, &batch, cfg.bce_epsilon)),
                &student.params,
            )?;
            student.params = match cfg.optimizer {
                Optimizer::Sgd => student
                    .params
                    .descend(&eval.grad, F::from_f64(cfg.lambda_s))?,
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => adam_step(
                    &student.params,
                    &eval.grad,
                    &mut adam,
                    lr,
                    (beta1, beta2, eps),
                )?,
            };
            loss_sum += eval.value.to_f64();
            iters += 1;
        }
        if !val.is_empty() {
            let r = evaluate_student(&student, val, cfg.eval_batch)?;
            let mut row = metric_row(epoch, "val", &r);
            row.loss_bce_student = Some(loss_sum / iters.max(1) as f64);
            history.push(row);
            update_best(&mut best, epoch, r.auc, &student);
        }
    }
    Ok(BaselineRun {
        student,
        best,
        history,
    })
}

/// Appends a `test` row for `student` to `history`.
pub fn push_test_row<A: Architecture, F: Scalar>(
    history: &mut Vec<MetricRow>,
    epoch: usize,
    student: &StudentModel<A, F>,
    test: &[LabeledSample],
    chunk: usize,
) -> Result<metrics::EvalResult> {
    let r = evaluate_student(student, test, chunk)?;
    history.push(metric_row(epoch, "test", &r));
    Ok(r)
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    format_version: u32,
    epoch: usize,
    iteration: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
    textbook: Vec<u64>,
    pool: QuizPool,
    history: Vec<MetricRow>,
    pool_log: Vec<PoolLogRow>,
    best_epoch: Option<usize>,
    best_auc: Option<f64>,
    adam_t: Option<u64>,
}

/// Writes `student`, `teacher`, `best_student` checkpoints and `state.json`
/// into `dir`.
pub fn save_state<A: Architecture, F: Scalar>(
    dir: &Path,
    state: &TrainState<A, F>,
    cfg: &TrainConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = serde_json::to_value(cfg)?;
    checkpoint::save_student(
        &dir.join("student"),
        &state.student,
        config.clone(),
        state.epoch,
        cfg.seed,
    )?;
    checkpoint::save_teacher(
        &dir.join("teacher"),
        &state.teacher,
        config.clone(),
        state.epoch,
        cfg.seed,
    )?;
    if let Some(b) = &state.best {
        checkpoint::save_student(
            &dir.join("best_student"),
            &b.student,
            config.clone(),
            b.epoch,
            cfg.seed,
        )?;
    }
    if let Some(a) = &state.adam {
        let meta = |kind: &str| CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            kind: kind.to_string(),
            arch: serde_json::Value::Null,
            config: serde_json::Value::Null,
            epoch: state.epoch,
            seed: cfg.seed,
            entries: Vec::new(),
        };
        checkpoint::write_params(&dir.join("adam_m"), &meta("adam_m"), &a.m)?;
        checkpoint::write_params(&dir.join("adam_v"), &meta("adam_v"), &a.v)?;
    }
    let file = StateFile {
        format_version: checkpoint::FORMAT_VERSION,
        epoch: state.epoch,
        iteration: state.iteration,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        textbook: state.textbook.clone(),
        pool: state.pool.clone(),
        history: state.history.clone(),
        pool_log: state.pool_log.clone(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_auc: state.best.as_ref().map(|b| b.auc),
        adam_t: state.adam.as_ref().map(|a| a.t),
    };
    let path = dir.join("state.json");
    fs::write(&path, serde_json::to_string(&file)?).map_err(|e| Error::io(&path, e))
}

pub fn load_state<A: Architecture, F: Scalar>(dir: &Path) -> Result<TrainState<A, F>> {
    let path = dir.join("state.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: StateFile = serde_json::from_str(&text)?;
    if file.format_version != checkpoint::FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported state version {}",
            file.format_version
        )));
    }
    let (_, student) = checkpoint::load_student(&dir.join("student"))?;
    let (_, teacher) = checkpoint::load_teacher(&dir.join("teacher"))?;
    let best = match (file.best_epoch, file.best_auc) {
        (Some(epoch), Some(auc)) => Some(BestStudent {
            epoch,
            auc,
            student: checkpoint::load_student(&dir.join("best_student"))?.1,
        }),
        _ => None,
    };
    let adam = match file.adam_t {
        Some(t) => Some(AdamState {
            m: checkpoint::read_params(&dir.join("adam_m"))?.1,
            v: checkpoint::read_params(&dir.join("adam_v"))?.1,
            t,
        }),
        None => None,
    };
    let seed: [u8; 32] = file
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(file.rng_stream);
    rng.set_word_pos(
        file.rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
    );
    Ok(TrainState {
        student,
        teacher,
        textbook: file.textbook,
        pool: file.pool,
        epoch: file.epoch,
        iteration: file.iteration,
        rng,
        history: file.history,
        pool_log: file.pool_log,
        best,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce(1, 0.5, 1e-7).unwrap() - ln2).abs() < 1e-15);
        assert!((bce(0, 0.5, 1e-7).unwrap() - ln2).abs() < 1e-15);
        let sat = bce(1, 1.0, 1e-7).unwrap();
        assert!((sat - -(1.0f64 - 1e-7).ln()).abs() < 1e-18);
        assert!(sat > 0.0 && sat < 1.1e-7);
        assert!(bce(2, 0.5, 1e-7).is_err());
        assert!(bce(1, 1.5, 1e-7).is_err());
    }

    #[test]
    fn bce_var_matches_scalar() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![3, 1], vec![0.2, 0.9, 1.0]).unwrap());
        let labels = [0u8, 1, 1];
        let v = bce_var(p, &labels, 1e-7).unwrap().item();
        let expected = [0.2, 0.9, 1.0]
            .iter()
            .zip(labels)
            .map(|(&p, y)| bce(y, p, 1e-7).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_s: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            bce_epsilon: 0.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size_aux: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
