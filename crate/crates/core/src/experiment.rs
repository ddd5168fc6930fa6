//! Paired-seed comparison of the supervised baseline against teacher–student
//! training with a static and a dynamic quiz pool.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{split, synth_generate, SplitFractions, SynthConfig};
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::quizpool::{PoolConfig, PoolMode};
use crate::trainer::{self, evaluate_student, init_state, FitData, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub split: SplitFractions,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub baseline: TrainConfig,
    pub l2tkt: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Tuned on the desk-scale synthetic task: Adam for the supervised
        // step, a small quiz pool and a slow teacher.
        let baseline = TrainConfig {
            optimizer: Optimizer::Adam {
                lr: 3e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..TrainConfig::default()
        };
        let l2tkt = TrainConfig {
            lambda_s: 0.01,
            lambda_t: 1e-4,
            pool: PoolConfig {
                pool_fraction: 0.05,
                ..PoolConfig::default()
            },
            ..baseline.clone()
        };
        Self {
            synth: SynthConfig::default(),
            split: SplitFractions::default(),
            seeds: (0..5).collect(),
            encoder: EncoderConfig::default(),
            baseline,
            l2tkt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    Static,
    Dynamic,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::Static, Arm::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Static => "static",
            Arm::Dynamic => "dynamic",
        }
    }
}

/// Test-split result of one arm on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: Arm,
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
    /// Epoch of the best-validation-AUC student that was tested.
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_auc: f64,
    pub sd_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub results: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

impl ComparisonReport {
    pub fn auc(&self, seed: u64, arm: Arm) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.seed == seed && r.arm == arm)
            .map(|r| r.auc)
    }

    pub fn mean_auc(&self, arm: Arm) -> f64 {
        self.summary
            .iter()
            .find(|s| s.arm == arm)
            .map_or(f64::NAN, |s| s.mean_auc)
    }

    /// Plain-text table of mean ± sd test AUC per arm.
    pub fn table(&self) -> String {
        let mut out = String::from("arm        mean_auc   sd_auc\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{:<10} {:.4}     {:.4}\n",
                s.arm.name(),
                s.mean_auc,
                s.sd_auc
            ));
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every arm on every seed. `progress` receives each result as it
/// completes.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&ArmResult),
) -> Result<ComparisonReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("comparison needs at least one seed"));
    }
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let data = synth_generate(&SynthConfig {
            seed,
            ..cfg.synth.clone()
        })?;
        let parts = split(&data.labeled, |s| s.id, cfg.split, seed)?;

        let started = Instant::now();
        let base_cfg = TrainConfig {
            seed,
            ..cfg.baseline.clone()
        };
        let base =
            trainer::train_baseline::<_, f32>(&base_cfg, &cfg.encoder, &parts.train, &parts.val)?;
        let (best_epoch, tested) = match &base.best {
            Some(b) => (b.epoch, b.student.clone()),
            None => (cfg.baseline.epochs, base.student.clone()),
        };
        let r = evaluate_student(&tested, &parts.test, base_cfg.eval_batch)?;
        let res = ArmResult {
            seed,
            arm: Arm::Baseline,
            auc: r.auc,
            acc: r.acc,
            sen: r.sen,
            spec: r.spec,
            best_epoch,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&res);
        results.push(res);

        for (arm, mode) in [
            (Arm::Static, PoolMode::Static),
            (Arm::Dynamic, PoolMode::Dynamic),
        ] {
            let started = Instant::now();
            let mut run_cfg = TrainConfig {
                seed,
                ..cfg.l2tkt.clone()
            };
            run_cfg.pool.mode = mode;
            let mut state = init_state(&run_cfg, &cfg.encoder, &tested, &parts.train)?;
            trainer::fit(
                &run_cfg,
                &mut state,
                FitData {
                    train: &parts.train,
                    val: &parts.val,
                    aux: &data.masked,
                },
                None,
            )?;
            let (best_epoch, student) = match &state.best {
                Some(b) => (b.epoch, &b.student),
                None => (state.epoch, &state.student),
            };
            let r = evaluate_student(student, &parts.test, run_cfg.eval_batch)?;
            let res = ArmResult {
                seed,
                arm,
                auc: r.auc,
                acc: r.acc,
                sen: r.sen,
                spec: r.spec,
                best_epoch,
                seconds: started.elapsed().as_secs_f64(),
            };
            progress(&res);
            results.push(res);
        }
    }
    let summary = Arm::ALL
        .iter()
        .map(|&arm| {
            let aucs: Vec<f64> = results
                .iter()
                .filter(|r| r.arm == arm)
                .map(|r| r.auc)
                .collect();
            let (mean_auc, sd_auc) = mean_sd(&aucs);
            ArmSummary {
                arm,
                mean_auc,
                sd_auc,
            }
        })
        .collect();
    Ok(ComparisonReport { results, summary })
}
