use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use l2tkt::checkpoint::{checkpoint_stem, load_student, save_student, save_teacher};
use l2tkt::data::{
    load_labeled_dataset, load_masked_dataset, split, synth_generate, write_labeled_dataset,
    write_masked_dataset, DatasetManifest, Image, LabeledSample, MaskedSample,
};
use l2tkt::experiment::{run_comparison, ExperimentConfig};
use l2tkt::metrics::{self, DEFAULT_THRESHOLD};
use l2tkt::models::{EncoderConfig, StudentModel};
use l2tkt::quizpool::PoolMode;
use l2tkt::trainer::{self, FitData, TrainState};
use serde::Serialize;

use crate::config::{load_merged, DataConfig, RunConfig};
use crate::failure::Failure;
use crate::rundir::{self, RunInfo};
use crate::{Common, DataArgs, PoolArg, SplitArg, TrainArgs};

fn resolve(
    common: &Common,
    data: Option<&DataArgs>,
    train: Option<&TrainArgs>,
) -> Result<RunConfig, Failure> {
    let mut cfg: RunConfig = load_merged(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.synth.seed = cfg.seed;
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(d) = data {
        if let Some(dir) = &d.data {
            cfg.data = DataConfig::from_dir(dir);
        }
        if let Some(p) = &d.labeled {
            cfg.data.labeled = Some(p.clone());
        }
        if let Some(p) = &d.aux {
            cfg.data.aux = Some(p.clone());
        }
    }
    if let Some(t) = train {
        if let Some(e) = t.epochs {
            cfg.train.epochs = e;
        }
        if let Some(l) = t.lambda_s {
            cfg.train.lambda_s = l;
        }
        if let Some(l) = t.lambda_t {
            cfg.train.lambda_t = l;
        }
        cfg.train.check_isolation |= t.check_isolation;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.out
        .clone()
        .ok_or_else(|| Failure::new("usage", "an output directory is required (--out)"))
}

fn labeled_set(cfg: &RunConfig) -> Result<Vec<LabeledSample>, Failure> {
    let path =
        cfg.data.labeled.as_ref().ok_or_else(|| {
            Failure::new("usage", "no labeled manifest (pass --data or --labeled)")
        })?;
    Ok(load_labeled_dataset(&DatasetManifest::read(path)?)?)
}

fn aux_set(cfg: &RunConfig) -> Result<Vec<MaskedSample>, Failure> {
    let path = cfg
        .data
        .aux
        .as_ref()
        .ok_or_else(|| Failure::new("usage", "no auxiliary manifest (pass --data or --aux)"))?;
    Ok(load_masked_dataset(&DatasetManifest::read(path)?)?)
}

fn positive_rate(samples: &[LabeledSample]) -> f64 {
    samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len().max(1) as f64
}

fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), Failure> {
    let mut buf = csv::Writer::from_writer(Vec::new());
    for r in rows {
        buf.serialize(r)?;
    }
    let bytes = buf
        .into_inner()
        .map_err(|e| Failure::new("csv", e.to_string()))?;
    std::io::stdout()
        .write_all(&bytes)
        .map_err(|e| Failure::new("io", e.to_string()))?;
    if let Some(path) = path {
        fs::write(path, &bytes).map_err(|e| Failure::io(path, e))?;
    }
    Ok(())
}

pub fn synth_data(
    common: &Common,
    n: Option<u64>,
    n_aux: Option<usize>,
    image_size: Option<usize>,
    label_noise: Option<f64>,
) -> Result<(), Failure> {
    let mut cfg = resolve(common, None, None)?;
    let out = out_dir(&cfg)?;
    if let Some(n) = n {
        cfg.synth.n = n as usize;
    }
    if let Some(n) = n_aux {
        cfg.synth.n_aux = n;
    }
    if let Some(s) = image_size {
        cfg.synth.image_size = s;
    }
    if let Some(r) = label_noise {
        cfg.synth.label_noise_rate = r;
    }
    let data = synth_generate(&cfg.synth)?;
    rundir::create(&out)?;
    write_labeled_dataset(&out, "labeled", &data.labeled)?;
    write_masked_dataset(&out, "aux", &data.masked)?;
    let provenance = serde_json::json!({
        "layout_version": rundir::LAYOUT_VERSION,
        "synth": cfg.synth,
    });
    let path = out.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&provenance)? + "\n")
        .map_err(|e| Failure::io(&path, e))?;
    println!(
        "wrote {} labeled and {} auxiliary images to {}",
        data.labeled.len(),
        data.masked.len(),
        out.display()
    );
    Ok(())
}

fn tested_student<'a>(
    best: Option<&'a trainer::BestStudent<EncoderConfig, f32>>,
    last: &'a StudentModel,
    last_epoch: usize,
) -> (usize, &'a StudentModel) {
    match best {
        Some(b) => (b.epoch, &b.student),
        None => (last_epoch, last),
    }
}

pub fn train_baseline(common: &Common, data: &DataArgs, train: &TrainArgs) -> Result<(), Failure> {
    let cfg = resolve(common, Some(data), Some(train))?;
    let out = out_dir(&cfg)?;
    let samples = labeled_set(&cfg)?;
    let parts = split(&samples, |s| s.id, cfg.split, cfg.seed)?;
    let run =
        trainer::train_baseline::<_, f32>(&cfg.train, &cfg.encoder, &parts.train, &parts.val)?;

    let dir = rundir::create(&out)?;
    let info = RunInfo {
        layout_version: rundir::LAYOUT_VERSION,
        kind: "baseline".into(),
        train_positive_rate: positive_rate(&parts.train),
    };
    rundir::write_header(&dir, &info, &cfg)?;
    let mut history = run.history.clone();
    let (epoch, tested) = tested_student(run.best.as_ref(), &run.student, cfg.train.epochs);
    let r = trainer::push_test_row(
        &mut history,
        epoch,
        tested,
        &parts.test,
        cfg.train.eval_batch,
    )?;
    trainer::write_metrics_csv(&dir.join(rundir::METRICS), &history)?;
    let config = serde_json::to_value(&cfg.train)?;
    save_student(
        &dir.join(rundir::FINAL),
        &run.student,
        config.clone(),
        cfg.train.epochs,
        cfg.seed,
    )?;
    save_student(&dir.join(rundir::BEST), tested, config, epoch, cfg.seed)?;
    println!(
        "baseline test auc={:.4} acc={:.4} sen={:.4} spec={:.4} (epoch {epoch})",
        r.auc, r.acc, r.sen, r.spec
    );
    Ok(())
}

fn baseline_stem(path: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let path = path.ok_or_else(|| {
        Failure::new(
            "missing_baseline",
            "train-l2tkt needs --baseline-ckpt: the teacher is initialized from a pretrained baseline",
        )
    })?;
    let stem = checkpoint_stem(&path);
    if !stem.with_extension("json").is_file() || !stem.with_extension("bin").is_file() {
        return Err(Failure::new(
            "missing_baseline",
            format!(
                "baseline checkpoint {} not found: the teacher is initialized from a pretrained baseline",
                path.display()
            ),
        ));
    }
    Ok(stem)
}

#[allow(clippy::too_many_arguments)]
pub fn train_l2tkt(
    common: &Common,
    data: &DataArgs,
    train: &TrainArgs,
    pool: Option<PoolArg>,
    baseline_ckpt: Option<PathBuf>,
    first_order: bool,
    resume: bool,
) -> Result<(), Failure> {
    let mut cfg = resolve(common, Some(data), Some(train))?;
    if let Some(p) = baseline_ckpt {
        cfg.baseline_ckpt = Some(p);
    }
    let stem = baseline_stem(cfg.baseline_ckpt.clone())?;
    match pool {
        Some(PoolArg::Static) => cfg.train.pool.mode = PoolMode::Static,
        Some(PoolArg::Dynamic) => cfg.train.pool.mode = PoolMode::Dynamic,
        None => {}
    }
    if first_order {
        cfg.train.second_order = false;
    }
    let out = out_dir(&cfg)?;
    let (_, baseline) = load_student::<EncoderConfig, f32>(&stem)?;
    cfg.encoder = baseline.arch.clone();
    let samples = labeled_set(&cfg)?;
    let aux = aux_set(&cfg)?;
    let parts = split(&samples, |s| s.id, cfg.split, cfg.seed)?;

    let dir = rundir::create(&out)?;
    let state_dir = dir.join(rundir::STATE);
    let mut state: TrainState = if resume && state_dir.join("state.json").is_file() {
        trainer::load_state(&state_dir)?
    } else {
        trainer::init_state(&cfg.train, &cfg.encoder, &baseline, &parts.train)?
    };
    trainer::fit(
        &cfg.train,
        &mut state,
        FitData {
            train: &parts.train,
            val: &parts.val,
            aux: &aux,
        },
        None,
    )?;
    trainer::save_state(&state_dir, &state, &cfg.train)?;

    let dynamic = cfg.train.pool.mode == PoolMode::Dynamic;
    let info = RunInfo {
        layout_version: rundir::LAYOUT_VERSION,
        kind: if dynamic { "dynamic" } else { "static" }.into(),
        train_positive_rate: positive_rate(&parts.train),
    };
    rundir::write_header(&dir, &info, &cfg)?;
    let mut history = state.history.clone();
    let (epoch, tested) = tested_student(state.best.as_ref(), &state.student, state.epoch);
    let r = trainer::push_test_row(
        &mut history,
        epoch,
        tested,
        &parts.test,
        cfg.train.eval_batch,
    )?;
    trainer::write_metrics_csv(&dir.join(rundir::METRICS), &history)?;
    let config = serde_json::to_value(&cfg.train)?;
    save_student(
        &dir.join(rundir::FINAL),
        &state.student,
        config.clone(),
        state.epoch,
        cfg.seed,
    )?;
    save_student(
        &dir.join(rundir::BEST),
        tested,
        config.clone(),
        epoch,
        cfg.seed,
    )?;
    save_teacher(
        &dir.join(rundir::TEACHER),
        &state.teacher,
        config,
        state.epoch,
        cfg.seed,
    )?;
    if dynamic {
        trainer::write_pool_log_csv(&dir.join(rundir::POOL_HISTORY), &state.pool_log)?;
    }
    println!(
        "{} pool test auc={:.4} acc={:.4} sen={:.4} spec={:.4} (epoch {epoch})",
        info.kind, r.auc, r.acc, r.sen, r.spec
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    split: &'static str,
    n: usize,
    acc: f64,
    sen: f64,
    spec: f64,
    auc: f64,
}

pub fn eval(common: &Common, data: &DataArgs, ckpt: &Path, which: SplitArg) -> Result<(), Failure> {
    let cfg = resolve(common, Some(data), None)?;
    let (_, student) = load_student::<EncoderConfig, f32>(&checkpoint_stem(ckpt))?;
    let samples = labeled_set(&cfg)?;
    let (name, chosen) = match which {
        SplitArg::All => ("all", samples),
        other => {
            let parts = split(&samples, |s| s.id, cfg.split, cfg.seed)?;
            match other {
                SplitArg::Train => ("train", parts.train),
                SplitArg::Val => ("val", parts.val),
                _ => ("test", parts.test),
            }
        }
    };
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let preds: Vec<f64> = student
        .predict_images(&images, cfg.train.eval_batch)?
        .into_iter()
        .map(f64::from)
        .collect();
    let labels: Vec<u8> = chosen.iter().map(|s| s.label).collect();
    let r = metrics::evaluate(&preds, &labels, DEFAULT_THRESHOLD)?;
    let row = EvalRow {
        split: name,
        n: chosen.len(),
        acc: r.acc,
        sen: r.sen,
        spec: r.spec,
        auc: r.auc,
    };
    write_csv(cfg.out.as_deref(), &[row])
}

#[derive(Serialize)]
struct PoolSummaryRow {
    epoch: usize,
    pool_size: usize,
    positives: usize,
    positive_fraction: f64,
    base_rate: f64,
    mean_psi: f64,
}

pub fn inspect_pool(common: &Common, run: &Path) -> Result<(), Failure> {
    let info = rundir::read_info(run)?;
    let path = run.join(rundir::POOL_HISTORY);
    if !path.is_file() {
        return Err(Failure::new(
            "no_pool_history",
            format!(
                "{} has no pool history; only dynamic-pool runs record one (this is a {} run)",
                run.display(),
                info.kind
            ),
        ));
    }
    let mut by_epoch: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for r in trainer::read_pool_log_csv(&path)? {
        let e = by_epoch.entry(r.epoch).or_default();
        e.0 += 1;
        e.1 += r.label as usize;
        e.2 += r.psi;
    }
    let rows: Vec<PoolSummaryRow> = by_epoch
        .into_iter()
        .map(|(epoch, (size, positives, psi))| PoolSummaryRow {
            epoch,
            pool_size: size,
            positives,
            positive_fraction: positives as f64 / size as f64,
            base_rate: info.train_positive_rate,
            mean_psi: psi / size as f64,
        })
        .collect();
    write_csv(common.out.as_deref(), &rows)
}

#[derive(Serialize)]
struct ComparisonRow {
    seed: u64,
    arm: &'static str,
    auc: f64,
    acc: f64,
    sen: f64,
    spec: f64,
    best_epoch: usize,
    seconds: f64,
}

pub fn compare(common: &Common, seeds: Option<Vec<u64>>) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = load_merged(common.config.as_deref())?;
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    let report = run_comparison(&cfg, |r| {
        eprintln!(
            "seed {} {:<8} auc={:.4} ({:.1}s)",
            r.seed,
            r.arm.name(),
            r.auc,
            r.seconds
        );
    })?;
    print!("{}", report.table());
    if let Some(out) = &common.out {
        let dir = rundir::create(out)?;
        let path = dir.join(rundir::CONFIG);
        fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")
            .map_err(|e| Failure::io(&path, e))?;
        let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
        for r in &report.results {
            w.serialize(ComparisonRow {
                seed: r.seed,
                arm: r.arm.name(),
                auc: r.auc,
                acc: r.acc,
                sen: r.sen,
                spec: r.spec,
                best_epoch: r.best_epoch,
                seconds: r.seconds,
            })?;
        }
        w.flush().map_err(|e| Failure::io(&dir, e))?;
        let path = dir.join("summary.txt");
        fs::write(&path, report.table()).map_err(|e| Failure::io(&path, e))?;
    }
    Ok(())
}
