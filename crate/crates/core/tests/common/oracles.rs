//! Independent oracles shared by the unit-level tests and the acceptance
//! harness.

use l2tkt::diffcore::{self, max_relative_error, Graph, ParamSet, Tensor, Vars};
use l2tkt::models::{init_student, init_teacher_from_baseline, StudentModel, TeacherModel};
use l2tkt::quizpool::{PoolMember, QuizPool};
use l2tkt::trainer::{
    bce_objective, kt_objective, AuxBatch, IterationBatches, LabeledBatch, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{column_batch, random_rows, rng, Dense};

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn state_from<A: l2tkt::models::Architecture>(
    student: StudentModel<A, f64>,
    teacher: TeacherModel<A, f64>,
    pool_ids: &[u64],
) -> TrainState<A, f64> {
    let pool = QuizPool::new(
        pool_ids
            .iter()
            .map(|&id| PoolMember {
                id,
                label: (id % 2) as u8,
                psi: 0.5,
            })
            .collect(),
    )
    .unwrap();
    TrainState {
        student,
        teacher,
        textbook: Vec::new(),
        pool,
        epoch: 0,
        iteration: 0,
        rng: ChaCha8Rng::seed_from_u64(0),
        history: Vec::new(),
        pool_log: Vec::new(),
        best: None,
        adam: None,
    }
}

pub fn linear_models(
    vals: &[(&str, Vec<f64>)],
) -> (StudentModel<Dense, f64>, TeacherModel<Dense, f64>) {
    let get = |k: &str| vals.iter().find(|(n, _)| *n == k).unwrap().1.clone();
    let student: ParamSet<f64> = [
        ("enc.w", vec![1, 1], get("w")),
        ("enc.b", vec![1], get("c")),
        ("head.w", vec![1, 1], get("hw")),
        ("head.b", vec![1], get("hb")),
    ]
    .into_iter()
    .map(|(k, s, d)| (k.to_string(), Tensor::new(s, d).unwrap()))
    .collect();
    let teacher: ParamSet<f64> = [
        ("enc.w", vec![2, 1], get("ab")),
        ("enc.b", vec![1], get("e")),
    ]
    .into_iter()
    .map(|(k, s, d)| (k.to_string(), Tensor::new(s, d).unwrap()))
    .collect();
    (
        StudentModel {
            arch: Dense::linear(1, 1),
            params: student,
        },
        TeacherModel {
            arch: Dense::linear(2, 1),
            params: teacher,
        },
    )
}

pub fn aux_batch(x: &[f64], m: &[f64]) -> AuxBatch<f64> {
    AuxBatch {
        ids: (0..x.len() as u64).collect(),
        student_input: column_batch(&x.iter().map(|&v| vec![v]).collect::<Vec<_>>()),
        teacher_input: column_batch(
            &x.iter()
                .zip(m)
                .map(|(&a, &b)| vec![a, b])
                .collect::<Vec<_>>(),
        ),
    }
}

pub fn labeled_batch(ids: &[u64], x: &[f64], y: &[u8]) -> LabeledBatch<f64> {
    LabeledBatch {
        ids: ids.to_vec(),
        input: column_batch(&x.iter().map(|&v| vec![v]).collect::<Vec<_>>()),
        labels: y.to_vec(),
    }
}

/// `∂L/∂s_i` and `∂²L/∂s_i∂t_j` of `L = 1 − (s·t)²/((s·s)(t·t))`.
pub fn kt_derivatives(s: &[f64], t: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
    let q: f64 = s.iter().map(|a| a * a).sum();
    let r: f64 = t.iter().map(|b| b * b).sum();
    let g: Vec<f64> = (0..s.len())
        .map(|i| -2.0 * p * t[i] / (q * r) + 2.0 * p * p * s[i] / (q * q * r))
        .collect();
    let h = (0..s.len())
        .map(|i| {
            (0..s.len())
                .map(|j| {
                    let d = if i == j { 1.0 } else { 0.0 };
                    -2.0 * ((s[j] * t[i] + p * d) / (q * r) - 2.0 * p * t[i] * t[j] / (q * r * r))
                        + 2.0
                            * s[i]
                            * (2.0 * p * s[j] / (q * q * r) - 2.0 * p * p * t[j] / (q * q * r * r))
                })
                .collect()
        })
        .collect();
    (g, h)
}

/// Runs one full iteration on the 2-parameter linear model and compares it
/// with the hand-derived three-stage update. Returns the largest parameter
/// deviation and how far the teacher's first weight moved.
pub fn single_iteration_deviation() -> (f64, f64) {
    let (w, c, hw, hb) = (0.7, -0.2, 1.3, 0.1);
    let (a, b, e) = (0.4, -0.9, 0.3);
    let (ls, lt) = (0.1, 0.05);
    let x1 = [0.5, -1.0, 0.8, 0.2];
    let m1 = [1.0, 0.0, 0.5, -0.5];
    let xt = [0.3, -0.6, 0.9];
    let yt = [1u8, 0, 1];
    let x2 = [-0.4, 0.6, 1.1, -0.8];
    let m2 = [0.2, 0.9, -0.3, 0.7];
    let xq = [0.2, -0.7];
    let yq = [1u8, 0];

    // Stage 1: knowledge transfer on (x1, m1).
    let teach = |x: &[f64], m: &[f64]| -> Vec<f64> {
        x.iter().zip(m).map(|(x, m)| a * x + b * m + e).collect()
    };
    let t1 = teach(&x1, &m1);
    let s1: Vec<f64> = x1.iter().map(|x| w * x + c).collect();
    let (g1, _) = kt_derivatives(&s1, &t1);
    let w1 = w - ls * g1.iter().zip(&x1).map(|(g, x)| g * x).sum::<f64>();
    let c1 = c - ls * g1.iter().sum::<f64>();

    // Stage 2: mean BCE on the textbook batch.
    let k = xt.len() as f64;
    let (mut gw, mut gc, mut ghw, mut ghb) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xt.iter().zip(&yt) {
        let s = w1 * x + c1;
        let dz = (sigmoid(hw * s + hb) - y as f64) / k;
        gw += dz * hw * x;
        gc += dz * hw;
        ghw += dz * s;
        ghb += dz;
    }
    let (w2, c2, hw2, hb2) = (w1 - ls * gw, c1 - ls * gc, hw - ls * ghw, hb - ls * ghb);

    // Stage 3: virtual student on (x2, m2), quiz loss, chain rule to the teacher.
    let t2 = teach(&x2, &m2);
    let s2: Vec<f64> = x2.iter().map(|x| w2 * x + c2).collect();
    let (g2, h2) = kt_derivatives(&s2, &t2);
    let wv = w2 - ls * g2.iter().zip(&x2).map(|(g, x)| g * x).sum::<f64>();
    let cv = c2 - ls * g2.iter().sum::<f64>();
    let nq = xq.len() as f64;
    let (mut dwv, mut dcv) = (0.0, 0.0);
    for (&x, &y) in xq.iter().zip(&yq) {
        let dz = (sigmoid(hw2 * (wv * x + cv) + hb2) - y as f64) / nq;
        dwv += dz * hw2 * x;
        dcv += dz * hw2;
    }
    // ∂(gw, gc)/∂t_j, then ∂t_j/∂(a, b, e) = (x_j, m_j, 1).
    let n = x2.len();
    let dgw_dt: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| x2[i] * h2[i][j]).sum())
        .collect();
    let dgc_dt: Vec<f64> = (0..n).map(|j| (0..n).map(|i| h2[i][j]).sum()).collect();
    let meta = |dt: &dyn Fn(usize) -> f64| -> f64 {
        let dgw: f64 = (0..n).map(|j| dgw_dt[j] * dt(j)).sum();
        let dgc: f64 = (0..n).map(|j| dgc_dt[j] * dt(j)).sum();
        dwv * (-ls * dgw) + dcv * (-ls * dgc)
    };
    let (ga, gb, ge) = (meta(&|j| x2[j]), meta(&|j| m2[j]), meta(&|_| 1.0));
    let expected_teacher = [a - lt * ga, b - lt * gb, e - lt * ge];
    let expected_student = [w2, c2, hw2, hb2];

    let (student, teacher) = linear_models(&[
        ("w", vec![w]),
        ("c", vec![c]),
        ("hw", vec![hw]),
        ("hb", vec![hb]),
        ("ab", vec![a, b]),
        ("e", vec![e]),
    ]);
    let mut state = state_from(student, teacher, &[20, 21]);
    let cfg = TrainConfig {
        lambda_s: ls,
        lambda_t: lt,
        cka_centered: false,
        check_isolation: true,
        ..TrainConfig::default()
    };
    let batches = IterationBatches {
        aux_kt: aux_batch(&x1, &m1),
        textbook: labeled_batch(&[10, 11, 12], &xt, &yt),
        aux_meta: aux_batch(&x2, &m2),
        quiz: labeled_batch(&[20, 21], &xq, &yq),
    };
    state.iteration(&cfg, &batches, None).unwrap();

    let sp = &state.student.params;
    let got_student = [
        sp.get("enc.w").unwrap().data()[0],
        sp.get("enc.b").unwrap().data()[0],
        sp.get("head.w").unwrap().data()[0],
        sp.get("head.b").unwrap().data()[0],
    ];
    let tp = &state.teacher.params;
    let tw = tp.get("enc.w").unwrap().data();
    let got_teacher = [tw[0], tw[1], tp.get("enc.b").unwrap().data()[0]];
    let dev = got_student
        .iter()
        .zip(&expected_student)
        .chain(got_teacher.iter().zip(&expected_teacher))
        .map(|(g, e)| (g - e).abs())
        .fold(0.0, f64::max);
    (dev, (got_teacher[0] - a).abs())
}

pub fn dense_pair(seed: u64) -> (StudentModel<Dense, f64>, TeacherModel<Dense, f64>) {
    let arch = Dense {
        inputs: 3,
        features: 4,
        hidden: Some(5),
    };
    let student = init_student(&arch, seed).unwrap();
    let mut teacher =
        init_teacher_from_baseline(&init_student(&arch, seed + 100).unwrap(), 2).unwrap();
    // Give the mask inputs nonzero weights so every teacher entry matters.
    let mut r = rng(seed + 7);
    teacher.params = teacher
        .params
        .iter()
        .map(|(k, v)| {
            let data = v
                .data()
                .iter()
                .map(|x| x + r.random_range(-0.3..0.3))
                .collect();
            (
                k.to_string(),
                Tensor::new(v.shape().to_vec(), data).unwrap(),
            )
        })
        .collect();
    (student, teacher)
}

pub fn dense_aux(n: usize, seed: u64) -> AuxBatch<f64> {
    let mut r = rng(seed);
    let rows = random_rows(n, 5, &mut r);
    AuxBatch {
        ids: (0..n as u64).collect(),
        student_input: column_batch(&rows.iter().map(|v| v[..3].to_vec()).collect::<Vec<_>>()),
        teacher_input: column_batch(&rows),
    }
}

pub fn dense_quiz(ids: &[u64], seed: u64) -> LabeledBatch<f64> {
    let mut r = rng(seed);
    LabeledBatch {
        ids: ids.to_vec(),
        input: column_batch(&random_rows(ids.len(), 3, &mut r)),
        labels: ids.iter().map(|i| (i % 2) as u8).collect(),
    }
}

/// Largest relative error between the exact meta-gradient over every
/// teacher entry of the 2-layer toy and central finite differences.
pub fn meta_gradient_fd_error(seed: u64) -> f64 {
    let (student, teacher) = dense_pair(seed);
    let aux = dense_aux(6, seed + 1);
    let quiz = dense_quiz(&[1, 2, 3, 4], seed + 2);
    let cfg = TrainConfig {
        lambda_s: 0.5,
        ..TrainConfig::default()
    };
    let (sa, ta) = (student.arch.clone(), teacher.arch.clone());

    let analytic = diffcore::grad_through_update(
        |_g: &Graph<f64>, t: &Vars<'_, f64>, s: &Vars<'_, f64>| {
            kt_objective(&sa, &ta, t, s, &aux, true)
        },
        |_g: &Graph<f64>, s: &Vars<'_, f64>| bce_objective(&sa, s, &quiz, cfg.bce_epsilon),
        &teacher.params,
        &student.params,
        cfg.lambda_s,
    );
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => panic!("{e}"),
    };

    let quiz_after_virtual_step = |tp: &ParamSet<f64>| -> l2tkt::Result<f64> {
        let inner = diffcore::grad(
            |_g: &Graph<f64>, s: &Vars<'_, f64>| {
                let g = s.values().next().unwrap().graph();
                kt_objective(&sa, &ta, &tp.constants(g), s, &aux, true)
            },
            &student.params,
        )?;
        let virt = student.params.descend(&inner.grad, cfg.lambda_s)?;
        Ok(diffcore::grad(
            |_g: &Graph<f64>, s: &Vars<'_, f64>| bce_objective(&sa, s, &quiz, cfg.bce_epsilon),
            &virt,
        )?
        .value)
    };
    let numeric =
        diffcore::finite_difference(quiz_after_virtual_step, &teacher.params, 1e-5).unwrap();
    assert!(!analytic.grad.is_all_zero());
    max_relative_error(&analytic.grad, &numeric, 1e-6)
}

/// CKA through explicit n×n Gram matrices: `tr(KHLH) / √(tr(KHKH)·tr(LHLH))`.
pub fn gram_cka(t: &[Vec<f64>], s: &[Vec<f64>], centered: bool) -> f64 {
    let n = t.len();
    let gram = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    };
    let center = |k: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        if !centered {
            return k;
        }
        let row: Vec<f64> = (0..n)
            .map(|i| k[i].iter().sum::<f64>() / n as f64)
            .collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n)
            .map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect())
            .collect()
    };
    let (k, l) = (center(gram(t)), center(gram(s)));
    let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        (0..n)
            .map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>())
            .sum()
    };
    dot(&k, &l) / (dot(&k, &k) * dot(&l, &l)).sqrt()
}

/// Orthogonal matrix from Gram–Schmidt on a square matrix.
pub fn orthonormalize(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..a.len() {
        for j in 0..i {
            let d: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
            let prev = a[j].clone();
            a[i].iter_mut().zip(&prev).for_each(|(x, y)| *x -= d * y);
        }
        let norm = a[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        a[i].iter_mut().for_each(|x| *x /= norm);
    }
    a
}

pub fn right_multiply(x: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..q[0].len())
                .map(|c| r.iter().zip(q).map(|(a, qr)| a * qr[c]).sum())
                .collect()
        })
        .collect()
}

pub fn nondegenerate(x: &[Vec<f64>]) -> bool {
    let n = x.len() as f64;
    let d = x[0].len();
    (0..d).any(|c| {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / n;
        x.iter().any(|r| (r[c] - mean).abs() > 1e-6)
    })
}

/// Pairwise win rate over all (positive, negative) pairs, ties counting ½.
pub fn brute_auc(preds: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                wins += if preds[i] > preds[j] {
                    1.0
                } else if preds[i] == preds[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}
