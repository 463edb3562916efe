//! Loop-based reference implementations and fixtures shared by the
//! integration tests. Written independently of the tape-based code paths.
#![allow(dead_code)]
// References are written as plain index loops on purpose.
#![allow(clippy::needless_range_loop)]

use etta::autodiff::Matrix;
use etta::data::{
    generate_synthetic_domains, rng_from_seed, split_train_test, RngState, SplitSpec,
    SyntheticFamily,
};
use etta::eval::SplitDomain;
use etta::model::PROB_FLOOR;
use rand::Rng;

pub fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Labels covering every class at least once.
pub fn random_labels(rng: &mut RngState, n: usize, c: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < c { i } else { rng.random_range(0..c) })
        .collect();
    // Fisher–Yates so the guaranteed entries are not always first.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    dot / (norm(a) * norm(b))
}

pub fn ref_scores(emb: &Matrix, protos: &Matrix) -> Vec<Vec<f64>> {
    (0..emb.rows())
        .map(|i| {
            (0..protos.rows())
                .map(|c| ref_cosine(emb.row(i), protos.row(c)))
                .collect()
        })
        .collect()
}

pub fn ref_centroids(emb: &Matrix, labels: &[usize], c: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; emb.cols()]; c];
    let mut counts = vec![0.0; c];
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..emb.cols() {
            sums[l][j] += emb.get(i, j);
        }
        counts[l] += 1.0;
    }
    for k in 0..c {
        for v in sums[k].iter_mut() {
            *v /= counts[k];
        }
    }
    sums
}

pub fn ref_probs(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .map(|s| ((s - m) / temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    let c = scores.len() as f64;
    e.iter()
        .map(|v| v / z * (1.0 - c * PROB_FLOOR) + PROB_FLOOR)
        .collect()
}

pub fn ref_sym_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_pq = 0.0;
    let mut kl_qp = 0.0;
    for i in 0..p.len() {
        kl_pq += p[i] * (p[i] / q[i]).ln();
        kl_qp += q[i] * (q[i] / p[i]).ln();
    }
    0.5 * (kl_pq + kl_qp)
}

pub fn ref_sample_alignment(emb: &Matrix, labels: &[usize], protos: &Matrix) -> f64 {
    let scores = ref_scores(emb, protos);
    let mut total = 0.0;
    for (i, &own) in labels.iter().enumerate() {
        let mut v = 1.0 - scores[i][own];
        for (d, s) in scores[i].iter().enumerate() {
            if d != own {
                v += s;
            }
        }
        total += v;
    }
    total / labels.len() as f64
}

pub fn ref_prototype_alignment(emb: &Matrix, sets: &[Matrix], temperature: f64) -> f64 {
    let probs: Vec<Vec<Vec<f64>>> = sets
        .iter()
        .map(|s| {
            ref_scores(emb, s)
                .iter()
                .map(|row| ref_probs(row, temperature))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut terms = 0.0;
    for i in 0..emb.rows() {
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                total += ref_sym_kl(&probs[a][i], &probs[b][i]);
                terms += 1.0;
            }
        }
    }
    total / terms
}

/// Four rotated-moons domains (0/30/60/90 degrees), 400 samples each, with
/// 70/30 splits.
pub fn moons_benchmark() -> Vec<SplitDomain> {
    let ds = generate_synthetic_domains(
        SyntheticFamily::RotatedTwoMoons,
        4,
        400,
        &[0.0, 30.0, 60.0, 90.0],
        7,
    )
    .unwrap();
    ds.iter()
        .enumerate()
        .map(|(k, d)| {
            let (train, test) = split_train_test(
                d,
                SplitSpec {
                    train_fraction: 0.7,
                    seed: k as u64,
                },
            )
            .unwrap();
            SplitDomain { train, test }
        })
        .collect()
}

pub fn rng(seed: u64) -> RngState {
    rng_from_seed(seed)
}

/// Composite bilevel objective `L_task(w) + L_meta(w − α∇L_task(w))` of one
/// sampled episode on a small MLP, with its analytic meta-gradient and a
/// central finite-difference estimate.
pub struct MetaGradientCheck {
    pub num_params: usize,
    pub analytic: Vec<f64>,
    pub first_order: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

impl MetaGradientCheck {
    pub fn relative_error(&self, g: &[f64]) -> f64 {
        let diff: f64 = g
            .iter()
            .zip(&self.finite_difference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / norm(&self.finite_difference)
    }
}

pub fn meta_gradient_check(alpha: f64, step: f64) -> MetaGradientCheck {
    use etta::episodes::{sample_task_mts, MixRatioSchedule};
    use etta::metatrain::{
        adapt, meta_gradient, InnerRule, MetaObjective, MetaObjectiveMode, Objective, TaskObjective,
    };
    use etta::model::{Backbone, ModelParams};

    let ds = generate_synthetic_domains(
        SyntheticFamily::RotatedTwoMoons,
        3,
        60,
        &[0.0, 40.0, 80.0],
        3,
    )
    .unwrap();
    let task = sample_task_mts(
        &ds,
        &MixRatioSchedule::default(),
        6,
        8,
        &mut rng_from_seed(4),
    )
    .unwrap();
    let params = ModelParams::init(
        Backbone::Mlp {
            d_in: 2,
            hidden: 10,
            d_z: 5,
        },
        2,
        1,
    )
    .unwrap();
    let temperature = 0.5;
    let task_obj = TaskObjective {
        template: &params,
        batches: task.meta_train_batches(),
        temperature,
    };
    let meta_obj = MetaObjective {
        template: &params,
        meta_train: task.meta_train_batches(),
        meta_test: task.meta_test_batch(),
        mode: MetaObjectiveMode::Se,
        gamma1: 1.0,
        gamma2: 0.5,
        temperature,
    };
    // Clipping threshold far above any gradient norm: the map is smooth.
    let rule = InnerRule::ClippedSgd {
        lr: alpha,
        clip: 1e6,
    };
    let w0 = params.flatten();
    let composite = |w: &[f64]| {
        let tr = adapt(w, &task_obj, rule, 1).unwrap();
        tr.initial_value + meta_obj.value_grad(&tr.adapted).unwrap().0
    };
    let trace = adapt(&w0, &task_obj, rule, 1).unwrap();
    let analytic = meta_gradient(&trace, &task_obj, &meta_obj, rule, true)
        .unwrap()
        .grad;
    let first_order = meta_gradient(&trace, &task_obj, &meta_obj, rule, false)
        .unwrap()
        .grad;
    let finite_difference = (0..w0.len())
        .map(|i| {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[i] += step;
            wm[i] -= step;
            (composite(&wp) - composite(&wm)) / (2.0 * step)
        })
        .collect();
    MetaGradientCheck {
        num_params: w0.len(),
        analytic,
        first_order,
        finite_difference,
    }
}

/// Outer gradient of the one-parameter composite `½w² + ½w′²`, `w′ = (1−α)w`.
pub fn analytic_bilevel_gradient(w: f64, alpha: f64, second_order: bool) -> f64 {
    use etta::metatrain::{adapt, meta_gradient, quadratic, InnerRule};
    let task = quadratic(vec![0.0]);
    let meta = quadratic(vec![0.0]);
    let rule = InnerRule::ClippedSgd {
        lr: alpha,
        clip: 2.0,
    };
    let trace = adapt(&[w], &task, rule, 1).unwrap();
    meta_gradient(&trace, &task, &meta, rule, second_order)
        .unwrap()
        .grad[0]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

/// Largest relative deviation between the library and the loop references
/// (cosine scores, probabilities, centroids, both alignment losses and the
/// symmetric KL) over `instances` random problems.
pub fn loss_oracle_max_error(seed: u64, instances: usize) -> f64 {
    use etta::losses::{prototype_alignment_loss, sample_alignment_loss, symmetric_kl};
    use etta::model::{class_centroids, cosine_scores, predict_probs, PrototypeSet, PrototypeTag};

    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.random_range(5..12);
        let c = r.random_range(2..5);
        let d = r.random_range(2..6);
        let temperature = r.random_range(0.05..2.0);
        let emb = random_matrix(&mut r, n, d);
        let labels = random_labels(&mut r, n, c);
        let protos = random_matrix(&mut r, c, d);
        let general = PrototypeSet::new(protos.clone(), PrototypeTag::General).unwrap();

        let scores = cosine_scores(&emb, &general).unwrap();
        let want = ref_scores(&emb, &protos);
        let probs = predict_probs(&scores, temperature).unwrap();
        for i in 0..n {
            let want_p = ref_probs(&want[i], temperature);
            for k in 0..c {
                worst = worst.max(rel_err(scores.get(i, k), want[i][k]));
                worst = worst.max(rel_err(probs.get(i, k), want_p[k]));
            }
        }

        let mu = class_centroids(&emb, &labels, 0, c).unwrap();
        let want_mu = ref_centroids(&emb, &labels, c);
        for k in 0..c {
            for j in 0..d {
                worst = worst.max(rel_err(mu.vectors.get(k, j), want_mu[k][j]));
            }
        }

        let sa = sample_alignment_loss(&emb, &labels, &general).unwrap();
        worst = worst.max(rel_err(sa, ref_sample_alignment(&emb, &labels, &protos)));

        let k_sets = r.random_range(2..5);
        let sets: Vec<Matrix> = (0..k_sets).map(|_| random_matrix(&mut r, c, d)).collect();
        let tagged: Vec<PrototypeSet> = sets
            .iter()
            .enumerate()
            .map(|(i, m)| PrototypeSet::new(m.clone(), PrototypeTag::Domain(i)).unwrap())
            .collect();
        let pa = prototype_alignment_loss(&emb, &tagged, temperature).unwrap();
        worst = worst.max(rel_err(
            pa,
            ref_prototype_alignment(&emb, &sets, temperature),
        ));

        let p = ref_probs(&want[0], temperature);
        let q = ref_probs(&want[n - 1], temperature);
        worst = worst.max(rel_err(symmetric_kl(&p, &q).unwrap(), ref_sym_kl(&p, &q)));
    }
    worst
}
