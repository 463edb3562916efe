//! Closed-form and loop-reference checks of the model and loss functions.

mod common;

use common::*;
use etta::autodiff::Matrix;
use etta::losses::{
    meta_objective, prototype_alignment_loss, sample_alignment_loss, symmetric_kl, task_loss,
};
use etta::model::{
    class_centroids, cosine_scores, embed, predict_probs, Backbone, ModelParams, PrototypeSet,
    PrototypeTag,
};

const TOL: f64 = 1e-10;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn general(m: Matrix) -> PrototypeSet {
    PrototypeSet::new(m, PrototypeTag::General).unwrap()
}

#[test]
fn cosine_scores_hand_example() {
    let e = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let p = general(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let s = cosine_scores(&e, &p).unwrap();
    assert!(close(s.get(0, 0), 0.6, 1e-15) && close(s.get(0, 1), 0.8, 1e-15));
}

#[test]
fn softmax_hand_example() {
    let s = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let p = predict_probs(&s, 1.0).unwrap();
    let e = std::f64::consts::E;
    // The probability floor shifts entries by at most 1e-7.
    assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-7);
    assert!((p.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-7);
    let eq = predict_probs(&Matrix::from_rows(&[vec![0.3; 4]]).unwrap(), 0.1).unwrap();
    assert!(eq.row(0).iter().all(|&v| close(v, 0.25, 1e-15)));
}

#[test]
fn centroid_of_two_points() {
    let e = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0], vec![5.0, 5.0]]).unwrap();
    let mu = class_centroids(&e, &[0, 0, 1], 0, 2).unwrap();
    assert_eq!(mu.vectors.row(0), &[1.0, 1.0]);
    assert_eq!(mu.vectors.row(1), &[5.0, 5.0]);
    assert!(class_centroids(&e, &[0, 0, 0], 0, 2).is_err());
}

#[test]
fn task_loss_examples() {
    let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    assert!(close(
        task_loss(&p, &[0, 0]).unwrap(),
        0.5 * 2f64.ln(),
        1e-15
    ));
    assert!(task_loss(&Matrix::zeros(0, 2), &[]).is_err());
}

#[test]
fn alignment_hand_examples() {
    // cos(own) = 0.6, cos(other) = 0.8.
    let e = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let p = general(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert!(close(
        sample_alignment_loss(&e, &[0], &p).unwrap(),
        1.2,
        1e-15
    ));
    let aligned = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
    assert!(sample_alignment_loss(&aligned, &[0], &p).unwrap().abs() < 1e-15);

    let kl = symmetric_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
    assert!((kl - 0.43945).abs() < 1e-5, "{kl}");
    assert!(close(
        kl,
        0.5 * (0.5f64 / 0.9).ln() * 0.5
            + 0.5 * (0.5f64 / 0.1).ln() * 0.5
            + 0.5 * (0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln()),
        1e-14
    ));
    assert_eq!(symmetric_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert!(symmetric_kl(&[0.5, 0.5], &[1.0]).is_err());

    assert!(close(
        meta_objective(1.2, 0.4, 1.0, 0.5).unwrap(),
        1.4,
        1e-15
    ));
    assert_eq!(meta_objective(7.0, 3.0, 0.0, 0.0).unwrap(), 0.0);
}

#[test]
fn identical_prototype_sets_do_not_disagree() {
    let mut r = rng(5);
    let e = random_matrix(&mut r, 6, 3);
    let s = random_matrix(&mut r, 2, 3);
    let sets = vec![general(s.clone()), general(s.clone()), general(s)];
    assert!(prototype_alignment_loss(&e, &sets, 0.1).unwrap().abs() < 1e-15);
    assert!(prototype_alignment_loss(&e, &sets[..1], 0.1).is_err());
}

/// Fifty random instances of every loss building block against loop-based
/// references.
#[test]
fn random_instances_match_loop_references() {
    let err = loss_oracle_max_error(2024, 50);
    assert!(err < TOL, "max relative error {err}");
}

#[test]
#[allow(clippy::needless_range_loop)]
fn mlp_forward_matches_straight_line_code() {
    let (hidden, d_z) = (5, 3);
    let params = ModelParams::init(
        Backbone::Mlp {
            d_in: 2,
            hidden,
            d_z,
        },
        2,
        0,
    )
    .unwrap();
    let x = [1.0, -1.0];
    let get = |name: &str| &params.phi.iter().find(|(n, _)| n == name).unwrap().1;
    let (w1, b1, w2, b2) = (get("w1"), get("b1"), get("w2"), get("b2"));
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut a = b1.get(0, j);
        for i in 0..2 {
            a += x[i] * w1.get(i, j);
        }
        h[j] = a.tanh();
    }
    let z = embed(&params, &Matrix::from_rows(&[x.to_vec()]).unwrap()).unwrap();
    for k in 0..d_z {
        let mut a = b2.get(0, k);
        for j in 0..hidden {
            a += h[j] * w2.get(j, k);
        }
        assert!(close(z.get(0, k), a, TOL));
    }
}

#[test]
fn identity_backbone_passes_inputs_through() {
    let params = ModelParams::init(Backbone::Identity { dim: 3 }, 2, 1).unwrap();
    let x = random_matrix(&mut rng(3), 4, 3);
    assert_eq!(embed(&params, &x).unwrap(), x);
    assert!(embed(&params, &random_matrix(&mut rng(3), 4, 2)).is_err());
}

#[test]
fn embedding_rows_are_independent() {
    let params = ModelParams::init(
        Backbone::Mlp {
            d_in: 2,
            hidden: 8,
            d_z: 4,
        },
        2,
        3,
    )
    .unwrap();
    let mut x = random_matrix(&mut rng(9), 5, 2);
    let before = embed(&params, &x).unwrap();
    x.set(3, 0, 42.0);
    let after = embed(&params, &x).unwrap();
    for i in [0, 1, 2, 4] {
        assert_eq!(before.row(i), after.row(i));
    }
}
