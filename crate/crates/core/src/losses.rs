//! Task loss and the two cross-domain alignment objectives.
//!
//! Sums over samples (and prototype pairs) are reduced with means, so loss
//! scales do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    check_temperature, cosine_scores_graph, lift, predict_probs_graph, PrototypeSet, PrototypeTag,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Task loss on the meta-train batches at the original parameters.
    pub task: f64,
    pub sa: f64,
    pub pa: f64,
    /// The meta-objective that was optimized: `γ1·sa + γ2·pa`, or the
    /// meta-test task loss in task-only mode.
    pub meta: f64,
    pub weighted_total: f64,
}

/// Mean negative log-likelihood of the labels.
pub fn task_loss_graph<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Var {
    let picked = tape.pick_per_row(probs, labels);
    let logp = tape.ln(picked);
    let m = tape.mean_all(logp);
    tape.scale(m, -1.0)
}

/// Sum over samples of `(1 − cos(f, μ_own)) + Σ_{d≠own} cos(f, μ_d)`.
///
/// Returned as a sum so callers can pool several batches before dividing.
pub fn sample_alignment_sum_graph<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    general: Var,
) -> Var {
    let scores = cosine_scores_graph(tape, embeddings, general);
    let (n, c) = tape.value(scores).shape();
    // Per row: Σ_d s_d − 2·s_own, then + 1.
    let mut w = Matrix::filled(n, c, 1.0);
    for (j, &l) in labels.iter().enumerate() {
        w.set(j, l, -1.0);
    }
    let w = tape.constant(lift(&w));
    let weighted = tape.mul(scores, w);
    let s = tape.sum_all(weighted);
    tape.add_const(s, n as f64)
}

/// Row-wise `½(KL(p‖q) + KL(q‖p)) = ½ Σ_c (p_c − q_c)(ln p_c − ln q_c)`, summed over rows.
pub fn symmetric_kl_sum_graph<T: Scalar>(tape: &mut Tape<T>, p: Var, q: Var) -> Var {
    let d = tape.sub(p, q);
    let lp = tape.ln(p);
    let lq = tape.ln(q);
    let dl = tape.sub(lp, lq);
    let prod = tape.mul(d, dl);
    let s = tape.sum_all(prod);
    tape.scale(s, 0.5)
}

/// Mean over meta-test samples and unordered prototype-set pairs of the
/// symmetric KL between the predictions made with each set.
pub fn prototype_alignment_graph<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    prototype_sets: &[Var],
    temperature: f64,
) -> Var {
    let n = tape.value(embeddings).rows();
    let probs: Vec<Var> = prototype_sets
        .iter()
        .map(|&mu| {
            let s = cosine_scores_graph(tape, embeddings, mu);
            predict_probs_graph(tape, s, temperature)
        })
        .collect();
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for a in 0..probs.len() {
        for b in a + 1..probs.len() {
            let kl = symmetric_kl_sum_graph(tape, probs[a], probs[b]);
            total = Some(match total {
                Some(t) => tape.add(t, kl),
                None => kl,
            });
            pairs += 1;
        }
    }
    let total = total.expect("at least one pair");
    tape.scale(total, 1.0 / (n * pairs) as f64)
}

fn check_labels(probs_rows: usize, labels: &[usize], c: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != probs_rows {
        return Err(Error::Shape(format!(
            "{} labels for {probs_rows} rows",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {l} with C = {c}")));
    }
    Ok(())
}

pub fn task_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs.rows(), labels, probs.cols())?;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(probs.clone());
    let l = task_loss_graph(&mut tape, p, labels);
    Ok(tape.scalar(l))
}

pub fn sample_alignment_loss(
    embeddings: &Matrix,
    labels: &[usize],
    general_prototypes: &PrototypeSet,
) -> Result<f64> {
    if general_prototypes.tag != PrototypeTag::General {
        return Err(Error::InvalidArgument(
            "sample alignment needs the general prototypes".into(),
        ));
    }
    check_labels(embeddings.rows(), labels, general_prototypes.num_classes())?;
    // Validates widths and zero norms.
    crate::model::cosine_scores(embeddings, general_prototypes)?;
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(embeddings.clone());
    let mu = tape.constant(general_prototypes.vectors.clone());
    let s = sample_alignment_sum_graph(&mut tape, z, labels, mu);
    Ok(tape.scalar(s) / labels.len() as f64)
}

/// Symmetrized KL divergence (natural log) between two strictly positive
/// probability vectors.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "probabilities must be positive (apply the floor first)".into(),
        ));
    }
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Matrix::from_vec(1, p.len(), p.to_vec())?);
    let qv = tape.constant(Matrix::from_vec(1, q.len(), q.to_vec())?);
    let s = symmetric_kl_sum_graph(&mut tape, pv, qv);
    Ok(tape.scalar(s))
}

pub fn prototype_alignment_loss(
    meta_test_embeddings: &Matrix,
    prototype_sets: &[PrototypeSet],
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    if prototype_sets.len() < 2 {
        return Err(Error::InvalidArgument(
            "prototype alignment needs at least two prototype sets".into(),
        ));
    }
    if meta_test_embeddings.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for set in prototype_sets {
        crate::model::cosine_scores(meta_test_embeddings, set)?;
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(meta_test_embeddings.clone());
    let sets: Vec<Var> = prototype_sets
        .iter()
        .map(|s| tape.constant(s.vectors.clone()))
        .collect();
    let l = prototype_alignment_graph(&mut tape, z, &sets, temperature);
    Ok(tape.scalar(l))
}

/// `γ1·sa + γ2·pa`
pub fn meta_objective(sa: f64, pa: f64, gamma1: f64, gamma2: f64) -> Result<f64> {
    if gamma1 < 0.0 || gamma2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "trade-off weights must be nonnegative, got ({gamma1}, {gamma2})"
        )));
    }
    Ok(gamma1 * sa + gamma2 * pa)
}
