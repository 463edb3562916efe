//! Backbone-agnostic predictive model: a feature extractor followed by a
//! cosine classifier whose weight rows double as domain-general prototypes.
//!
//! Every operation exists once, as a tape builder (`*_graph`). The plain
//! `f64` functions run those builders on a throwaway tape, so the code path
//! that is unit-tested is the code path that is differentiated in training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Matrix, Scalar, Tape, Var};
use crate::data::rng_from_seed;
use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero in cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;
/// Lower bound on every predicted probability.
pub const PROB_FLOOR: f64 = 1e-7;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Pass-through: embeddings are the raw features.
    Identity { dim: usize },
    /// `z = tanh(x·W1 + b1)·W2 + b2`
    Mlp {
        d_in: usize,
        hidden: usize,
        d_z: usize,
    },
}

impl Backbone {
    pub fn d_in(&self) -> usize {
        match *self {
            Backbone::Identity { dim } => dim,
            Backbone::Mlp { d_in, .. } => d_in,
        }
    }

    pub fn d_z(&self) -> usize {
        match *self {
            Backbone::Identity { dim } => dim,
            Backbone::Mlp { d_z, .. } => d_z,
        }
    }

    /// Names and shapes of the feature-extractor parameters, in flat order.
    pub fn phi_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        match *self {
            Backbone::Identity { .. } => Vec::new(),
            Backbone::Mlp { d_in, hidden, d_z } => vec![
                ("w1", d_in, hidden),
                ("b1", 1, hidden),
                ("w2", hidden, d_z),
                ("b2", 1, d_z),
            ],
        }
    }
}

/// Feature-extractor parameters `phi` plus the `C × d_z` classifier matrix
/// `theta`, whose rows are the domain-general prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub backbone: Backbone,
    pub phi: Vec<(String, Matrix)>,
    pub theta: Matrix,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, standard-normal prototypes.
    pub fn init(backbone: Backbone, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        let mut rng = rng_from_seed(seed);
        let phi = backbone
            .phi_shapes()
            .into_iter()
            .map(|(name, r, c)| {
                let m = if name.starts_with('b') {
                    Matrix::zeros(r, c)
                } else {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    let data = (0..r * c).map(|_| rng.random_range(-a..a)).collect();
                    Matrix::from_vec(r, c, data).expect("shape")
                };
                (name.to_string(), m)
            })
            .collect();
        let d_z = backbone.d_z();
        let data = (0..num_classes * d_z)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let theta = Matrix::from_vec(num_classes, d_z, data)?;
        let p = ModelParams {
            backbone,
            phi,
            theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.theta.rows()
    }

    pub fn num_params(&self) -> usize {
        self.phi.iter().map(|(_, m)| m.data().len()).sum::<usize>() + self.theta.data().len()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.backbone.phi_shapes();
        if shapes.len() != self.phi.len() {
            return Err(Error::Shape("phi does not match the backbone".into()));
        }
        for ((name, r, c), (n, m)) in shapes.iter().zip(&self.phi) {
            if name != n || m.shape() != (*r, *c) {
                return Err(Error::Shape(format!(
                    "parameter {n} is {:?}, backbone wants {name} {r}x{c}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("parameter {n}")));
            }
        }
        if self.theta.cols() != self.backbone.d_z() {
            return Err(Error::Shape(format!(
                "theta has {} columns, embeddings have {}",
                self.theta.cols(),
                self.backbone.d_z()
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::NonFinite("parameter theta".into()));
        }
        for r in 0..self.theta.rows() {
            if self.theta.row_norm(r) <= NORM_FLOOR {
                return Err(Error::ZeroNorm(format!("prototype row {r}")));
            }
        }
        Ok(())
    }

    /// All parameters in one vector: `phi` entries in order, then `theta`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in &self.phi {
            out.extend_from_slice(m.data());
        }
        out.extend_from_slice(self.theta.data());
        out
    }

    /// Same structure as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let mut take = |m: &Matrix| {
            let n = m.data().len();
            let out = Matrix::from_vec(m.rows(), m.cols(), flat[offset..offset + n].to_vec());
            offset += n;
            out.expect("shape")
        };
        let phi = self
            .phi
            .iter()
            .map(|(name, m)| (name.clone(), take(m)))
            .collect();
        let theta = take(&self.theta);
        Ok(ModelParams {
            backbone: self.backbone,
            phi,
            theta,
        })
    }

    /// `a·self + b·other`, element-wise.
    pub fn lin_comb(&self, a: f64, other: &ModelParams, b: f64) -> Result<Self> {
        let (x, y) = (self.flatten(), other.flatten());
        if x.len() != y.len() {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        self.with_flat(&z)
    }

    pub fn general_prototypes(&self) -> PrototypeSet {
        PrototypeSet {
            vectors: self.theta.clone(),
            tag: PrototypeTag::General,
        }
    }
}

/// Parameters placed on a tape: one differentiable flat leaf, sliced into
/// the individual matrices.
pub struct ParamVars {
    pub leaf: Var,
    pub phi: Vec<Var>,
    pub theta: Var,
}

impl ParamVars {
    /// Places `flat` on the tape using the layout of `like`.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, like: &ModelParams, flat: Vec<T>) -> Self {
        let n = flat.len();
        let leaf = tape.input(Mat::from_vec(1, n, flat).expect("row vector"));
        let mut offset = 0;
        let phi = like
            .phi
            .iter()
            .map(|(_, m)| {
                let v = tape.slice(leaf, offset, m.rows(), m.cols());
                offset += m.data().len();
                v
            })
            .collect();
        let theta = tape.slice(leaf, offset, like.theta.rows(), like.theta.cols());
        ParamVars { leaf, phi, theta }
    }
}

pub fn lift<T: Scalar>(m: &Matrix) -> Mat<T> {
    Mat::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| T::from_f64(v)).collect(),
    )
    .expect("same shape")
}

pub fn embed_graph<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &Backbone,
    params: &ParamVars,
    inputs: Var,
) -> Var {
    match backbone {
        Backbone::Identity { .. } => inputs,
        Backbone::Mlp { .. } => {
            let [w1, b1, w2, b2] = params.phi[..] else {
                unreachable!("validated mlp layout")
            };
            let h = tape.matmul(inputs, w1);
            let h = tape.add_row(h, b1);
            let h = tape.tanh(h);
            let z = tape.matmul(h, w2);
            tape.add_row(z, b2)
        }
    }
}

/// Cosine similarity of every embedding row against every prototype row.
pub fn cosine_scores_graph<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, prototypes: Var) -> Var {
    let e = tape.row_normalize(embeddings, NORM_FLOOR);
    let p = tape.row_normalize(prototypes, NORM_FLOOR);
    tape.matmul_bt(e, p)
}

/// Temperature softmax, then affine mixing with the uniform floor so that
/// every entry is at least [`PROB_FLOOR`] and rows still sum to one.
pub fn predict_probs_graph<T: Scalar>(tape: &mut Tape<T>, scores: Var, temperature: f64) -> Var {
    let c = tape.value(scores).cols();
    let s = tape.softmax_rows(scores, 1.0 / temperature);
    let s = tape.scale(s, 1.0 - c as f64 * PROB_FLOOR);
    tape.add_const(s, PROB_FLOOR)
}

/// Constant averaging matrix `A` with `A·Z` = per-class means of `Z`'s rows.
pub fn centroid_weights(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} with C = {num_classes}"
            )));
        }
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::UndefinedPrototype { class });
    }
    let mut a = Matrix::zeros(num_classes, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        a.set(l, j, 1.0 / counts[l] as f64);
    }
    Ok(a)
}

pub fn centroids_graph<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    num_classes: usize,
) -> Result<Var> {
    let a = tape.constant(lift(&centroid_weights(labels, num_classes)?));
    Ok(tape.matmul(a, embeddings))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeTag {
    General,
    Domain(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Matrix,
    pub tag: PrototypeTag,
}

impl PrototypeSet {
    pub fn new(vectors: Matrix, tag: PrototypeTag) -> Result<Self> {
        if !vectors.is_finite() {
            return Err(Error::NonFinite("prototype vectors".into()));
        }
        for r in 0..vectors.rows() {
            if vectors.row_norm(r) <= NORM_FLOOR {
                return Err(Error::ZeroNorm(format!("prototype row {r}")));
            }
        }
        Ok(PrototypeSet { vectors, tag })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }
}

/// Forward pass of the feature extractor.
pub fn embed(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    let d_in = params.backbone.d_in();
    if inputs.cols() != d_in {
        return Err(Error::Shape(format!(
            "inputs have width {}, backbone expects {d_in}",
            inputs.cols()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let vars = ParamVars::new(&mut tape, params, params.flatten());
    let x = tape.constant(inputs.clone());
    let z = embed_graph(&mut tape, &params.backbone, &vars, x);
    Ok(tape.value(z).clone())
}

pub fn class_centroids(
    embeddings: &Matrix,
    labels: &[usize],
    domain_id: usize,
    num_classes: usize,
) -> Result<PrototypeSet> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(embeddings.clone());
    let mu = centroids_graph(&mut tape, z, labels, num_classes)?;
    PrototypeSet::new(tape.value(mu).clone(), PrototypeTag::Domain(domain_id))
}

pub fn cosine_scores(embeddings: &Matrix, prototypes: &PrototypeSet) -> Result<Matrix> {
    if embeddings.cols() != prototypes.vectors.cols() {
        return Err(Error::Shape(format!(
            "embedding width {} vs prototype width {}",
            embeddings.cols(),
            prototypes.vectors.cols()
        )));
    }
    for r in 0..embeddings.rows() {
        if embeddings.row_norm(r) == 0.0 {
            return Err(Error::ZeroNorm(format!("embedding row {r}")));
        }
    }
    for r in 0..prototypes.vectors.rows() {
        if prototypes.vectors.row_norm(r) == 0.0 {
            return Err(Error::ZeroNorm(format!("prototype row {r}")));
        }
    }
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(embeddings.clone());
    let p = tape.constant(prototypes.vectors.clone());
    let s = cosine_scores_graph(&mut tape, e, p);
    Ok(tape.value(s).clone())
}

pub fn predict_probs(scores: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(scores.clone());
    let p = predict_probs_graph(&mut tape, s, temperature);
    Ok(tape.value(p).clone())
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Class predictions of the cosine classifier.
pub fn predict(params: &ModelParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let z = embed(params, inputs)?;
    Ok(cosine_scores(&z, &params.general_prototypes())?.argmax_rows())
}
