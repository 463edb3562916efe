//! Episodic bilevel training.
//!
//! Each iteration samples a meta-task, adapts a temporary copy of the
//! parameters on the meta-train batches (inner step), and updates the
//! original parameters with the gradient of
//! `L_task(meta-train; w) + L_meta(meta-train, meta-test; w')`.
//!
//! The outer gradient is taken with respect to the original `w`, through the
//! inner step. For an inner map `w' = w − u(∇L(w))` the chain rule gives
//! `∂w'/∂w = I − J_u·H`, so its transpose applied to `v = ∇L_meta(w')` is
//! `v − H·(J_u·v)`, because both the Hessian `H` and the step Jacobian `J_u`
//! are symmetric. `H·x` comes from a forward-over-reverse sweep on dual
//! numbers; no Hessian is ever formed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Scalar, Tape, Var};
use crate::data::{pool_domains, rng_from_seed, sample_indices, Batch, DomainDataset};
use crate::episodes::{sample_task_mts, sample_task_ts, MetaTask, MixRatioSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    prototype_alignment_graph, sample_alignment_sum_graph, task_loss_graph, LossBreakdown,
};
use crate::model::{
    centroids_graph, cosine_scores_graph, embed_graph, lift, predict_probs_graph, ModelParams,
    ParamVars, DEFAULT_TEMPERATURE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaObjectiveMode {
    /// Sample-wise plus prototype-wise embedding alignment.
    Se,
    /// Task loss on the meta-test set.
    TaskOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ts,
    Mts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta-update) learning rate.
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub clip_norm: f64,
    pub iterations: usize,
    pub inner_steps: usize,
    pub batch_per_domain: usize,
    pub n_te: usize,
    pub meta_objective_mode: MetaObjectiveMode,
    pub sampler_mode: SamplerMode,
    pub second_order: bool,
    pub temperature: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Use the adaptive optimizer for the inner step and clipped SGD for
    /// the outer step instead of the other way round.
    pub swap_optimizers: bool,
    /// Class-balanced batches (episodes and the pooled baseline).
    pub class_balanced: bool,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 5e-5,
            beta: 5e-5,
            gamma1: 1.0,
            gamma2: 0.5,
            clip_norm: 2.0,
            iterations: 10_000,
            inner_steps: 1,
            batch_per_domain: 120,
            n_te: 120,
            meta_objective_mode: MetaObjectiveMode::Se,
            sampler_mode: SamplerMode::Mts,
            second_order: true,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            swap_optimizers: false,
            class_balanced: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the 2-D synthetic benchmarks: larger rates so that a
    /// 2000-iteration run actually converges, smaller batches.
    pub fn desk_scale() -> Self {
        TrainConfig {
            alpha: 0.01,
            beta: 3e-3,
            iterations: 2000,
            batch_per_domain: 32,
            n_te: 32,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha >= 0.0 && self.beta > 0.0) {
            return bad(format!(
                "learning rates must be positive (alpha {}, beta {})",
                self.alpha, self.beta
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if self.iterations == 0 || self.inner_steps == 0 {
            return bad("iterations and inner_steps must be >= 1".into());
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return bad("gamma1 and gamma2 must be nonnegative".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.batch_per_domain == 0 || self.n_te == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }
}

/// Scales `gradient` down to norm `threshold` when it is longer.
pub fn clip_by_norm(gradient: &[f64], threshold: f64) -> Vec<f64> {
    let n = l2(gradient);
    if n <= threshold {
        gradient.to_vec()
    } else {
        let k = threshold / n;
        gradient.iter().map(|g| g * k).collect()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what}, entry {i} = {}", v[i]))),
    }
}

/// A scalar function of a flat parameter vector with exact first and
/// second-order directional derivatives.
pub trait Objective {
    fn value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Hessian-vector product `∇²f(w)·v`.
    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// Differentiable update rule `w ↦ w − u(g)` used for the inner step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerRule {
    /// `u(g) = lr · clip(g)`
    ClippedSgd { lr: f64, clip: f64 },
    /// A first adaptive-moment step from fresh state, which reduces to
    /// `u(g) = lr · g / (|g| + eps)` element-wise.
    FreshAdam { lr: f64, eps: f64 },
}

impl InnerRule {
    pub fn step(&self, g: &[f64]) -> Vec<f64> {
        match *self {
            InnerRule::ClippedSgd { lr, clip } => {
                clip_by_norm(g, clip).into_iter().map(|x| lr * x).collect()
            }
            InnerRule::FreshAdam { lr, eps } => {
                g.iter().map(|&x| lr * x / (x.abs() + eps)).collect()
            }
        }
    }

    /// Jacobian of `u` at `g` applied to `v`; the Jacobian is symmetric.
    pub fn jvp(&self, g: &[f64], v: &[f64]) -> Vec<f64> {
        match *self {
            InnerRule::ClippedSgd { lr, clip } => {
                let n = l2(g);
                if n <= clip {
                    v.iter().map(|x| lr * x).collect()
                } else {
                    // d/dg (c·g/‖g‖) = (c/‖g‖)(I − ĝĝᵀ)
                    let k = clip / n;
                    let proj = dot(g, v) / (n * n);
                    v.iter()
                        .zip(g)
                        .map(|(x, gi)| lr * k * (x - proj * gi))
                        .collect()
                }
            }
            InnerRule::FreshAdam { lr, eps } => g
                .iter()
                .zip(v)
                .map(|(&gi, &x)| {
                    let d = gi.abs() + eps;
                    lr * eps / (d * d) * x
                })
                .collect(),
        }
    }
}

/// Trajectory of the inner adaptation, kept for differentiating through it.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerTrace {
    /// Iterates `w_0 .. w_{S-1}` at which gradients were taken.
    pub points: Vec<Vec<f64>>,
    pub grads: Vec<Vec<f64>>,
    /// Objective value at `w_0`.
    pub initial_value: f64,
    pub adapted: Vec<f64>,
}

pub fn adapt(
    w0: &[f64],
    objective: &impl Objective,
    rule: InnerRule,
    steps: usize,
) -> Result<InnerTrace> {
    let mut w = w0.to_vec();
    let mut points = Vec::with_capacity(steps);
    let mut grads = Vec::with_capacity(steps);
    let mut initial_value = f64::NAN;
    for s in 0..steps {
        let (val, g) = objective.value_grad(&w)?;
        check_finite("inner gradient", &g)?;
        if s == 0 {
            initial_value = val;
        }
        let u = rule.step(&g);
        points.push(w.clone());
        grads.push(g);
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi -= ui;
        }
    }
    Ok(InnerTrace {
        points,
        grads,
        initial_value,
        adapted: w,
    })
}

/// Pulls `v = ∂L/∂w_S` back to `∂L/∂w_0` through the inner trajectory.
pub fn backprop_through_inner(
    trace: &InnerTrace,
    objective: &impl Objective,
    rule: InnerRule,
    mut v: Vec<f64>,
) -> Result<Vec<f64>> {
    for (w, g) in trace.points.iter().zip(&trace.grads).rev() {
        let ju = rule.jvp(g, &v);
        let hju = objective.hvp(w, &ju)?;
        for (vi, h) in v.iter_mut().zip(&hju) {
            *vi -= h;
        }
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// Gradient of `L_task(w_0) + L_meta(w_S)` with respect to `w_0`.
    pub grad: Vec<f64>,
    pub task_value: f64,
    pub meta_value: f64,
}

/// Outer gradient for one episode given its inner trace. With
/// `second_order = false` the adapted weights are treated as constants of
/// the originals, so `∇L_meta(w_S)` is used as is.
pub fn meta_gradient(
    trace: &InnerTrace,
    task: &impl Objective,
    meta: &impl Objective,
    rule: InnerRule,
    second_order: bool,
) -> Result<MetaGradient> {
    let (meta_value, v) = meta.value_grad(&trace.adapted)?;
    let grad = outer_gradient(trace, task, rule, second_order, v)?;
    Ok(MetaGradient {
        grad,
        task_value: trace.initial_value,
        meta_value,
    })
}

/// `∇L_task(w_0)` plus the meta-objective gradient `v` pulled back to `w_0`.
fn outer_gradient(
    trace: &InnerTrace,
    task: &impl Objective,
    rule: InnerRule,
    second_order: bool,
    v: Vec<f64>,
) -> Result<Vec<f64>> {
    check_finite("meta-objective gradient", &v)?;
    let v = if second_order {
        backprop_through_inner(trace, task, rule, v)?
    } else {
        v
    };
    let grad: Vec<f64> = trace.grads[0].iter().zip(&v).map(|(a, b)| a + b).collect();
    check_finite("outer gradient", &grad)?;
    Ok(grad)
}

/// Evaluates a graph-defined objective and its gradient on an `f64` tape.
fn graph_value_grad<F>(template: &ModelParams, w: &[f64], build: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape<f64>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars = ParamVars::new(&mut tape, template, w.to_vec());
    let out = build(&mut tape, &vars)?;
    let g = tape.gradient(out, vars.leaf);
    Ok((tape.scalar(out), g.into_vec()))
}

/// Hessian-vector product of a graph-defined objective via dual numbers.
fn graph_hvp<F>(template: &ModelParams, w: &[f64], v: &[f64], build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<Dual>, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::<Dual>::new();
    let flat = w.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
    let vars = ParamVars::new(&mut tape, template, flat);
    let out = build(&mut tape, &vars)?;
    let g = tape.gradient(out, vars.leaf);
    Ok(g.data().iter().map(|d| d.du).collect())
}

/// Sample-weighted mean task loss over several batches.
fn pooled_task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    template: &ModelParams,
    vars: &ParamVars,
    batches: &[Batch],
    temperature: f64,
) -> Var {
    let total: usize = batches.iter().map(Batch::len).sum();
    let mut acc: Option<Var> = None;
    for b in batches {
        let x = tape.constant(lift(&b.inputs));
        let z = embed_graph(tape, &template.backbone, vars, x);
        let s = cosine_scores_graph(tape, z, vars.theta);
        let p = predict_probs_graph(tape, s, temperature);
        let l = task_loss_graph(tape, p, &b.labels);
        let l = tape.scale(l, b.len() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    acc.expect("at least one batch")
}

/// Mean cross-entropy of the cosine classifier over a set of batches.
pub struct TaskObjective<'a> {
    pub template: &'a ModelParams,
    pub batches: Vec<Batch>,
    pub temperature: f64,
}

impl TaskObjective<'_> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<Var> {
        if self.batches.iter().all(Batch::is_empty) {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(pooled_task_loss(
            tape,
            self.template,
            vars,
            &self.batches,
            self.temperature,
        ))
    }
}

impl Objective for TaskObjective<'_> {
    fn value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        graph_value_grad(self.template, w, |t, v| self.build(t, v))
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        graph_hvp(self.template, w, v, |t, p| self.build(t, p))
    }
}

/// Individual meta-objective terms at one parameter point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaParts {
    pub sa: f64,
    pub pa: f64,
    pub task_meta_test: f64,
    pub meta: f64,
}

/// The meta-objective evaluated at adapted weights.
pub struct MetaObjective<'a> {
    pub template: &'a ModelParams,
    pub meta_train: Vec<Batch>,
    pub meta_test: Batch,
    pub mode: MetaObjectiveMode,
    pub gamma1: f64,
    pub gamma2: f64,
    pub temperature: f64,
}

struct MetaVars {
    sa: Var,
    pa: Var,
    task_te: Var,
    meta: Var,
}

impl MetaObjective<'_> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars) -> Result<MetaVars> {
        if self.meta_test.is_empty() {
            return Err(Error::InvalidArgument("empty meta-test batch".into()));
        }
        let c = self.template.num_classes();
        let backbone = &self.template.backbone;

        let x_te = tape.constant(lift(&self.meta_test.inputs));
        let z_te = embed_graph(tape, backbone, vars, x_te);

        // Sample-wise alignment over meta-train and meta-test samples.
        let mut sa_sum = sample_alignment_sum_graph(tape, z_te, &self.meta_test.labels, vars.theta);
        let mut n_total = self.meta_test.len();
        let mut sets = Vec::with_capacity(self.meta_train.len() + 1);
        for b in &self.meta_train {
            let x = tape.constant(lift(&b.inputs));
            let z = embed_graph(tape, backbone, vars, x);
            let s = sample_alignment_sum_graph(tape, z, &b.labels, vars.theta);
            sa_sum = tape.add(sa_sum, s);
            n_total += b.len();
            sets.push(centroids_graph(tape, z, &b.labels, c)?);
        }
        let sa = tape.scale(sa_sum, 1.0 / n_total as f64);

        sets.push(vars.theta);
        let pa = prototype_alignment_graph(tape, z_te, &sets, self.temperature);

        let scores = cosine_scores_graph(tape, z_te, vars.theta);
        let probs = predict_probs_graph(tape, scores, self.temperature);
        let task_te = task_loss_graph(tape, probs, &self.meta_test.labels);

        let meta = match self.mode {
            MetaObjectiveMode::Se => {
                let a = tape.scale(sa, self.gamma1);
                let b = tape.scale(pa, self.gamma2);
                tape.add(a, b)
            }
            MetaObjectiveMode::TaskOnly => task_te,
        };
        Ok(MetaVars {
            sa,
            pa,
            task_te,
            meta,
        })
    }

    /// Value of every term plus the gradient of the optimized one.
    pub fn parts_and_grad(&self, w: &[f64]) -> Result<(MetaParts, Vec<f64>)> {
        let mut tape = Tape::<f64>::new();
        let vars = ParamVars::new(&mut tape, self.template, w.to_vec());
        let m = self.build(&mut tape, &vars)?;
        let g = tape.gradient(m.meta, vars.leaf).into_vec();
        let parts = MetaParts {
            sa: tape.scalar(m.sa),
            pa: tape.scalar(m.pa),
            task_meta_test: tape.scalar(m.task_te),
            meta: tape.scalar(m.meta),
        };
        Ok((parts, g))
    }
}

impl Objective for MetaObjective<'_> {
    fn value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (p, g) = self.parts_and_grad(w)?;
        Ok((p.meta, g))
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        graph_hvp(self.template, w, v, |t, p| Ok(self.build(t, p)?.meta))
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            w[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn inner_rule(config: &TrainConfig) -> InnerRule {
    if config.swap_optimizers {
        InnerRule::FreshAdam {
            lr: config.beta,
            eps: config.adam_eps,
        }
    } else {
        InnerRule::ClippedSgd {
            lr: config.alpha,
            clip: config.clip_norm,
        }
    }
}

/// Adapted parameters together with the trajectory that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedParams {
    pub params: ModelParams,
    pub trace: InnerTrace,
}

/// Inner adaptation on the meta-train batches; `params` is not modified.
pub fn inner_step(
    params: &ModelParams,
    meta_train: &[Batch],
    config: &TrainConfig,
) -> Result<AdaptedParams> {
    let task = TaskObjective {
        template: params,
        batches: meta_train.to_vec(),
        temperature: config.temperature,
    };
    let trace = adapt(
        &params.flatten(),
        &task,
        inner_rule(config),
        config.inner_steps,
    )?;
    Ok(AdaptedParams {
        params: params.with_flat(&trace.adapted)?,
        trace,
    })
}

/// The outer optimizer: adaptive moments by default, clipped SGD when the
/// optimizer roles are swapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizer {
    pub adam: AdamState,
}

impl OuterOptimizer {
    pub fn new(n: usize, config: &TrainConfig) -> Self {
        OuterOptimizer {
            adam: AdamState::new(n, config.adam_beta1, config.adam_beta2, config.adam_eps),
        }
    }

    fn apply(&mut self, w: &mut [f64], g: &[f64], config: &TrainConfig) {
        if config.swap_optimizers {
            let g = clip_by_norm(g, config.clip_norm);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= config.alpha * gi;
            }
        } else {
            self.adam.step(w, g, config.beta);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OuterResult {
    pub params: ModelParams,
    pub breakdown: LossBreakdown,
    pub task_meta_test: f64,
    pub grad: Vec<f64>,
}

/// Meta-update of the original parameters for one episode.
pub fn outer_step(
    params: &ModelParams,
    adapted: &AdaptedParams,
    task: &MetaTask,
    config: &TrainConfig,
    optimizer: &mut OuterOptimizer,
) -> Result<OuterResult> {
    let w0 = params.flatten();
    if adapted.trace.points.first() != Some(&w0)
        || adapted.params.flatten() != adapted.trace.adapted
    {
        return Err(Error::InvalidArgument(
            "adapted parameters were not produced from these parameters".into(),
        ));
    }
    let meta_train = task.meta_train_batches();
    let task_obj = TaskObjective {
        template: params,
        batches: meta_train.clone(),
        temperature: config.temperature,
    };
    let meta_obj = MetaObjective {
        template: params,
        meta_train,
        meta_test: task.meta_test_batch(),
        mode: config.meta_objective_mode,
        gamma1: config.gamma1,
        gamma2: config.gamma2,
        temperature: config.temperature,
    };
    let (parts, v) = meta_obj.parts_and_grad(&adapted.trace.adapted)?;
    let grad = outer_gradient(
        &adapted.trace,
        &task_obj,
        inner_rule(config),
        config.second_order,
        v,
    )?;

    let mut w = w0;
    optimizer.apply(&mut w, &grad, config);
    let breakdown = LossBreakdown {
        task: adapted.trace.initial_value,
        sa: parts.sa,
        pa: parts.pa,
        meta: parts.meta,
        weighted_total: adapted.trace.initial_value + parts.meta,
    };
    Ok(OuterResult {
        params: params.with_flat(&w)?,
        breakdown,
        task_meta_test: parts.task_meta_test,
        grad,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub iteration: usize,
    pub loss_task_tr: f64,
    pub loss_sa: Option<f64>,
    pub loss_pa: Option<f64>,
    pub loss_meta: Option<f64>,
    pub loss_task_metatest: Option<f64>,
    pub loss_task_unseen: Option<f64>,
    pub r_ho: Option<f64>,
    pub ratios: Vec<f64>,
}

impl EpisodeLog {
    fn check(&self) -> Result<()> {
        let vals = [
            Some(self.loss_task_tr),
            self.loss_sa,
            self.loss_pa,
            self.loss_meta,
            self.loss_task_metatest,
            self.loss_task_unseen,
        ];
        if vals.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "diverged at iteration {}: {self:?}",
                self.iteration
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<EpisodeLog>,
}

/// Task loss of `params` on the whole diagnostics domain. Deterministic and
/// draw-free, so it cannot perturb the training stream.
fn diagnostic_loss(
    params: &ModelParams,
    domain: &DomainDataset,
    config: &TrainConfig,
) -> Result<f64> {
    let obj = TaskObjective {
        template: params,
        batches: vec![domain.to_batch()],
        temperature: config.temperature,
    };
    let mut tape = Tape::<f64>::new();
    let vars = ParamVars::new(&mut tape, params, params.flatten());
    let l = obj.build(&mut tape, &vars)?;
    Ok(tape.scalar(l))
}

fn check_domains(domains: &[DomainDataset], initial: &ModelParams) -> Result<()> {
    if domains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 training domains, got {}",
            domains.len()
        )));
    }
    for d in domains {
        if d.dim() != initial.backbone.d_in() || d.num_classes != initial.num_classes() {
            return Err(Error::Shape(format!(
                "domain {} ({} features, {} classes) does not fit the model",
                d.name,
                d.dim(),
                d.num_classes
            )));
        }
    }
    Ok(())
}

pub fn sample_episode(
    domains: &[DomainDataset],
    config: &TrainConfig,
    schedule: &MixRatioSchedule,
    rng: &mut crate::data::RngState,
) -> Result<MetaTask> {
    match config.sampler_mode {
        SamplerMode::Ts => sample_task_ts(domains, config.batch_per_domain, config.n_te, rng),
        SamplerMode::Mts => {
            sample_task_mts(domains, schedule, config.batch_per_domain, config.n_te, rng)
        }
    }
}

/// Episodic meta-training. `diagnostics` is only ever used to log the task
/// loss on an unseen domain; it never enters a gradient.
pub fn train(
    domains: &[DomainDataset],
    config: &TrainConfig,
    schedule: &MixRatioSchedule,
    initial: &ModelParams,
    diagnostics: Option<&DomainDataset>,
) -> Result<TrainOutcome> {
    train_with_hook(domains, config, schedule, initial, diagnostics, |_, _| {
        Ok(())
    })
}

/// [`train`] with a callback after every iteration (for checkpoints).
pub fn train_with_hook(
    domains: &[DomainDataset],
    config: &TrainConfig,
    schedule: &MixRatioSchedule,
    initial: &ModelParams,
    diagnostics: Option<&DomainDataset>,
    mut hook: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    initial.validate()?;
    check_domains(domains, initial)?;

    let mut rng = rng_from_seed(config.seed);
    let mut params = initial.clone();
    let mut optimizer = OuterOptimizer::new(params.num_params(), config);
    let mut logs = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let task = sample_episode(domains, config, schedule, &mut rng)?;
        let adapted = inner_step(&params, &task.meta_train_batches(), config)?;
        let out = outer_step(&params, &adapted, &task, config, &mut optimizer)?;
        let unseen = diagnostics
            .map(|d| diagnostic_loss(&adapted.params, d, config))
            .transpose()?;
        let log = EpisodeLog {
            iteration,
            loss_task_tr: out.breakdown.task,
            loss_sa: Some(out.breakdown.sa),
            loss_pa: Some(out.breakdown.pa),
            loss_meta: Some(out.breakdown.meta),
            loss_task_metatest: Some(out.task_meta_test),
            loss_task_unseen: unseen,
            r_ho: Some(task.r_ho()),
            ratios: task.ratios.clone(),
        };
        log.check()?;
        logs.push(log);
        params = out.params;
        hook(iteration, &params)?;
    }
    Ok(TrainOutcome { params, logs })
}

/// Supervised baseline on the pooled source domains, with the same model,
/// outer optimizer, rate `beta` and iteration budget as [`train`].
pub fn train_deepall(
    domains: &[DomainDataset],
    config: &TrainConfig,
    initial: &ModelParams,
    diagnostics: Option<&DomainDataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    initial.validate()?;
    check_domains(domains, initial)?;
    let (pooled, _) = pool_domains(domains)?;
    let batch_size = (config.batch_per_domain * domains.len()).min(pooled.len());

    let mut rng = rng_from_seed(config.seed);
    let mut w = initial.flatten();
    let mut adam = AdamState::new(
        w.len(),
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut logs = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let ix = sample_indices(&pooled, batch_size, config.class_balanced, &mut rng)?;
        let obj = TaskObjective {
            template: initial,
            batches: vec![Batch::from_samples(&pooled.subset(&ix))],
            temperature: config.temperature,
        };
        let (loss, g) = obj.value_grad(&w)?;
        check_finite("gradient", &g)?;
        adam.step(&mut w, &g, config.beta);
        let params = initial.with_flat(&w)?;
        let unseen = diagnostics
            .map(|d| diagnostic_loss(&params, d, config))
            .transpose()?;
        let log = EpisodeLog {
            iteration,
            loss_task_tr: loss,
            loss_sa: None,
            loss_pa: None,
            loss_meta: None,
            loss_task_metatest: None,
            loss_task_unseen: unseen,
            r_ho: None,
            ratios: Vec::new(),
        };
        log.check()?;
        logs.push(log);
    }
    Ok(TrainOutcome {
        params: initial.with_flat(&w)?,
        logs,
    })
}

/// Wraps a Hessian-free objective `f(w)` given as closures; used for
/// analytic toy problems.
pub struct FnObjective<F, H> {
    pub value_grad: F,
    pub hvp: H,
}

impl<F, H> Objective for FnObjective<F, H>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    H: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    fn value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value_grad)(w))
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok((self.hvp)(w, v))
    }
}

/// Half squared distance to `target`: `½‖w − target‖²`.
#[allow(clippy::type_complexity)]
pub fn quadratic(
    target: Vec<f64>,
) -> FnObjective<impl Fn(&[f64]) -> (f64, Vec<f64>), impl Fn(&[f64], &[f64]) -> Vec<f64>> {
    let t2 = target.clone();
    FnObjective {
        value_grad: move |w: &[f64]| {
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| a - b).collect();
            (0.5 * dot(&g, &g), g)
        },
        hvp: move |_w: &[f64], v: &[f64]| {
            debug_assert_eq!(v.len(), t2.len());
            v.to_vec()
        },
    }
}
