//! Negative-sampling losses for the three evidence streams and their exact
//! gradients.
//!
//! All losses are negated log-likelihoods, so training minimizes them:
//!
//! * text: `-[log σ(out_w · e_C) + Σ log σ(-out_w* · e_C)]` where `e_C` is
//!   the mean of the context input vectors and the author's user vector;
//! * graph: `-[log σ(e_v · e_v') + Σ log σ(-e_v · e_v*)]`;
//! * relation: `-[log σ(e_vᵀ R e_m) + Σ log σ(-e_vᵀ R e_m*)]`.
//!
//! Every function here is pure: it reads a [`ParamSource`] and returns fresh
//! gradient blocks.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::params::{ParamSource, TensorId};
use crate::tensor::{axpy, dot};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectiveError {
    #[error("context is empty")]
    EmptyContext,
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without forming `σ(x)`, so large negative inputs stay finite.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `(p(L=1), p(L=0))` for a score.
#[inline]
pub fn label_probabilities(score: f64) -> (f64, f64) {
    (logistic(score), logistic(-score))
}

/// One dense block of a sparse gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBlock {
    pub tensor: TensorId,
    pub index: usize,
    pub values: Vec<f64>,
}

/// Gradient touching a few rows (or relation matrices) of the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    blocks: Vec<GradBlock>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: TensorId, index: usize, values: Vec<f64>) {
        self.blocks.push(GradBlock { tensor, index, values });
    }

    /// Adds `scale · values` into the block for `(tensor, index)`.
    fn accumulate(&mut self, tensor: TensorId, index: usize, scale: f64, values: &[f64]) {
        let mut v = vec![0.0; values.len()];
        axpy(scale, values, &mut v);
        self.push(tensor, index, v);
    }

    /// Merges blocks sharing a `(tensor, index)` key. The result is sorted by
    /// key.
    pub fn coalesce(self) -> Self {
        let mut merged: BTreeMap<(TensorId, usize), Vec<f64>> = BTreeMap::new();
        for b in self.blocks {
            match merged.get_mut(&(b.tensor, b.index)) {
                Some(acc) => axpy(1.0, &b.values, acc),
                None => {
                    merged.insert((b.tensor, b.index), b.values);
                }
            }
        }
        SparseGrad {
            blocks: merged
                .into_iter()
                .map(|((tensor, index), values)| GradBlock { tensor, index, values })
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[GradBlock] {
        &self.blocks
    }

    pub fn get(&self, tensor: TensorId, index: usize) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.tensor == tensor && b.index == index)
            .map(|b| b.values.as_slice())
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// `(tensor, index)` keys referenced by this gradient.
    pub fn touched(&self) -> Vec<(TensorId, usize)> {
        self.blocks.iter().map(|b| (b.tensor, b.index)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextEvent {
    pub user: usize,
    pub target: usize,
    pub context: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphEvent {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleEvent {
    pub relation: usize,
    pub user: usize,
    pub entity: usize,
    pub negatives: Vec<usize>,
}

/// Weights of the graph (`lambda_graph`) and relation (`lambda_relation`)
/// terms relative to the text term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_graph: f64,
    pub lambda_relation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_graph: 1.0,
            lambda_relation: 1.0,
        }
    }
}

/// `e_C = (Σ_{c ∈ C} in_c + u) / (|C| + 1)`
pub fn context_vector<P: ParamSource>(params: &P, user: usize, context: &[usize]) -> Result<Vec<f64>, ObjectiveError> {
    if context.is_empty() {
        return Err(ObjectiveError::EmptyContext);
    }
    let mut acc = params.row(TensorId::User, user).into_owned();
    for &c in context {
        axpy(1.0, &params.row(TensorId::WordIn, c), &mut acc);
    }
    let denom = (context.len() + 1) as f64;
    acc.iter_mut().for_each(|v| *v /= denom);
    Ok(acc)
}

/// Loss term and `dL/dscore` for one labelled score.
#[inline]
fn binary_term(score: f64, positive: bool) -> (f64, f64) {
    if positive {
        (-log_logistic(score), -logistic(-score))
    } else {
        (-log_logistic(-score), logistic(score))
    }
}

pub fn text_loss_grad<P: ParamSource>(params: &P, event: &TextEvent) -> Result<(f64, SparseGrad), ObjectiveError> {
    let e_c = context_vector(params, event.user, &event.context)?;
    let mut grad = SparseGrad::new();
    let mut d_ec = vec![0.0; params.dim()];
    let mut loss = 0.0;
    let targets = std::iter::once((event.target, true)).chain(event.negatives.iter().map(|&w| (w, false)));
    for (w, label) in targets {
        let out = params.row(TensorId::WordOut, w);
        let (l, g) = binary_term(dot(&out, &e_c), label);
        loss += l;
        grad.accumulate(TensorId::WordOut, w, g, &e_c);
        axpy(g, &out, &mut d_ec);
    }
    let share = 1.0 / (event.context.len() + 1) as f64;
    grad.accumulate(TensorId::User, event.user, share, &d_ec);
    for &c in &event.context {
        grad.accumulate(TensorId::WordIn, c, share, &d_ec);
    }
    Ok((loss, grad.coalesce()))
}

pub fn graph_loss_grad<P: ParamSource>(params: &P, event: &GraphEvent) -> (f64, SparseGrad) {
    let anchor = params.row(TensorId::User, event.anchor).into_owned();
    let mut grad = SparseGrad::new();
    let mut d_anchor = vec![0.0; params.dim()];
    let mut loss = 0.0;
    let others = std::iter::once((event.positive, true)).chain(event.negatives.iter().map(|&v| (v, false)));
    for (v, label) in others {
        let other = params.row(TensorId::User, v);
        let (l, g) = binary_term(dot(&anchor, &other), label);
        loss += l;
        grad.accumulate(TensorId::User, v, g, &anchor);
        axpy(g, &other, &mut d_anchor);
    }
    grad.push(TensorId::User, event.anchor, d_anchor);
    (loss, grad.coalesce())
}

/// `Rᵀ e_v` for a row-major `K×K` matrix.
fn left_apply(r: &[f64], v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut out = vec![0.0; k];
    for (i, &vi) in v.iter().enumerate() {
        axpy(vi, &r[i * k..(i + 1) * k], &mut out);
    }
    out
}

/// `R e_m` for a row-major `K×K` matrix.
fn right_apply(r: &[f64], m: &[f64]) -> Vec<f64> {
    r.chunks_exact(m.len()).map(|row| dot(row, m)).collect()
}

/// `e_vᵀ R e_m`
pub fn bilinear_score<P: ParamSource>(params: &P, relation: usize, user: usize, entity: usize) -> f64 {
    let r = params.row(TensorId::Relation, relation);
    let v = params.row(TensorId::User, user);
    let m = params.row(TensorId::Entity, entity);
    dot(&left_apply(&r, &v), &m)
}

/// `(p(L=1), p(L=0))` for a user pair under the graph model.
pub fn graph_probabilities<P: ParamSource>(params: &P, a: usize, b: usize) -> (f64, f64) {
    label_probabilities(dot(&params.row(TensorId::User, a), &params.row(TensorId::User, b)))
}

/// `(p(L=1), p(L=0))` for a triple under the bilinear model.
pub fn relation_probabilities<P: ParamSource>(params: &P, relation: usize, user: usize, entity: usize) -> (f64, f64) {
    label_probabilities(bilinear_score(params, relation, user, entity))
}

pub fn relation_loss_grad<P: ParamSource>(params: &P, event: &TripleEvent) -> (f64, SparseGrad) {
    let k = params.dim();
    let r = params.row(TensorId::Relation, event.relation).into_owned();
    let v = params.row(TensorId::User, event.user).into_owned();
    // vᵀR is shared by every candidate entity.
    let v_r = left_apply(&r, &v);
    let mut grad = SparseGrad::new();
    let mut d_v = vec![0.0; k];
    let mut d_r = vec![0.0; k * k];
    let mut loss = 0.0;
    let entities = std::iter::once((event.entity, true)).chain(event.negatives.iter().map(|&m| (m, false)));
    for (m_idx, label) in entities {
        let m = params.row(TensorId::Entity, m_idx);
        let (l, g) = binary_term(dot(&v_r, &m), label);
        loss += l;
        grad.accumulate(TensorId::Entity, m_idx, g, &v_r);
        axpy(g, &right_apply(&r, &m), &mut d_v);
        for (i, &vi) in v.iter().enumerate() {
            axpy(g * vi, &m, &mut d_r[i * k..(i + 1) * k]);
        }
    }
    grad.push(TensorId::User, event.user, d_v);
    grad.push(TensorId::Relation, event.relation, d_r);
    (loss, grad.coalesce())
}

/// Per-stream losses, each already a negated log-likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub text: f64,
    pub graph: f64,
    pub relation: f64,
}

/// `text + λ1·graph + λ2·relation`
pub fn joint_loss(parts: LossParts, weights: LossWeights) -> f64 {
    parts.text + weights.lambda_graph * parts.graph + weights.lambda_relation * parts.relation
}
