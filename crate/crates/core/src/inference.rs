//! Inference on frozen user vectors.
//!
//! * [`AttributeClassifier`]: `softmax(U · tanh(W · e_v))`.
//! * [`RelationClassifier`]: both users go through their own tanh layer, the
//!   two hidden vectors are compared by elementwise product and absolute
//!   difference, and a second tanh layer over
//!   `W_diff·diff + W_prod·prod + W1·ĥ1 + W2·ĥ2` feeds a softmax.
//! * Group queries: fit a group embedding `e_G` maximizing
//!   `Σ log P(a_i | e) − μ‖e‖²` over the condition list `A`, then score the
//!   target list `B` at `e_G` as a product of independent factors.
//!
//! Heads have no bias terms and are trained by per-example AdaGrad on the
//! cross-entropy loss. User vectors are only read, never written.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::params::{fmt_real, table_fingerprint, ModelParams, ModelTables};
use crate::rng;
use crate::tensor::{dot, Matrix};

pub const HEAD_MAGIC: &str = "SOCIALVEC-CLF";
pub const HEAD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("input width {found} does not match classifier width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a classifier needs at least two labels")]
    TooFewLabels,
    #[error("training data covers a single class; softmax training is degenerate")]
    SingleClass,
    #[error("label index {label} out of range for {labels} labels")]
    LabelOutOfRange { label: usize, labels: usize },
    #[error("user index {0} out of range")]
    UnknownUser(usize),
    #[error("hidden width must be at least 1")]
    ZeroHidden,
    #[error("group condition list is empty")]
    EmptyConditions,
    #[error("group classifiers disagree on embedding width")]
    IncompatibleHeads,
    #[error("group objective became non-finite at iteration {0}")]
    NonFiniteObjective(usize),
    #[error("group fit needs at least one iteration and μ ≥ 0")]
    InvalidFitConfig,
    #[error("ratio denominator is zero")]
    ZeroDenominator,
    #[error("classifier was trained against a different model (K={expected_dim}, users {expected_users}; model has K={dim}, users {users})")]
    FingerprintMismatch {
        expected_dim: usize,
        expected_users: String,
        dim: usize,
        users: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("classifier file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported classifier file version {0}")]
    VersionMismatch(String),
    #[error("classifier holds non-finite weights")]
    NonFinite,
}

type Result<T> = std::result::Result<T, InferenceError>;

/// Identifies the embedding model a head was trained on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFingerprint {
    pub dim: usize,
    pub users: String,
}

impl ModelFingerprint {
    pub fn of(params: &ModelParams, tables: &ModelTables) -> Self {
        ModelFingerprint {
            dim: params.dim(),
            users: table_fingerprint(&tables.users),
        }
    }

    fn check(&self, other: &ModelFingerprint) -> Result<()> {
        if self != other {
            return Err(InferenceError::FingerprintMismatch {
                expected_dim: self.dim,
                expected_users: self.users.clone(),
                dim: other.dim,
                users: other.users.clone(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(z)[label]`
fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

fn tanh_layer(w: &Matrix, x: &[f64]) -> Vec<f64> {
    w.matvec(x).into_iter().map(f64::tanh).collect()
}

/// `g ⊙ (1 − h²)`: backprop through `h = tanh(a)`.
fn tanh_backward(g: &[f64], h: &[f64]) -> Vec<f64> {
    g.iter().zip(h).map(|(g, h)| g * (1.0 - h * h)).collect()
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    m.add_outer(1.0, a, b);
    m
}

/// `p − onehot(label)`: cross-entropy gradient w.r.t. logits.
fn softmax_xent_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let mut dz = probs.to_vec();
    dz[label] -= 1.0;
    dz
}

/// Glorot-uniform weights.
fn glorot(rows: usize, cols: usize, rng: &mut rng::Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng::uniform(rng, -a, a))
}

/// `acc += g²; θ −= η·g/(√acc + ε)`
fn adagrad_step(param: &mut Matrix, acc: &mut Matrix, grad: &Matrix, lr: f64, eps: f64) {
    for ((p, a), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(acc.as_mut_slice())
        .zip(grad.as_slice())
    {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Hidden width `H` of the per-user tanh layer.
    pub hidden: usize,
    /// Width `H′` of the pair layer in the relation head.
    pub pair_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 100,
            pair_hidden: 50,
            epochs: 50,
            lr: 0.05,
            eps: 1e-8,
            seed: 1,
        }
    }
}

fn check_labels<'a>(labels: &[String], examples: impl Iterator<Item = &'a usize>) -> Result<()> {
    if labels.len() < 2 {
        return Err(InferenceError::TooFewLabels);
    }
    let mut first = None;
    let mut multi = false;
    for &l in examples {
        if l >= labels.len() {
            return Err(InferenceError::LabelOutOfRange {
                label: l,
                labels: labels.len(),
            });
        }
        match first {
            None => first = Some(l),
            Some(f) if f != l => multi = true,
            _ => {}
        }
    }
    if !multi {
        return Err(InferenceError::SingleClass);
    }
    Ok(())
}

fn check_user(params: &ModelParams, user: usize) -> Result<&[f64]> {
    if user >= params.users().rows() {
        return Err(InferenceError::UnknownUser(user));
    }
    Ok(params.user(user))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            },
        )
        .0
}

/// Outcome of head training with optional dev-based epoch selection.
#[derive(Clone, Debug)]
pub struct HeadFit<C> {
    pub classifier: C,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
    pub dev_accuracy: Option<f64>,
}

// ---------------------------------------------------------------------------
// attribute head

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    /// Attribute (relation) name, e.g. `gender`.
    pub attribute: String,
    pub labels: Vec<String>,
    /// `H×K`
    pub w: Matrix,
    /// `L×H`
    pub u: Matrix,
    pub acc_w: Matrix,
    pub acc_u: Matrix,
    pub fingerprint: ModelFingerprint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGrad {
    pub w: Matrix,
    pub u: Matrix,
    /// Gradient with respect to the input embedding.
    pub input: Vec<f64>,
}

impl AttributeClassifier {
    /// A head with all-zero weights: every input maps to the uniform
    /// distribution.
    pub fn zeros(attribute: &str, labels: Vec<String>, dim: usize, hidden: usize) -> Self {
        let l = labels.len();
        AttributeClassifier {
            attribute: attribute.to_string(),
            labels,
            w: Matrix::zeros(hidden, dim),
            u: Matrix::zeros(l, hidden),
            acc_w: Matrix::zeros(hidden, dim),
            acc_u: Matrix::zeros(l, hidden),
            fingerprint: ModelFingerprint {
                dim,
                users: String::new(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    fn check_input(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim() {
            return Err(InferenceError::DimensionMismatch {
                expected: self.dim(),
                found: e.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_input(e)?;
        Ok(self.u.matvec(&tanh_layer(&self.w, e)))
    }

    pub fn forward(&self, e: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(e)?))
    }

    pub fn predict(&self, e: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(e)?))
    }

    /// Cross-entropy `−log p(label | e)`.
    pub fn loss(&self, e: &[f64], label: usize) -> Result<f64> {
        Ok(-log_softmax_at(&self.logits(e)?, label))
    }

    pub fn loss_grad(&self, e: &[f64], label: usize) -> Result<(f64, AttributeGrad)> {
        self.check_input(e)?;
        if label >= self.num_labels() {
            return Err(InferenceError::LabelOutOfRange {
                label,
                labels: self.num_labels(),
            });
        }
        let h = tanh_layer(&self.w, e);
        let z = self.u.matvec(&h);
        let loss = -log_softmax_at(&z, label);
        let dz = softmax_xent_grad(&softmax(&z), label);
        let da = tanh_backward(&self.u.matvec_t(&dz), &h);
        let grad = AttributeGrad {
            w: outer(&da, e),
            u: outer(&dz, &h),
            input: self.w.matvec_t(&da),
        };
        Ok((loss, grad))
    }

    fn adagrad(&mut self, grad: &AttributeGrad, lr: f64, eps: f64) {
        adagrad_step(&mut self.w, &mut self.acc_w, &grad.w, lr, eps);
        adagrad_step(&mut self.u, &mut self.acc_u, &grad.u, lr, eps);
    }

    pub fn accuracy(&self, params: &ModelParams, examples: &[(usize, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for &(user, label) in examples {
            if self.predict(check_user(params, user)?)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn check_model(&self, params: &ModelParams, tables: &ModelTables) -> Result<()> {
        self.fingerprint.check(&ModelFingerprint::of(params, tables))
    }
}

/// `softmax(U · tanh(W · e_v))`
pub fn attr_forward(clf: &AttributeClassifier, e: &[f64]) -> Result<Vec<f64>> {
    clf.forward(e)
}

/// Trains an attribute head on `(user, label)` examples. With `dev`, the
/// weights from the epoch with the best dev accuracy are kept (earliest on
/// ties); otherwise the final epoch's.
pub fn attr_train(
    params: &ModelParams,
    fingerprint: ModelFingerprint,
    attribute: &str,
    labels: Vec<String>,
    examples: &[(usize, usize)],
    cfg: &HeadConfig,
    dev: Option<&[(usize, usize)]>,
) -> Result<HeadFit<AttributeClassifier>> {
    if cfg.hidden == 0 {
        return Err(InferenceError::ZeroHidden);
    }
    check_labels(&labels, examples.iter().map(|(_, l)| l))?;
    for &(u, _) in examples {
        check_user(params, u)?;
    }
    let dim = params.dim();
    let mut rng = rng::seeded(cfg.seed);
    let mut clf = AttributeClassifier::zeros(attribute, labels, dim, cfg.hidden);
    clf.w = glorot(cfg.hidden, dim, &mut rng);
    clf.fingerprint = fingerprint;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, usize, AttributeClassifier)> = None;
    for epoch in 0..cfg.epochs {
        let mut erng = rng::seeded(rng::derive_seed(cfg.seed, epoch as u64));
        rng::shuffle(&mut erng, &mut order);
        for &i in &order {
            let (user, label) = examples[i];
            let (_, grad) = clf.loss_grad(params.user(user), label)?;
            clf.adagrad(&grad, cfg.lr, cfg.eps);
        }
        if let Some(dev) = dev {
            let acc = clf.accuracy(params, dev)?;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch + 1, clf.clone()));
            }
        }
    }
    Ok(match best {
        Some((acc, epoch, classifier)) => HeadFit {
            classifier,
            selected_epoch: epoch,
            dev_accuracy: Some(acc),
        },
        None => HeadFit {
            classifier: clf,
            selected_epoch: cfg.epochs,
            dev_accuracy: None,
        },
    })
}

// ---------------------------------------------------------------------------
// relation head

#[derive(Clone, Debug, PartialEq)]
pub struct RelationClassifier {
    pub relation: String,
    pub labels: Vec<String>,
    /// `H×K`, applied to the first user.
    pub wa: Matrix,
    /// `H×K`, applied to the second user.
    pub wb: Matrix,
    /// `H′×H` weights on `|ĥ1 − ĥ2|`.
    pub w_diff: Matrix,
    /// `H′×H` weights on `ĥ1 ⊙ ĥ2`.
    pub w_prod: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    /// `L×H′`
    pub u: Matrix,
    pub acc: RelationWeights,
    pub fingerprint: ModelFingerprint,
}

/// One matrix per relation-head weight block; used for gradients and
/// AdaGrad accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationWeights {
    pub wa: Matrix,
    pub wb: Matrix,
    pub w_diff: Matrix,
    pub w_prod: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub u: Matrix,
}

impl RelationWeights {
    fn zeros(dim: usize, hidden: usize, pair_hidden: usize, labels: usize) -> Self {
        RelationWeights {
            wa: Matrix::zeros(hidden, dim),
            wb: Matrix::zeros(hidden, dim),
            w_diff: Matrix::zeros(pair_hidden, hidden),
            w_prod: Matrix::zeros(pair_hidden, hidden),
            w1: Matrix::zeros(pair_hidden, hidden),
            w2: Matrix::zeros(pair_hidden, hidden),
            u: Matrix::zeros(labels, pair_hidden),
        }
    }
}

/// Intermediate values of a relation-head forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationFeatures {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub prod: Vec<f64>,
    pub diff: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RelationClassifier {
    pub fn zeros(relation: &str, labels: Vec<String>, dim: usize, hidden: usize, pair_hidden: usize) -> Self {
        let w = RelationWeights::zeros(dim, hidden, pair_hidden, labels.len());
        RelationClassifier {
            relation: relation.to_string(),
            wa: w.wa.clone(),
            wb: w.wb.clone(),
            w_diff: w.w_diff.clone(),
            w_prod: w.w_prod.clone(),
            w1: w.w1.clone(),
            w2: w.w2.clone(),
            u: w.u.clone(),
            acc: w,
            labels,
            fingerprint: ModelFingerprint {
                dim,
                users: String::new(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.wa.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    fn check_input(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim() {
            return Err(InferenceError::DimensionMismatch {
                expected: self.dim(),
                found: e.len(),
            });
        }
        Ok(())
    }

    pub fn features(&self, e1: &[f64], e2: &[f64]) -> Result<RelationFeatures> {
        self.check_input(e1)?;
        self.check_input(e2)?;
        let h1 = tanh_layer(&self.wa, e1);
        let h2 = tanh_layer(&self.wb, e2);
        let prod: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a * b).collect();
        let diff: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| (a - b).abs()).collect();
        let mut pre = self.w_diff.matvec(&diff);
        for (m, x) in [(&self.w_prod, &prod), (&self.w1, &h1), (&self.w2, &h2)] {
            for (p, v) in pre.iter_mut().zip(m.matvec(x)) {
                *p += v;
            }
        }
        let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let logits = self.u.matvec(&hidden);
        Ok(RelationFeatures {
            h1,
            h2,
            prod,
            diff,
            hidden,
            logits,
        })
    }

    pub fn forward(&self, e1: &[f64], e2: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.features(e1, e2)?.logits))
    }

    pub fn predict(&self, e1: &[f64], e2: &[f64]) -> Result<usize> {
        Ok(argmax(&self.features(e1, e2)?.logits))
    }

    pub fn loss(&self, e1: &[f64], e2: &[f64], label: usize) -> Result<f64> {
        Ok(-log_softmax_at(&self.features(e1, e2)?.logits, label))
    }

    pub fn loss_grad(&self, e1: &[f64], e2: &[f64], label: usize) -> Result<(f64, RelationWeights)> {
        if label >= self.num_labels() {
            return Err(InferenceError::LabelOutOfRange {
                label,
                labels: self.num_labels(),
            });
        }
        let f = self.features(e1, e2)?;
        let loss = -log_softmax_at(&f.logits, label);
        let dz = softmax_xent_grad(&softmax(&f.logits), label);
        let da = tanh_backward(&self.u.matvec_t(&dz), &f.hidden);
        let d_diff = self.w_diff.matvec_t(&da);
        let d_prod = self.w_prod.matvec_t(&da);
        let mut dh1 = self.w1.matvec_t(&da);
        let mut dh2 = self.w2.matvec_t(&da);
        for i in 0..dh1.len() {
            let s = (f.h1[i] - f.h2[i]).signum() * if f.h1[i] == f.h2[i] { 0.0 } else { 1.0 };
            dh1[i] += d_prod[i] * f.h2[i] + d_diff[i] * s;
            dh2[i] += d_prod[i] * f.h1[i] - d_diff[i] * s;
        }
        let grad = RelationWeights {
            wa: outer(&tanh_backward(&dh1, &f.h1), e1),
            wb: outer(&tanh_backward(&dh2, &f.h2), e2),
            w_diff: outer(&da, &f.diff),
            w_prod: outer(&da, &f.prod),
            w1: outer(&da, &f.h1),
            w2: outer(&da, &f.h2),
            u: outer(&dz, &f.hidden),
        };
        Ok((loss, grad))
    }

    fn adagrad(&mut self, g: &RelationWeights, lr: f64, eps: f64) {
        adagrad_step(&mut self.wa, &mut self.acc.wa, &g.wa, lr, eps);
        adagrad_step(&mut self.wb, &mut self.acc.wb, &g.wb, lr, eps);
        adagrad_step(&mut self.w_diff, &mut self.acc.w_diff, &g.w_diff, lr, eps);
        adagrad_step(&mut self.w_prod, &mut self.acc.w_prod, &g.w_prod, lr, eps);
        adagrad_step(&mut self.w1, &mut self.acc.w1, &g.w1, lr, eps);
        adagrad_step(&mut self.w2, &mut self.acc.w2, &g.w2, lr, eps);
        adagrad_step(&mut self.u, &mut self.acc.u, &g.u, lr, eps);
    }

    pub fn accuracy(&self, params: &ModelParams, examples: &[(usize, usize, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for &(a, b, label) in examples {
            if self.predict(check_user(params, a)?, check_user(params, b)?)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn check_model(&self, params: &ModelParams, tables: &ModelTables) -> Result<()> {
        self.fingerprint.check(&ModelFingerprint::of(params, tables))
    }
}

pub fn rel_forward(clf: &RelationClassifier, e1: &[f64], e2: &[f64]) -> Result<Vec<f64>> {
    clf.forward(e1, e2)
}

/// Trains a pairwise relation head on `(user_a, user_b, label)` examples;
/// dev selection as in [`attr_train`].
pub fn rel_train(
    params: &ModelParams,
    fingerprint: ModelFingerprint,
    relation: &str,
    labels: Vec<String>,
    examples: &[(usize, usize, usize)],
    cfg: &HeadConfig,
    dev: Option<&[(usize, usize, usize)]>,
) -> Result<HeadFit<RelationClassifier>> {
    if cfg.hidden == 0 || cfg.pair_hidden == 0 {
        return Err(InferenceError::ZeroHidden);
    }
    check_labels(&labels, examples.iter().map(|(_, _, l)| l))?;
    for &(a, b, _) in examples {
        check_user(params, a)?;
        check_user(params, b)?;
    }
    let (dim, h, hp) = (params.dim(), cfg.hidden, cfg.pair_hidden);
    let mut rng = rng::seeded(cfg.seed);
    let mut clf = RelationClassifier::zeros(relation, labels, dim, h, hp);
    clf.wa = glorot(h, dim, &mut rng);
    clf.wb = glorot(h, dim, &mut rng);
    clf.w_diff = glorot(hp, h, &mut rng);
    clf.w_prod = glorot(hp, h, &mut rng);
    clf.w1 = glorot(hp, h, &mut rng);
    clf.w2 = glorot(hp, h, &mut rng);
    clf.fingerprint = fingerprint;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, usize, RelationClassifier)> = None;
    for epoch in 0..cfg.epochs {
        let mut erng = rng::seeded(rng::derive_seed(cfg.seed, epoch as u64));
        rng::shuffle(&mut erng, &mut order);
        for &i in &order {
            let (a, b, label) = examples[i];
            let (_, grad) = clf.loss_grad(params.user(a), params.user(b), label)?;
            clf.adagrad(&grad, cfg.lr, cfg.eps);
        }
        if let Some(dev) = dev {
            let acc = clf.accuracy(params, dev)?;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch + 1, clf.clone()));
            }
        }
    }
    Ok(match best {
        Some((acc, epoch, classifier)) => HeadFit {
            classifier,
            selected_epoch: epoch,
            dev_accuracy: Some(acc),
        },
        None => HeadFit {
            classifier: clf,
            selected_epoch: cfg.epochs,
            dev_accuracy: None,
        },
    })
}

// ---------------------------------------------------------------------------
// group inference

/// "label `label` of `classifier` holds".
#[derive(Clone, Copy, Debug)]
pub struct GroupCondition<'a> {
    pub classifier: &'a AttributeClassifier,
    pub label: usize,
}

impl<'a> GroupCondition<'a> {
    pub fn new(classifier: &'a AttributeClassifier, label: usize) -> Result<Self> {
        if label >= classifier.num_labels() {
            return Err(InferenceError::LabelOutOfRange {
                label,
                labels: classifier.num_labels(),
            });
        }
        Ok(GroupCondition { classifier, label })
    }

    /// `attribute=label`
    pub fn name(&self) -> String {
        format!("{}={}", self.classifier.attribute, self.classifier.labels[self.label])
    }

    pub fn probability(&self, e: &[f64]) -> Result<f64> {
        Ok(self.classifier.forward(e)?[self.label])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupFitConfig {
    pub iterations: usize,
    pub step: f64,
    /// L2 penalty on the group embedding.
    pub mu: f64,
}

impl Default for GroupFitConfig {
    fn default() -> Self {
        GroupFitConfig {
            iterations: 500,
            step: 0.1,
            mu: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupFit {
    pub embedding: Vec<f64>,
    /// `P(a_i | e_G)` per condition.
    pub probabilities: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// `Σ log P(a_i | e) − μ‖e‖²` and its gradient in `e`.
pub fn group_objective(conditions: &[GroupCondition<'_>], e: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    let mut value = -mu * dot(e, e);
    let mut grad: Vec<f64> = e.iter().map(|x| -2.0 * mu * x).collect();
    for c in conditions {
        let (loss, g) = c.classifier.loss_grad(e, c.label)?;
        value -= loss;
        for (gi, d) in grad.iter_mut().zip(&g.input) {
            *gi -= d;
        }
    }
    Ok((value, grad))
}

fn check_conditions(conditions: &[GroupCondition<'_>], dim: usize) -> Result<()> {
    if conditions.is_empty() {
        return Err(InferenceError::EmptyConditions);
    }
    if conditions.iter().any(|c| c.classifier.dim() != dim) {
        return Err(InferenceError::IncompatibleHeads);
    }
    Ok(())
}

/// Gradient ascent on [`group_objective`] from `init` for a fixed number of
/// iterations. A step that would lower the objective is halved until it
/// does not, so the objective never decreases.
pub fn fit_group_embedding(conditions: &[GroupCondition<'_>], init: &[f64], cfg: &GroupFitConfig) -> Result<GroupFit> {
    check_conditions(conditions, init.len())?;
    if cfg.iterations == 0 || cfg.mu.is_nan() || cfg.mu < 0.0 || cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(InferenceError::InvalidFitConfig);
    }
    let mut e = init.to_vec();
    let (mut value, mut grad) = group_objective(conditions, &e, cfg.mu)?;
    if !value.is_finite() {
        return Err(InferenceError::NonFiniteObjective(0));
    }
    let initial = value;
    'outer: for it in 1..=cfg.iterations {
        let mut step = cfg.step;
        loop {
            let cand: Vec<f64> = e.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
            let (v, g) = group_objective(conditions, &cand, cfg.mu)?;
            if !v.is_finite() {
                return Err(InferenceError::NonFiniteObjective(it));
            }
            if v >= value {
                e = cand;
                value = v;
                grad = g;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break 'outer;
            }
        }
    }
    let probabilities = conditions
        .iter()
        .map(|c| c.probability(&e))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupFit {
        embedding: e,
        probabilities,
        initial_objective: initial,
        final_objective: value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupQueryResult {
    /// `Π_j P(b_j | e_G)`
    pub probability: f64,
    /// `(condition name, P(b_j | e_G))` per target condition.
    pub factors: Vec<(String, f64)>,
    pub fit: GroupFit,
}

impl fmt::Display for GroupQueryResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p={}", fmt_prob(self.probability))?;
        f.write_str(" factors=")?;
        for (i, (name, p)) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{name}:{}", fmt_prob(*p))?;
        }
        Ok(())
    }
}

fn fmt_prob(p: f64) -> String {
    format!("{p:.6}")
}

/// `P(B | A)`: fits `e_G` on `A` starting from `init`, then multiplies the
/// target probabilities at `e_G`.
pub fn group_query(
    given: &[GroupCondition<'_>],
    targets: &[GroupCondition<'_>],
    init: &[f64],
    cfg: &GroupFitConfig,
) -> Result<GroupQueryResult> {
    check_conditions(targets, init.len())?;
    let fit = fit_group_embedding(given, init, cfg)?;
    let factors = targets
        .iter()
        .map(|c| Ok((c.name(), c.probability(&fit.embedding)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupQueryResult {
        probability: factors.iter().map(|(_, p)| p).product(),
        factors,
        fit,
    })
}

/// `P(B1 | A1) / P(B2 | A2)`
pub fn group_ratio(
    numerator: (&[GroupCondition<'_>], &[GroupCondition<'_>]),
    denominator: (&[GroupCondition<'_>], &[GroupCondition<'_>]),
    init: &[f64],
    cfg: &GroupFitConfig,
) -> Result<f64> {
    let n = group_query(numerator.0, numerator.1, init, cfg)?;
    let d = group_query(denominator.0, denominator.1, init, cfg)?;
    if d.probability == 0.0 {
        return Err(InferenceError::ZeroDenominator);
    }
    Ok(n.probability / d.probability)
}

// ---------------------------------------------------------------------------
// persistence

/// A classifier file holds one head of either kind.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SavedHead {
    Attribute(AttributeClassifier),
    Relation(RelationClassifier),
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    out.push_str(&format!("MATRIX {name} {} {}\n", m.rows(), m.cols()));
    for row in m.iter_rows() {
        let vals: Vec<String> = row.iter().map(|v| fmt_real(*v)).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\n', '\r']) {
        return Err(InferenceError::Parse {
            line: 0,
            message: format!("name {name:?} cannot be stored"),
        });
    }
    Ok(())
}

fn write_head_text(
    kind: &str,
    name: &str,
    labels: &[String],
    fp: &ModelFingerprint,
    mats: &[(&str, &Matrix)],
) -> Result<String> {
    check_name(name)?;
    labels.iter().try_for_each(|l| check_name(l))?;
    if mats.iter().any(|(_, m)| !m.is_finite()) {
        return Err(InferenceError::NonFinite);
    }
    let mut out = format!("{HEAD_MAGIC} {HEAD_VERSION}\nKIND {kind}\nNAME {name}\n");
    out.push_str(&format!("FINGERPRINT {} {}\n", fp.dim, fp.users));
    out.push_str(&format!("LABELS {}\n", labels.len()));
    for l in labels {
        out.push_str(l);
        out.push('\n');
    }
    for (n, m) in mats {
        write_matrix(&mut out, n, m);
    }
    Ok(out)
}

impl SavedHead {
    pub fn to_text(&self) -> Result<String> {
        match self {
            SavedHead::Attribute(c) => write_head_text(
                "attribute",
                &c.attribute,
                &c.labels,
                &c.fingerprint,
                &[("W", &c.w), ("U", &c.u), ("ACC_W", &c.acc_w), ("ACC_U", &c.acc_u)],
            ),
            SavedHead::Relation(c) => write_head_text(
                "relation",
                &c.relation,
                &c.labels,
                &c.fingerprint,
                &[
                    ("WA", &c.wa),
                    ("WB", &c.wb),
                    ("W_DIFF", &c.w_diff),
                    ("W_PROD", &c.w_prod),
                    ("W1", &c.w1),
                    ("W2", &c.w2),
                    ("U", &c.u),
                    ("ACC_WA", &c.acc.wa),
                    ("ACC_WB", &c.acc.wb),
                    ("ACC_W_DIFF", &c.acc.w_diff),
                    ("ACC_W_PROD", &c.acc.w_prod),
                    ("ACC_W1", &c.acc.w1),
                    ("ACC_W2", &c.acc.w2),
                    ("ACC_U", &c.acc.u),
                ],
            ),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let io = |source| InferenceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        f.write_all(text.as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|source| InferenceError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| InferenceError::Parse {
                line: 0,
                message: format!("file ends before {what}"),
            })
        };
        let perr = |line: usize, message: String| InferenceError::Parse { line, message };

        let (ln, header) = next("header")?;
        let version = header
            .strip_prefix(HEAD_MAGIC)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| perr(ln, format!("expected `{HEAD_MAGIC} {HEAD_VERSION}`")))?;
        if version != HEAD_VERSION.to_string() {
            return Err(InferenceError::VersionMismatch(version.to_string()));
        }
        let mut field = |tag: &str| -> Result<(usize, String)> {
            let (ln, l) = next(tag)?;
            l.strip_prefix(tag)
                .and_then(|r| r.strip_prefix(' '))
                .map(|v| (ln, v.to_string()))
                .ok_or_else(|| perr(ln, format!("expected {tag}")))
        };
        let (_, kind) = field("KIND")?;
        let (_, name) = field("NAME")?;
        let (ln, fp) = field("FINGERPRINT")?;
        let (dim, users) = fp
            .split_once(' ')
            .and_then(|(d, u)| Some((d.parse::<usize>().ok()?, u.to_string())))
            .ok_or_else(|| perr(ln, "bad fingerprint".into()))?;
        let (ln, n) = field("LABELS")?;
        let n: usize = n.parse().map_err(|_| perr(ln, "bad label count".into()))?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(next("labels")?.1.to_string());
        }
        let mut mats: BTreeMap<String, Matrix> = BTreeMap::new();
        while let Some((ln, l)) = lines.next() {
            let parts: Vec<&str> = l.split(' ').collect();
            let [tag, mname, r, c] = parts.as_slice() else {
                return Err(perr(ln, "expected `MATRIX <name> <rows> <cols>`".into()));
            };
            if *tag != "MATRIX" {
                return Err(perr(ln, "expected MATRIX".into()));
            }
            let (rows, cols): (usize, usize) = match (r.parse(), c.parse()) {
                (Ok(r), Ok(c)) => (r, c),
                _ => return Err(perr(ln, "bad matrix shape".into())),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| perr(ln, format!("matrix {mname} truncated")))?;
                let before = data.len();
                for tok in row.split(' ').filter(|t| !t.is_empty()) {
                    data.push(tok.parse::<f64>().map_err(|_| perr(ln, format!("bad real {tok:?}")))?);
                }
                if data.len() - before != cols {
                    return Err(perr(ln, format!("expected {cols} values")));
                }
            }
            let m = Matrix::from_vec(rows, cols, data);
            if !m.is_finite() {
                return Err(InferenceError::NonFinite);
            }
            mats.insert(mname.to_string(), m);
        }
        let fingerprint = ModelFingerprint { dim, users };
        let (h, hp) = match kind.as_str() {
            "attribute" => (take_rows(&mats, "W")?, 0),
            "relation" => (take_rows(&mats, "WA")?, take_rows(&mats, "W1")?),
            other => return Err(perr(2, format!("unknown classifier kind {other:?}"))),
        };
        let mut take = |key: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = mats
                .remove(key)
                .ok_or_else(|| perr(0, format!("missing matrix {key}")))?;
            if m.rows() != rows || m.cols() != cols {
                return Err(perr(
                    0,
                    format!(
                        "matrix {key} has shape {}x{}, expected {rows}x{cols}",
                        m.rows(),
                        m.cols()
                    ),
                ));
            }
            Ok(m)
        };
        let l = labels.len();
        match kind.as_str() {
            "attribute" => Ok(SavedHead::Attribute(AttributeClassifier {
                attribute: name,
                w: take("W", h, dim)?,
                u: take("U", l, h)?,
                acc_w: take("ACC_W", h, dim)?,
                acc_u: take("ACC_U", l, h)?,
                labels,
                fingerprint,
            })),
            "relation" => {
                let mut weights = |p: &str| -> Result<RelationWeights> {
                    Ok(RelationWeights {
                        wa: take(&format!("{p}WA"), h, dim)?,
                        wb: take(&format!("{p}WB"), h, dim)?,
                        w_diff: take(&format!("{p}W_DIFF"), hp, h)?,
                        w_prod: take(&format!("{p}W_PROD"), hp, h)?,
                        w1: take(&format!("{p}W1"), hp, h)?,
                        w2: take(&format!("{p}W2"), hp, h)?,
                        u: take(&format!("{p}U"), l, hp)?,
                    })
                };
                let w = weights("")?;
                let acc = weights("ACC_")?;
                Ok(SavedHead::Relation(RelationClassifier {
                    relation: name,
                    labels,
                    wa: w.wa,
                    wb: w.wb,
                    w_diff: w.w_diff,
                    w_prod: w.w_prod,
                    w1: w.w1,
                    w2: w.w2,
                    u: w.u,
                    acc,
                    fingerprint,
                }))
            }
            _ => unreachable!("kind checked above"),
        }
    }
}

fn take_rows(mats: &BTreeMap<String, Matrix>, key: &str) -> Result<usize> {
    mats.get(key).map(Matrix::rows).ok_or_else(|| InferenceError::Parse {
        line: 0,
        message: format!("missing matrix {key}"),
    })
}
