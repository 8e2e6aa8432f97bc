//! Oracles shared by the integration tests: central finite differences,
//! brute-force AUC and cosine statistics, and desk-scale configurations.
#![allow(dead_code)]

use socialvec::corpus::{Edge, SocialCorpus};
use socialvec::inference::{AttributeClassifier, RelationClassifier};
use socialvec::objectives::{
    graph_loss_grad, relation_loss_grad, text_loss_grad, GraphEvent, SparseGrad, TextEvent, TripleEvent,
};
use socialvec::params::{init_params, InitConfig, ModelParams, ModelSizes, TensorId};
use socialvec::rng::{self, Rng};
use socialvec::synth::{AttributeSpec, SynthConfig};
use socialvec::tensor::{cosine, dot, Matrix};
use socialvec::trainer::TrainConfig;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|)`, with a floor on the scale so that entries
/// that are zero up to round-off compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random model with non-trivial magnitudes so every gradient term is
/// exercised.
pub fn random_params(rng: &mut Rng, sizes: ModelSizes, dim: usize) -> ModelParams {
    let init = InitConfig {
        vector_half_range: Some(0.8),
        relation_noise: Some(0.5),
        ..InitConfig::seeded(rng::below(rng, 1 << 30) as u64)
    };
    init_params(sizes, dim, &init).unwrap()
}

fn pick(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng::below(rng, n)).collect()
}

/// Checks every coordinate of every block the analytic gradient touches,
/// plus one untouched row per tensor, against central differences of
/// `loss`. Returns the worst relative error.
fn check_sparse(params: &mut ModelParams, grad: &SparseGrad, loss: impl Fn(&ModelParams) -> f64) -> f64 {
    let grad = grad.clone().coalesce();
    let mut worst: f64 = 0.0;
    let mut rows: Vec<(TensorId, usize)> = grad.touched();
    for t in [
        TensorId::User,
        TensorId::WordIn,
        TensorId::WordOut,
        TensorId::Entity,
        TensorId::Relation,
    ] {
        let n = params.tensor(t).rows();
        if let Some(free) = (0..n).find(|&i| grad.get(t, i).is_none()) {
            rows.push((t, free));
        }
    }
    for (t, i) in rows {
        let width = params.tensor(t).cols();
        for c in 0..width {
            let orig = params.tensor(t).get(i, c);
            params.tensor_mut(t).set(i, c, orig + FD_EPS);
            let up = loss(params);
            params.tensor_mut(t).set(i, c, orig - FD_EPS);
            let down = loss(params);
            params.tensor_mut(t).set(i, c, orig);
            let numeric = (up - down) / (2.0 * FD_EPS);
            let analytic = grad.get(t, i).map_or(0.0, |g| g[c]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

fn sizes(rng: &mut Rng) -> ModelSizes {
    ModelSizes {
        users: 3 + rng::below(rng, 4),
        words: 3 + rng::below(rng, 6),
        entities: 2 + rng::below(rng, 4),
        relations: 1 + rng::below(rng, 2),
    }
}

pub fn fd_text(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let dim = 1 + rng::below(&mut rng, 16);
    let s = sizes(&mut rng);
    let mut p = random_params(&mut rng, s, dim);
    let nctx = 1 + rng::below(&mut rng, 6);
    let nneg = rng::below(&mut rng, 6);
    let ev = TextEvent {
        user: rng::below(&mut rng, s.users),
        target: rng::below(&mut rng, s.words),
        context: pick(&mut rng, s.words, nctx),
        negatives: pick(&mut rng, s.words, nneg),
    };
    let (_, g) = text_loss_grad(&p, &ev).unwrap();
    check_sparse(&mut p, &g, |q| text_loss_grad(q, &ev).unwrap().0)
}

pub fn fd_graph(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let dim = 1 + rng::below(&mut rng, 16);
    let s = sizes(&mut rng);
    let mut p = random_params(&mut rng, s, dim);
    let nneg = rng::below(&mut rng, 6);
    let ev = GraphEvent {
        anchor: rng::below(&mut rng, s.users),
        positive: rng::below(&mut rng, s.users),
        negatives: pick(&mut rng, s.users, nneg),
    };
    let (_, g) = graph_loss_grad(&p, &ev);
    check_sparse(&mut p, &g, |q| graph_loss_grad(q, &ev).0)
}

pub fn fd_relation(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let dim = 1 + rng::below(&mut rng, 16);
    let s = sizes(&mut rng);
    let mut p = random_params(&mut rng, s, dim);
    let nneg = rng::below(&mut rng, 6);
    let ev = TripleEvent {
        relation: rng::below(&mut rng, s.relations),
        user: rng::below(&mut rng, s.users),
        entity: rng::below(&mut rng, s.entities),
        negatives: pick(&mut rng, s.entities, nneg),
    };
    let (_, g) = relation_loss_grad(&p, &ev);
    check_sparse(&mut p, &g, |q| relation_loss_grad(q, &ev).0)
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng::uniform(rng, -1.0, 1.0))
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::uniform(rng, -1.0, 1.0)).collect()
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

/// Central differences over every entry of `m`, comparing with `analytic`.
fn check_dense(m: &mut Matrix, analytic: &Matrix, loss: &dyn Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let orig = m.get(r, c);
            m.set(r, c, orig + FD_EPS);
            let up = loss(m);
            m.set(r, c, orig - FD_EPS);
            let down = loss(m);
            m.set(r, c, orig);
            worst = worst.max(rel_err(analytic.get(r, c), (up - down) / (2.0 * FD_EPS)));
        }
    }
    worst
}

pub fn fd_attribute_head(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let dim = 1 + rng::below(&mut rng, 16);
    let h = 1 + rng::below(&mut rng, 6);
    let l = 2 + rng::below(&mut rng, 3);
    let mut clf = AttributeClassifier::zeros("a", labels(l), dim, h);
    clf.w = random_matrix(&mut rng, h, dim);
    clf.u = random_matrix(&mut rng, l, h);
    let e = random_vec(&mut rng, dim);
    let label = rng::below(&mut rng, l);
    let (_, g) = clf.loss_grad(&e, label).unwrap();

    let mut worst: f64 = 0.0;
    let base = clf.clone();
    let mut w = clf.w.clone();
    worst = worst.max(check_dense(&mut w, &g.w, &|m| {
        let mut c = base.clone();
        c.w = m.clone();
        c.loss(&e, label).unwrap()
    }));
    let mut u = clf.u.clone();
    worst = worst.max(check_dense(&mut u, &g.u, &|m| {
        let mut c = base.clone();
        c.u = m.clone();
        c.loss(&e, label).unwrap()
    }));
    let mut input = Matrix::from_vec(1, dim, e.clone());
    let analytic = Matrix::from_vec(1, dim, g.input.clone());
    worst.max(check_dense(&mut input, &analytic, &|m| {
        base.loss(m.row(0), label).unwrap()
    }))
}

pub fn fd_relation_head(seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let dim = 1 + rng::below(&mut rng, 16);
    let h = 1 + rng::below(&mut rng, 6);
    let hp = 1 + rng::below(&mut rng, 5);
    let l = 2 + rng::below(&mut rng, 3);
    let mut clf = RelationClassifier::zeros("r", labels(l), dim, h, hp);
    clf.wa = random_matrix(&mut rng, h, dim);
    clf.wb = random_matrix(&mut rng, h, dim);
    clf.w_diff = random_matrix(&mut rng, hp, h);
    clf.w_prod = random_matrix(&mut rng, hp, h);
    clf.w1 = random_matrix(&mut rng, hp, h);
    clf.w2 = random_matrix(&mut rng, hp, h);
    clf.u = random_matrix(&mut rng, l, hp);
    let e1 = random_vec(&mut rng, dim);
    let e2 = random_vec(&mut rng, dim);
    let label = rng::below(&mut rng, l);
    let (_, g) = clf.loss_grad(&e1, &e2, label).unwrap();

    type Slot = fn(&mut RelationClassifier) -> &mut Matrix;
    let blocks: [(Slot, &Matrix); 7] = [
        (|c| &mut c.wa, &g.wa),
        (|c| &mut c.wb, &g.wb),
        (|c| &mut c.w_diff, &g.w_diff),
        (|c| &mut c.w_prod, &g.w_prod),
        (|c| &mut c.w1, &g.w1),
        (|c| &mut c.w2, &g.w2),
        (|c| &mut c.u, &g.u),
    ];
    let mut worst: f64 = 0.0;
    for (slot, analytic) in blocks {
        let base = clf.clone();
        let mut m = slot(&mut clf.clone()).clone();
        worst = worst.max(check_dense(&mut m, analytic, &|m| {
            let mut c = base.clone();
            *slot(&mut c) = m.clone();
            c.loss(&e1, &e2, label).unwrap()
        }));
    }
    worst
}

/// Mean intra-community minus mean inter-community cosine of user vectors.
pub fn cosine_gap(params: &ModelParams, communities: &[usize]) -> f64 {
    let n = communities.len();
    let (mut intra, mut ni, mut inter, mut no) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine(params.user(i), params.user(j));
            if communities[i] == communities[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                no += 1;
            }
        }
    }
    intra / ni as f64 - inter / no as f64
}

/// AUC of ranking all user pairs by dot product, edges as positives; ties
/// count one half. Brute force over every (edge, non-edge) pair.
pub fn edge_auc(params: &ModelParams, corpus: &SocialCorpus) -> f64 {
    let edges = corpus.edge_set();
    let n = corpus.users.len();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in (i + 1)..n {
            let s = dot(params.user(i), params.user(j));
            if edges.contains(&Edge::new(i, j).unwrap()) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Training settings that move vectors far enough from their start on
/// 200–400 user corpora: K=32, 30 epochs, lr0=0.05.
pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 32,
        epochs: 30,
        lr0: 0.05,
        min_count: 1,
        seed,
        ..TrainConfig::default()
    }
}

/// Planted data where text, graph and the community marker each carry
/// partial, noisy community evidence.
pub fn mixed_signal_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_users: 400,
        p_in: 0.04,
        p_out: 0.02,
        topic_skew: 0.6,
        tokens_per_user: 100,
        attributes: vec![AttributeSpec::numbered("member", "c", 2, 0.25)],
        seed,
        ..SynthConfig::default()
    }
}
