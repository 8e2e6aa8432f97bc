//! Per-event SGD over the text, graph and relation streams.
//!
//! Each epoch expands the corpus into one schedule (every token position with
//! a nonempty context, both orientations of every edge, every triple),
//! shuffles it with an epoch-specific seed and applies
//! `Θ ← Θ − α · w_stream · ∂loss/∂Θ` event by event, touching only the rows
//! the event references. The step size decays linearly from `lr0` to
//! `lr_min` over the whole run.
//!
//! With `workers > 1` the schedule is split into contiguous chunks processed
//! concurrently against shared parameters without locks. Scalars are stored
//! as relaxed atomics, so every read sees some previously written value, but
//! concurrent updates to the same row may be lost and runs are not
//! reproducible.

use std::borrow::Cow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::corpus::{context_window, sample_negative, CorpusError, NegativeSampler, SocialCorpus};
use crate::objectives::{
    graph_loss_grad, relation_loss_grad, text_loss_grad, GraphEvent, LossWeights, SparseGrad, TextEvent, TripleEvent,
};
use crate::params::{
    init_params, load_pretrained_words, InitConfig, ModelFileError, ModelParams, ModelSizes, ParamSource, ParamsError,
    TensorId,
};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("corpus yields no training events for the enabled streams")]
    EmptyCorpus,
    #[error("cannot draw {stream} negatives: {source}")]
    Sampler {
        stream: Stream,
        #[source]
        source: CorpusError,
    },
    #[error("non-finite loss or gradient in {stream} event at step {step}")]
    NonFinite { stream: Stream, step: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Pretrained(#[from] ModelFileError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Text,
    Graph,
    Relation,
}

impl Stream {
    pub fn label(self) -> &'static str {
        match self {
            Stream::Text => "text",
            Stream::Graph => "graph",
            Stream::Relation => "rel",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which evidence streams take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub text: bool,
    pub graph: bool,
    pub relations: bool,
}

impl Streams {
    pub const ALL: Streams = Streams {
        text: true,
        graph: true,
        relations: true,
    };
}

impl Default for Streams {
    fn default() -> Self {
        Streams::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lambda_graph: f64,
    pub lambda_relation: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub text_negatives: usize,
    pub graph_negatives: usize,
    pub relation_negatives: usize,
    pub window: usize,
    pub min_count: u64,
    pub seed: u64,
    pub workers: usize,
    pub freeze_words: bool,
    pub shared_word_table: bool,
    /// Distortion exponent of the unigram negative-word distribution.
    pub word_sampler_power: f64,
    pub streams: Streams,
    /// Optional `<token> <v1> ... <vK>` file used to initialize word vectors.
    pub pretrained_words: Option<PathBuf>,
    /// Print per-epoch progress lines to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 500,
            epochs: 3,
            lambda_graph: 1.0,
            lambda_relation: 1.0,
            lr0: 0.025,
            lr_min: 1e-4,
            text_negatives: 5,
            graph_negatives: 5,
            relation_negatives: 5,
            window: 5,
            min_count: 5,
            seed: 1,
            workers: 1,
            freeze_words: false,
            shared_word_table: false,
            word_sampler_power: 0.75,
            streams: Streams::ALL,
            pretrained_words: None,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.dim == 0 {
            return bad("K must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr_min > 0.0 && self.lr0 > self.lr_min && self.lr0.is_finite()) {
            return bad("learning rates must satisfy lr0 > lr_min > 0");
        }
        for (name, l) in [("lambda1", self.lambda_graph), ("lambda2", self.lambda_relation)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.min_count == 0 {
            return bad("min_count must be positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_graph: self.lambda_graph,
            lambda_relation: self.lambda_relation,
        }
    }

    /// Streams that produce events: enabled and carrying nonzero weight.
    pub fn active_streams(&self) -> Streams {
        Streams {
            text: self.streams.text,
            graph: self.streams.graph && self.lambda_graph > 0.0,
            relations: self.streams.relations && self.lambda_relation > 0.0,
        }
    }

    fn stream_weight(&self, stream: Stream) -> f64 {
        match stream {
            Stream::Text => 1.0,
            Stream::Graph => self.lambda_graph,
            Stream::Relation => self.lambda_relation,
        }
    }
}

/// Linear decay from `lr0` at step 0 to `lr_min` at `total_steps`, floored at
/// `lr_min`.
pub fn lr_schedule(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return config.lr0;
    }
    let frac = step as f64 / total_steps as f64;
    (config.lr0 * (1.0 - frac)).max(config.lr_min)
}

/// `Θ ← Θ − α·g` on the referenced rows. Word blocks are skipped when
/// `freeze_words` is set.
pub fn apply_sparse(params: &mut ModelParams, grad: &SparseGrad, alpha: f64, freeze_words: bool) {
    for b in grad.blocks() {
        if freeze_words && b.tensor.is_word() {
            continue;
        }
        let row = params.tensor_mut(b.tensor).row_mut(b.index);
        for (p, g) in row.iter_mut().zip(&b.values) {
            *p -= alpha * g;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StreamStats {
    pub events: usize,
    /// Sum of unweighted per-event losses.
    pub loss_sum: f64,
}

impl StreamStats {
    pub fn mean(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.loss_sum / self.events as f64
        }
    }

    fn add(&mut self, other: StreamStats) {
        self.events += other.events;
        self.loss_sum += other.loss_sum;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub text: StreamStats,
    pub graph: StreamStats,
    pub relation: StreamStats,
    /// Weighted joint loss per event: `(Σtext + λ1·Σgraph + λ2·Σrel) / events`.
    pub joint_mean: f64,
}

impl EpochStats {
    pub fn stream(&self, s: Stream) -> &StreamStats {
        match s {
            Stream::Text => &self.text,
            Stream::Graph => &self.graph,
            Stream::Relation => &self.relation,
        }
    }

    pub fn events(&self) -> usize {
        self.text.events + self.graph.events + self.relation.events
    }

    /// One `epoch=<i> stream=<s> mean_loss=<v> events=<n>` line per stream.
    pub fn progress_lines(&self) -> Vec<String> {
        [Stream::Text, Stream::Graph, Stream::Relation]
            .into_iter()
            .map(|s| {
                let st = self.stream(s);
                format!(
                    "epoch={} stream={} mean_loss={:.6} events={}",
                    self.epoch,
                    s,
                    st.mean(),
                    st.events
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn total_events(&self) -> usize {
        self.epochs.iter().map(EpochStats::events).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Event {
    Text { doc: u32, pos: u32 },
    Graph { anchor: u32, positive: u32 },
    Relation { triple: u32 },
}

fn build_schedule(corpus: &SocialCorpus, streams: Streams) -> Vec<Event> {
    let mut events = Vec::new();
    if streams.text {
        for (d, doc) in corpus.documents.iter().enumerate() {
            if doc.tokens.len() < 2 {
                continue;
            }
            for pos in 0..doc.tokens.len() {
                events.push(Event::Text {
                    doc: d as u32,
                    pos: pos as u32,
                });
            }
        }
    }
    if streams.graph {
        for e in &corpus.edges {
            events.push(Event::Graph {
                anchor: e.a as u32,
                positive: e.b as u32,
            });
            events.push(Event::Graph {
                anchor: e.b as u32,
                positive: e.a as u32,
            });
        }
    }
    if streams.relations {
        events.extend((0..corpus.triples.len()).map(|t| Event::Relation { triple: t as u32 }));
    }
    events
}

struct Samplers {
    words: Option<NegativeSampler>,
    users: Option<NegativeSampler>,
    entities: Option<NegativeSampler>,
}

impl Samplers {
    fn new(corpus: &SocialCorpus, config: &TrainConfig, streams: Streams) -> Result<Self, TrainError> {
        let err = |stream| move |source| TrainError::Sampler { stream, source };
        let check = |s: &NegativeSampler, needed: usize, stream: Stream| {
            if needed > 0 && s.support() < 2 {
                Err(TrainError::Sampler {
                    stream,
                    source: CorpusError::ExclusionCoversSupport,
                })
            } else {
                Ok(())
            }
        };
        let words = if streams.text && corpus.text_positions() > 0 {
            let s =
                NegativeSampler::unigram(corpus.vocab.freq(), config.word_sampler_power).map_err(err(Stream::Text))?;
            check(&s, config.text_negatives, Stream::Text)?;
            Some(s)
        } else {
            None
        };
        let users = if streams.graph && !corpus.edges.is_empty() {
            let s = NegativeSampler::uniform(corpus.users.len()).map_err(err(Stream::Graph))?;
            check(&s, config.graph_negatives, Stream::Graph)?;
            Some(s)
        } else {
            None
        };
        let entities = if streams.relations && !corpus.triples.is_empty() {
            let s = NegativeSampler::uniform(corpus.entities.len()).map_err(err(Stream::Relation))?;
            check(&s, config.relation_negatives, Stream::Relation)?;
            Some(s)
        } else {
            None
        };
        Ok(Samplers { words, users, entities })
    }
}

fn draw(
    sampler: &Option<NegativeSampler>,
    rng: &mut Rng,
    count: usize,
    exclude: usize,
    stream: Stream,
) -> Result<Vec<usize>, TrainError> {
    let s = sampler.as_ref().expect("sampler exists for scheduled stream");
    (0..count)
        .map(|_| sample_negative(s, rng, &[exclude]).map_err(|source| TrainError::Sampler { stream, source }))
        .collect()
}

/// Builds the concrete event (drawing negatives) and evaluates its weighted
/// loss and gradient.
fn evaluate<P: ParamSource>(
    params: &P,
    corpus: &SocialCorpus,
    config: &TrainConfig,
    samplers: &Samplers,
    rng: &mut Rng,
    event: Event,
) -> Result<(Stream, f64, SparseGrad), TrainError> {
    let (stream, loss, mut grad) = match event {
        Event::Text { doc, pos } => {
            let doc = &corpus.documents[doc as usize];
            let pos = pos as usize;
            let target = doc.tokens[pos];
            let ev = TextEvent {
                user: doc.user,
                target,
                context: context_window(&doc.tokens, pos, config.window),
                negatives: draw(&samplers.words, rng, config.text_negatives, target, Stream::Text)?,
            };
            let (l, g) = text_loss_grad(params, &ev).expect("scheduled text events have context");
            (Stream::Text, l, g)
        }
        Event::Graph { anchor, positive } => {
            let positive = positive as usize;
            let ev = GraphEvent {
                anchor: anchor as usize,
                positive,
                negatives: draw(&samplers.users, rng, config.graph_negatives, positive, Stream::Graph)?,
            };
            let (l, g) = graph_loss_grad(params, &ev);
            (Stream::Graph, l, g)
        }
        Event::Relation { triple } => {
            let t = corpus.triples[triple as usize];
            let ev = TripleEvent {
                relation: t.relation,
                user: t.user,
                entity: t.entity,
                negatives: draw(
                    &samplers.entities,
                    rng,
                    config.relation_negatives,
                    t.entity,
                    Stream::Relation,
                )?,
            };
            let (l, g) = relation_loss_grad(params, &ev);
            (Stream::Relation, l, g)
        }
    };
    let w = config.stream_weight(stream);
    if w != 1.0 {
        grad.scale(w);
    }
    Ok((stream, loss, grad))
}

#[derive(Default, Clone, Copy)]
struct Tally {
    text: StreamStats,
    graph: StreamStats,
    relation: StreamStats,
}

impl Tally {
    fn record(&mut self, stream: Stream, loss: f64) {
        let s = match stream {
            Stream::Text => &mut self.text,
            Stream::Graph => &mut self.graph,
            Stream::Relation => &mut self.relation,
        };
        s.events += 1;
        s.loss_sum += loss;
    }

    fn merge(&mut self, other: Tally) {
        self.text.add(other.text);
        self.graph.add(other.graph);
        self.relation.add(other.relation);
    }

    fn into_epoch(self, epoch: usize, weights: LossWeights) -> EpochStats {
        let events = self.text.events + self.graph.events + self.relation.events;
        let weighted = self.text.loss_sum
            + weights.lambda_graph * self.graph.loss_sum
            + weights.lambda_relation * self.relation.loss_sum;
        EpochStats {
            epoch,
            text: self.text,
            graph: self.graph,
            relation: self.relation,
            joint_mean: if events == 0 { 0.0 } else { weighted / events as f64 },
        }
    }
}

/// Initializes parameters for `corpus` and trains them.
pub fn train(corpus: &SocialCorpus, config: &TrainConfig) -> Result<(ModelParams, TrainReport), TrainError> {
    config.validate()?;
    let init = InitConfig {
        shared_word_table: config.shared_word_table,
        ..InitConfig::seeded(config.seed)
    };
    let mut params = init_params(ModelSizes::of(corpus), config.dim, &init)?;
    if let Some(path) = &config.pretrained_words {
        load_pretrained_words(&mut params, path, corpus.vocab.table(), config.freeze_words)?;
    }
    let report = train_params(&mut params, corpus, config)?;
    Ok((params, report))
}

/// Trains existing parameters in place. `params` must have been built
/// against `corpus`'s tables.
pub fn train_params(
    params: &mut ModelParams,
    corpus: &SocialCorpus,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if params.dim() != config.dim || params.sizes() != ModelSizes::of(corpus) {
        return Err(TrainError::Config(
            "parameters do not match the corpus tables or K".into(),
        ));
    }
    let streams = config.active_streams();
    let base = build_schedule(corpus, streams);
    if base.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let samplers = Samplers::new(corpus, config, streams)?;
    let freeze = config.freeze_words || params.words_frozen();
    let total_steps = base.len() * config.epochs;
    let started = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);

    let mut shared = (config.workers > 1).then(|| AtomicParams::from_params(params));
    for epoch in 0..config.epochs {
        let mut rng = rng::seeded(rng::derive_seed(config.seed, epoch as u64));
        let mut schedule = base.clone();
        rng::shuffle(&mut rng, &mut schedule);
        let offset = epoch * base.len();
        let tally = match &shared {
            None => run_sequential(
                params,
                corpus,
                config,
                &samplers,
                &mut rng,
                &schedule,
                offset,
                total_steps,
                freeze,
            )?,
            Some(atomic) => {
                let seed = rng::derive_seed(config.seed ^ 0x5eed, epoch as u64);
                run_parallel(
                    atomic,
                    corpus,
                    config,
                    &samplers,
                    seed,
                    &schedule,
                    offset,
                    total_steps,
                    freeze,
                )?
            }
        };
        let stats = tally.into_epoch(epoch + 1, config.weights());
        if config.progress {
            for line in stats.progress_lines() {
                eprintln!("{line}");
            }
        }
        epochs.push(stats);
    }
    if let Some(atomic) = shared.take() {
        atomic.write_back(params);
    }
    Ok(TrainReport {
        epochs,
        wall_time: started.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_sequential(
    params: &mut ModelParams,
    corpus: &SocialCorpus,
    config: &TrainConfig,
    samplers: &Samplers,
    rng: &mut Rng,
    schedule: &[Event],
    offset: usize,
    total_steps: usize,
    freeze: bool,
) -> Result<Tally, TrainError> {
    let mut tally = Tally::default();
    for (i, &event) in schedule.iter().enumerate() {
        let step = offset + i;
        let (stream, loss, grad) = evaluate(params, corpus, config, samplers, rng, event)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(TrainError::NonFinite { stream, step });
        }
        apply_sparse(params, &grad, lr_schedule(config, step, total_steps), freeze);
        tally.record(stream, loss);
    }
    Ok(tally)
}

#[allow(clippy::too_many_arguments)]
fn run_parallel(
    params: &AtomicParams,
    corpus: &SocialCorpus,
    config: &TrainConfig,
    samplers: &Samplers,
    seed: u64,
    schedule: &[Event],
    offset: usize,
    total_steps: usize,
    freeze: bool,
) -> Result<Tally, TrainError> {
    let chunk = schedule.len().div_ceil(config.workers);
    let counter = AtomicUsize::new(offset);
    let results: Vec<Result<Tally, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = schedule
            .chunks(chunk)
            .enumerate()
            .map(|(w, events)| {
                let counter = &counter;
                scope.spawn(move || {
                    let mut rng = rng::seeded(rng::derive_seed(seed, w as u64));
                    let mut tally = Tally::default();
                    for &event in events {
                        let step = counter.fetch_add(1, Ordering::Relaxed);
                        let (stream, loss, grad) = evaluate(params, corpus, config, samplers, &mut rng, event)?;
                        if !loss.is_finite() || !grad.is_finite() {
                            return Err(TrainError::NonFinite { stream, step });
                        }
                        params.apply(&grad, lr_schedule(config, step, total_steps), freeze);
                        tally.record(stream, loss);
                    }
                    Ok(tally)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });
    let mut total = Tally::default();
    for r in results {
        total.merge(r?);
    }
    Ok(total)
}

/// Parameter storage shared by parallel workers: each scalar is an `f64`
/// bit pattern in an `AtomicU64`, read and written with relaxed ordering.
struct AtomicParams {
    dim: usize,
    shared_word_table: bool,
    tensors: [(usize, Vec<AtomicU64>); 5],
}

const TENSORS: [TensorId; 5] = [
    TensorId::User,
    TensorId::WordIn,
    TensorId::WordOut,
    TensorId::Entity,
    TensorId::Relation,
];

impl AtomicParams {
    fn from_params(params: &ModelParams) -> Self {
        let pack = |t: TensorId| {
            let m = params.tensor(t);
            (
                m.cols(),
                m.as_slice().iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
            )
        };
        AtomicParams {
            dim: params.dim(),
            shared_word_table: params.shared_word_table(),
            tensors: TENSORS.map(pack),
        }
    }

    fn slot(&self, tensor: TensorId) -> &(usize, Vec<AtomicU64>) {
        let t = match tensor {
            TensorId::WordOut if self.shared_word_table => TensorId::WordIn,
            t => t,
        };
        &self.tensors[TENSORS.iter().position(|&x| x == t).expect("known tensor")]
    }

    fn cells(&self, tensor: TensorId, index: usize) -> &[AtomicU64] {
        let (width, cells) = self.slot(tensor);
        &cells[index * width..(index + 1) * width]
    }

    fn apply(&self, grad: &SparseGrad, alpha: f64, freeze_words: bool) {
        for b in grad.blocks() {
            if freeze_words && b.tensor.is_word() {
                continue;
            }
            for (cell, g) in self.cells(b.tensor, b.index).iter().zip(&b.values) {
                let cur = f64::from_bits(cell.load(Ordering::Relaxed));
                cell.store((cur - alpha * g).to_bits(), Ordering::Relaxed);
            }
        }
    }

    fn write_back(self, params: &mut ModelParams) {
        let shared = self.shared_word_table;
        for (t, (_, cells)) in TENSORS.into_iter().zip(self.tensors) {
            if shared && t == TensorId::WordOut {
                continue;
            }
            for (dst, cell) in params.tensor_mut(t).as_mut_slice().iter_mut().zip(cells) {
                *dst = f64::from_bits(cell.into_inner());
            }
        }
    }
}

impl ParamSource for AtomicParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, tensor: TensorId, index: usize) -> Cow<'_, [f64]> {
        Cow::Owned(
            self.cells(tensor, index)
                .iter()
                .map(|c| f64::from_bits(c.load(Ordering::Relaxed)))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusSources, UserTable};
    use std::io::Cursor;

    fn tiny_corpus() -> SocialCorpus {
        // 20 users in two 10-cliques; clique A writes tokens a*, clique B b*.
        let mut docs = String::new();
        let mut edges = String::new();
        let mut triples = String::new();
        for u in 0..20 {
            let group = if u < 10 { 'a' } else { 'b' };
            let toks: Vec<String> = (0..10).map(|i| format!("{group}{}", (u + i) % 4)).collect();
            docs.push_str(&format!("u{u}\t{}\n", toks.join(" ")));
            triples.push_str(&format!("member\tu{u}\t{group}\n"));
        }
        for base in [0, 10] {
            for i in base..base + 10 {
                for j in i + 1..base + 10 {
                    edges.push_str(&format!("u{i}\tu{j}\n"));
                }
            }
        }
        SocialCorpus::from_readers(
            CorpusSources {
                documents: Some((Cursor::new(docs), "d".into())),
                edges: Some((Cursor::new(edges), "e".into())),
                triples: Some((Cursor::new(triples), "t".into())),
            },
            1,
            UserTable::new(),
        )
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_protocol_values() {
        let c = TrainConfig::default();
        assert_eq!(c.dim, 500);
        assert_eq!(c.epochs, 3);
        assert_eq!((c.lambda_graph, c.lambda_relation), (1.0, 1.0));
        assert_eq!(c.window, 5);
        assert_eq!(c.min_count, 5);
    }

    #[test]
    fn lr_schedule_cases() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(&c, 0, 100), 0.025);
        assert_eq!(lr_schedule(&c, 100, 100), 1e-4);
        assert_eq!(lr_schedule(&c, 50, 100), 0.0125);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..small_config()
            },
            TrainConfig {
                lr0: 1e-5,
                ..small_config()
            },
            TrainConfig {
                lr_min: 0.0,
                ..small_config()
            },
            TrainConfig {
                lambda_graph: -1.0,
                ..small_config()
            },
            TrainConfig {
                dim: 0,
                ..small_config()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn apply_sparse_cases() {
        let corpus = tiny_corpus();
        let mut p = init_params(ModelSizes::of(&corpus), 4, &InitConfig::seeded(1)).unwrap();
        let before = p.clone();
        let mut zero = SparseGrad::new();
        zero.push(TensorId::User, 0, vec![0.0; 4]);
        apply_sparse(&mut p, &zero, 1.0, false);
        assert_eq!(p, before);

        let mut g = SparseGrad::new();
        g.push(TensorId::User, 2, vec![1.0, 2.0, 3.0, 4.0]);
        g.push(TensorId::WordIn, 1, vec![1.0; 4]);
        apply_sparse(&mut p, &g, 1.0, true);
        for j in 0..4 {
            assert_eq!(p.user(2)[j], before.user(2)[j] - (j + 1) as f64);
        }
        assert_eq!(p.tensor(TensorId::WordIn), before.tensor(TensorId::WordIn));
        apply_sparse(&mut p, &g, 1.0, false);
        assert_ne!(p.tensor(TensorId::WordIn), before.tensor(TensorId::WordIn));
    }

    #[test]
    fn event_accounting() {
        let corpus = tiny_corpus();
        let (_, report) = train(&corpus, &small_config()).unwrap();
        let per_epoch = corpus.text_positions() + 2 * corpus.edges.len() + corpus.triples.len();
        assert_eq!(report.epochs.len(), 3);
        for e in &report.epochs {
            assert_eq!(e.events(), per_epoch);
            assert_eq!(e.graph.events, 2 * corpus.edges.len());
        }
        assert_eq!(report.total_events(), 3 * per_epoch);
    }

    #[test]
    fn sequential_training_is_deterministic() {
        let corpus = tiny_corpus();
        let (a, ra) = train(&corpus, &small_config()).unwrap();
        let (b, rb) = train(&corpus, &small_config()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn joint_loss_decreases_on_tiny_corpus() {
        let corpus = tiny_corpus();
        let (_, report) = train(&corpus, &small_config()).unwrap();
        let j: Vec<f64> = report.epochs.iter().map(|e| e.joint_mean).collect();
        assert!(j[0] > j[1] && j[1] > j[2], "{j:?}");
    }

    #[test]
    fn zero_lambda_disables_stream() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            lambda_graph: 0.0,
            ..small_config()
        };
        let (_, report) = train(&corpus, &cfg).unwrap();
        assert!(report.epochs.iter().all(|e| e.graph.events == 0));
        assert!(report.epochs[0].progress_lines()[1].contains("stream=graph mean_loss=0.000000 events=0"));
    }

    #[test]
    fn frozen_words_stay_fixed() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            freeze_words: true,
            ..small_config()
        };
        let init = init_params(ModelSizes::of(&corpus), 8, &InitConfig::seeded(3)).unwrap();
        let (p, _) = train(&corpus, &cfg).unwrap();
        assert_eq!(p.tensor(TensorId::WordIn), init.tensor(TensorId::WordIn));
        assert_eq!(p.tensor(TensorId::WordOut), init.tensor(TensorId::WordOut));
        assert_ne!(p.users(), init.users());
    }

    #[test]
    fn updates_touch_only_referenced_rows() {
        let corpus = tiny_corpus();
        let cfg = small_config();
        let streams = cfg.active_streams();
        let samplers = Samplers::new(&corpus, &cfg, streams).unwrap();
        let mut rng = rng::seeded(9);
        let base = build_schedule(&corpus, streams);
        let mut params = init_params(ModelSizes::of(&corpus), 8, &InitConfig::seeded(1)).unwrap();
        for &event in base.iter().step_by(7) {
            let before = params.clone();
            let (_, _, grad) = evaluate(&params, &corpus, &cfg, &samplers, &mut rng, event).unwrap();
            let touched = grad.touched();
            apply_sparse(&mut params, &grad, 0.1, false);
            for t in TENSORS {
                for r in 0..params.tensor(t).rows() {
                    if params.tensor(t).row(r) != before.tensor(t).row(r) {
                        assert!(touched.contains(&(t, r)), "{t:?} row {r} changed by {event:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn parallel_mode_trains_and_accounts() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            workers: 4,
            ..small_config()
        };
        let (p, report) = train(&corpus, &cfg).unwrap();
        assert!(p.is_finite());
        let per_epoch = corpus.text_positions() + 2 * corpus.edges.len() + corpus.triples.len();
        assert!(report.epochs.iter().all(|e| e.events() == per_epoch));
    }

    #[test]
    fn text_only_corpus_without_text_stream_is_empty() {
        let corpus = SocialCorpus::from_readers(
            CorpusSources::<_, Cursor<&str>, Cursor<&str>> {
                documents: Some((Cursor::new("u1\ta b\nu2\tb a\n"), "d".into())),
                edges: None,
                triples: None,
            },
            1,
            UserTable::new(),
        )
        .unwrap();
        let cfg = TrainConfig {
            streams: Streams {
                text: false,
                ..Streams::ALL
            },
            ..small_config()
        };
        assert!(matches!(train(&corpus, &cfg), Err(TrainError::EmptyCorpus)));
    }
}
