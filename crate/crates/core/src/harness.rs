//! Evaluation protocol: user splits, attribute and friend prediction tasks,
//! and the signal-ablation matrix.
//!
//! Each task retrains embeddings with the variant's evidence streams, fits
//! an inference head on the train split, picks the head epoch by dev
//! accuracy and reports accuracy on the test split. Test labels are read
//! only after the head is fixed, and target-attribute triples of dev and
//! test users are removed before embedding training.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Edge, RelationTable, SocialCorpus, UserTable};
use crate::inference::{attr_train, rel_train, AttributeClassifier, HeadConfig, InferenceError, ModelFingerprint};
use crate::params::{table_fingerprint, ModelParams};
use crate::rng;
use crate::synth::Truth;
use crate::trainer::{train, Streams, TrainConfig, TrainError};

pub const FRIEND_TASK: &str = "friend";
pub const FRIEND_LABELS: [&str; 2] = ["no", "friend"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),
    #[error("need at least {needed} {what}, found {found}")]
    TooFew {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("labels cover {0} class(es); at least two are needed")]
    DegenerateLabels(usize),
    #[error("not enough non-edges to balance {0} positive pairs")]
    TooFewNonEdges(usize),
    #[error("no variants to run")]
    NoVariants,
    #[error("variant {0:?} enables no signal")]
    EmptyVariant(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("label attribute {0:?} not present")]
    UnknownAttribute(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Head(#[from] InferenceError),
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            seed: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.dev, self.test];
        if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(HarnessError::InvalidSplit(format!(
                "{}/{}/{}: every ratio must be positive",
                self.train, self.dev, self.test
            )));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(HarnessError::InvalidSplit(format!(
                "{}/{}/{} does not sum to 1",
                self.train, self.dev, self.test
            )));
        }
        Ok(())
    }

    /// `(train, dev, test)` sizes: floor for dev and test, the remainder to
    /// train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let (dev, test) = (part(self.dev), part(self.test));
        (n.saturating_sub(dev + test), dev, test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles `items` with the split seed and cuts test, dev, then train.
fn split_items<T: Clone>(
    items: &[T],
    spec: &SplitSpec,
    stream: u64,
    what: &'static str,
    min: usize,
) -> Result<Split<T>> {
    spec.validate()?;
    if items.len() < min {
        return Err(HarnessError::TooFew {
            what,
            needed: min,
            found: items.len(),
        });
    }
    let (n_train, n_dev, n_test) = spec.sizes(items.len());
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(HarnessError::InvalidSplit(format!(
            "{} {what} give an empty split ({n_train}/{n_dev}/{n_test})",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng::shuffle(&mut rng::seeded(rng::derive_seed(spec.seed, stream)), &mut order);
    let pick = |r: &[usize]| {
        let mut idx = r.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect()
    };
    Ok(Split {
        test: pick(&order[..n_test]),
        dev: pick(&order[n_test..n_test + n_dev]),
        train: pick(&order[n_test + n_dev..]),
    })
}

/// Disjoint, covering train/dev/test split of `users` (≥ 10), deterministic
/// per seed.
pub fn split_users(users: &[usize], spec: &SplitSpec) -> Result<Split<usize>> {
    split_items(users, spec, 0, "users", 10)
}

/// A named evidence-stream mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub streams: Streams,
}

impl Variant {
    pub fn new(name: &str, text: bool, graph: bool, relations: bool) -> Self {
        Variant {
            name: name.to_string(),
            streams: Streams { text, graph, relations },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.streams;
        if !(s.text || s.graph || s.relations) {
            return Err(HarnessError::EmptyVariant(self.name.clone()));
        }
        Ok(())
    }

    /// The built-in variants by name.
    pub fn named(name: &str) -> Result<Self> {
        standard_variants()
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| HarnessError::UnknownVariant(name.to_string()))
    }
}

/// All, the three single-signal variants and the two network pairs.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::new("All", true, true, true),
        Variant::new("OnlyText", true, false, false),
        Variant::new("OnlyNetwork", false, true, false),
        Variant::new("OnlyAttribute", false, false, true),
        Variant::new("Network+Text", true, true, false),
        Variant::new("Network+Attribute", false, true, true),
    ]
}

/// Per-user class labels for an attribute task.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    /// Task name reported in results.
    pub name: String,
    pub values: Vec<String>,
    /// Label index per corpus user; `None` for unlabelled users.
    pub labels: Vec<Option<usize>>,
    /// Relation whose triples carry the target, withheld for dev and test
    /// users during embedding training.
    pub relation: Option<String>,
}

impl LabelSet {
    /// Labels for `attribute` (or the community pseudo-attribute) from a
    /// truth table, aligned with `corpus`'s user table. Values are sorted.
    pub fn from_truth(truth: &Truth, corpus: &SocialCorpus, attribute: &str) -> Result<Self> {
        Self::from_truth_tables(truth, &corpus.users, &corpus.relations, attribute)
    }

    /// [`LabelSet::from_truth`] against bare id tables, e.g. a model's.
    pub fn from_truth_tables(
        truth: &Truth,
        users: &UserTable,
        relations: &RelationTable,
        attribute: &str,
    ) -> Result<Self> {
        let mut by_user = vec![None; users.len()];
        let mut values = BTreeSet::new();
        for (i, user) in truth.users.iter().enumerate() {
            let Some(v) = truth.value(i, attribute) else {
                continue;
            };
            if let Some(u) = users.get(user) {
                values.insert(v.clone());
                by_user[u] = Some(v);
            }
        }
        if values.is_empty() {
            return Err(HarnessError::UnknownAttribute(attribute.to_string()));
        }
        let values: Vec<String> = values.into_iter().collect();
        let labels = by_user
            .into_iter()
            .map(|v| v.map(|v| values.iter().position(|x| *x == v).unwrap()))
            .collect();
        Ok(LabelSet {
            name: attribute.to_string(),
            values,
            labels,
            relation: relations.get(attribute).map(|_| attribute.to_string()),
        })
    }

    pub fn labelled_users(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&u| self.labels[u].is_some()).collect()
    }

    fn examples(&self, users: &[usize]) -> Vec<(usize, usize)> {
        users
            .iter()
            .map(|&u| (u, self.labels[u].expect("split covers labelled users")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub variant: String,
    pub task: String,
    /// Correct / total on the test split.
    pub accuracy: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Test examples per class, indexed like the head's labels.
    pub test_class_counts: Vec<usize>,
}

impl TaskResult {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{}\t{}\t{}",
            self.variant, self.task, self.accuracy, self.n_train, self.n_dev, self.n_test
        )
    }
}

pub const RESULTS_HEADER: &str = "variant\ttask\taccuracy\tn_train\tn_dev\tn_test";

/// Header plus one row per result, sorted by variant then task.
pub fn results_tsv(results: &[TaskResult]) -> String {
    let mut sorted: Vec<&TaskResult> = results.iter().collect();
    sorted.sort_by(|a, b| (&a.variant, &a.task).cmp(&(&b.variant, &b.task)));
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in sorted {
        let _ = writeln!(out, "{}", r.tsv_row());
    }
    out
}

fn variant_config(cfg: &TrainConfig, variant: &Variant) -> TrainConfig {
    TrainConfig {
        streams: variant.streams,
        ..cfg.clone()
    }
}

fn fingerprint(params: &ModelParams, corpus: &SocialCorpus) -> ModelFingerprint {
    ModelFingerprint {
        dim: params.dim(),
        users: table_fingerprint(&corpus.users),
    }
}

/// Everything an attribute task fixes before test labels are read.
#[derive(Clone, Debug)]
pub struct AttributeTaskModel {
    pub split: Split<usize>,
    /// The corpus embeddings were trained on.
    pub corpus: SocialCorpus,
    pub params: ModelParams,
    pub classifier: AttributeClassifier,
    pub selected_epoch: usize,
}

/// Trains embeddings and the dev-selected head for an attribute task.
/// Reads labels of train and dev users only.
pub fn fit_attribute_task(
    corpus: &SocialCorpus,
    labels: &LabelSet,
    variant: &Variant,
    train_cfg: &TrainConfig,
    head_cfg: &HeadConfig,
    split_spec: &SplitSpec,
) -> Result<AttributeTaskModel> {
    variant.validate()?;
    let split = split_users(&labels.labelled_users(), split_spec)?;
    let train_ex = labels.examples(&split.train);
    let classes: BTreeSet<usize> = train_ex.iter().map(|e| e.1).collect();
    if classes.len() < 2 {
        return Err(HarnessError::DegenerateLabels(classes.len()));
    }
    let mut training = corpus.clone();
    if let Some(rel) = labels.relation.as_deref().and_then(|r| corpus.relations.get(r)) {
        let held: HashSet<usize> = split.dev.iter().chain(&split.test).copied().collect();
        training
            .triples
            .retain(|t| !(t.relation == rel && held.contains(&t.user)));
    }
    let (params, _) = train(&training, &variant_config(train_cfg, variant))?;
    let fit = attr_train(
        &params,
        fingerprint(&params, corpus),
        &labels.name,
        labels.values.clone(),
        &train_ex,
        head_cfg,
        Some(&labels.examples(&split.dev)),
    )?;
    Ok(AttributeTaskModel {
        split,
        corpus: training,
        params,
        classifier: fit.classifier,
        selected_epoch: fit.selected_epoch,
    })
}

pub fn run_attribute_task(
    corpus: &SocialCorpus,
    labels: &LabelSet,
    variant: &Variant,
    train_cfg: &TrainConfig,
    head_cfg: &HeadConfig,
    split_spec: &SplitSpec,
) -> Result<TaskResult> {
    let model = fit_attribute_task(corpus, labels, variant, train_cfg, head_cfg, split_spec)?;
    let test = labels.examples(&model.split.test);
    let mut counts = vec![0; labels.values.len()];
    for &(_, l) in &test {
        counts[l] += 1;
    }
    Ok(TaskResult {
        variant: variant.name.clone(),
        task: labels.name.clone(),
        accuracy: model.classifier.accuracy(&model.params, &test)?,
        n_train: model.split.train.len(),
        n_dev: model.split.dev.len(),
        n_test: test.len(),
        test_class_counts: counts,
    })
}

/// Balanced `(a, b, label)` pairs: every edge as a positive and as many
/// uniformly drawn non-edges, drawn without reuse across calls via `used`.
fn balanced_pairs(
    edges: &[Edge],
    all_edges: &HashSet<Edge>,
    users: usize,
    used: &mut HashSet<Edge>,
    rng: &mut rng::Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out: Vec<(usize, usize, usize)> = edges.iter().map(|e| (e.a, e.b, 1)).collect();
    let budget = 1000 * edges.len().max(1) + 10_000;
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < edges.len() {
        attempts += 1;
        if attempts > budget {
            return Err(HarnessError::TooFewNonEdges(edges.len()));
        }
        let (x, y) = (rng::below(rng, users), rng::below(rng, users));
        let Some(e) = Edge::new(x, y) else { continue };
        if all_edges.contains(&e) || !used.insert(e) {
            continue;
        }
        out.push((e.a, e.b, 0));
        drawn += 1;
    }
    Ok(out)
}

/// Every edge as a positive pair plus as many uniformly drawn non-edges.
pub fn friend_pairs(corpus: &SocialCorpus, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let mut r = rng::seeded(seed);
    balanced_pairs(
        &corpus.edges,
        &corpus.edge_set(),
        corpus.users.len(),
        &mut HashSet::new(),
        &mut r,
    )
}

/// Friend-pair sets for the friend task.
#[derive(Clone, Debug)]
pub struct FriendSplit {
    /// Edges embeddings may see.
    pub train_edges: Vec<Edge>,
    pub pairs: Split<(usize, usize, usize)>,
}

/// Splits edges 80/10/10 (by `spec`) and pairs each part with an equal
/// number of non-edges, disjoint across parts.
pub fn friend_split(corpus: &SocialCorpus, spec: &SplitSpec) -> Result<FriendSplit> {
    let edges = split_items(&corpus.edges, spec, 1, "edges", 20)?;
    let all = corpus.edge_set();
    let mut used = HashSet::new();
    let mut r = rng::seeded(rng::derive_seed(spec.seed, 2));
    let n = corpus.users.len();
    let pairs = Split {
        train: balanced_pairs(&edges.train, &all, n, &mut used, &mut r)?,
        dev: balanced_pairs(&edges.dev, &all, n, &mut used, &mut r)?,
        test: balanced_pairs(&edges.test, &all, n, &mut used, &mut r)?,
    };
    Ok(FriendSplit {
        train_edges: edges.train,
        pairs,
    })
}

pub fn run_friend_task(
    corpus: &SocialCorpus,
    variant: &Variant,
    train_cfg: &TrainConfig,
    head_cfg: &HeadConfig,
    split_spec: &SplitSpec,
) -> Result<TaskResult> {
    variant.validate()?;
    let fs = friend_split(corpus, split_spec)?;
    let mut training = corpus.clone();
    training.edges = fs.train_edges;
    let (params, _) = train(&training, &variant_config(train_cfg, variant))?;
    let fit = rel_train(
        &params,
        fingerprint(&params, corpus),
        FRIEND_TASK,
        FRIEND_LABELS.iter().map(|s| s.to_string()).collect(),
        &fs.pairs.train,
        head_cfg,
        Some(&fs.pairs.dev),
    )?;
    let mut counts = vec![0; 2];
    for &(_, _, l) in &fs.pairs.test {
        counts[l] += 1;
    }
    Ok(TaskResult {
        variant: variant.name.clone(),
        task: FRIEND_TASK.to_string(),
        accuracy: fit.classifier.accuracy(&params, &fs.pairs.test)?,
        n_train: fs.pairs.train.len(),
        n_dev: fs.pairs.dev.len(),
        n_test: fs.pairs.test.len(),
        test_class_counts: counts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Attribute(LabelSet),
    Friend,
}

impl Task {
    pub fn name(&self) -> &str {
        match self {
            Task::Attribute(l) => &l.name,
            Task::Friend => FRIEND_TASK,
        }
    }
}

/// Runs every (variant × task) cell with the same base seeds, cells in
/// parallel, and returns results sorted by variant then task.
pub fn ablation_matrix(
    corpus: &SocialCorpus,
    tasks: &[Task],
    variants: &[Variant],
    train_cfg: &TrainConfig,
    head_cfg: &HeadConfig,
    split_spec: &SplitSpec,
) -> Result<Vec<TaskResult>> {
    if variants.is_empty() {
        return Err(HarnessError::NoVariants);
    }
    variants.iter().try_for_each(Variant::validate)?;
    let cells: Vec<(&Variant, &Task)> = variants
        .iter()
        .flat_map(|v| tasks.iter().map(move |t| (v, t)))
        .collect();
    let mut results = cells
        .par_iter()
        .map(|(v, t)| match t {
            Task::Attribute(labels) => run_attribute_task(corpus, labels, v, train_cfg, head_cfg, split_spec),
            Task::Friend => run_friend_task(corpus, v, train_cfg, head_cfg, split_spec),
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| (&a.variant, &a.task).cmp(&(&b.variant, &b.task)));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_users_split_eight_one_one() {
        let users: Vec<usize> = (0..10).collect();
        let s = split_users(&users, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, users);
        assert_eq!(s, split_users(&users, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn split_sizes_floor_with_remainder_to_train() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(200), (160, 20, 20));
        assert_eq!(spec.sizes(19), (17, 1, 1));
        assert_eq!(spec.sizes(30), (24, 3, 3));
    }

    #[test]
    fn split_rejections() {
        let users: Vec<usize> = (0..10).collect();
        let one = SplitSpec {
            train: 1.0,
            dev: 0.0,
            test: 0.0,
            seed: 1,
        };
        assert!(matches!(split_users(&users, &one), Err(HarnessError::InvalidSplit(_))));
        let off = SplitSpec {
            train: 0.8,
            dev: 0.3,
            ..SplitSpec::default()
        };
        assert!(split_users(&users, &off).is_err());
        assert!(matches!(
            split_users(&users[..9], &SplitSpec::default()),
            Err(HarnessError::TooFew { .. })
        ));
    }

    #[test]
    fn seeds_change_splits() {
        let users: Vec<usize> = (0..50).collect();
        let a = split_users(&users, &SplitSpec::default()).unwrap();
        let b = split_users(
            &users,
            &SplitSpec {
                seed: 2,
                ..SplitSpec::default()
            },
        )
        .unwrap();
        assert_ne!(a.test, b.test);
    }

    #[test]
    fn variants() {
        assert_eq!(
            Variant::named("OnlyNetwork").unwrap().streams,
            Streams {
                text: false,
                graph: true,
                relations: false
            }
        );
        assert!(Variant::named("Nope").is_err());
        assert!(Variant::new("none", false, false, false).validate().is_err());
    }

    #[test]
    fn results_sorted_tsv() {
        let r = |v: &str, t: &str| TaskResult {
            variant: v.into(),
            task: t.into(),
            accuracy: 0.5,
            n_train: 8,
            n_dev: 1,
            n_test: 1,
            test_class_counts: vec![1, 0],
        };
        let tsv = results_tsv(&[r("OnlyText", "friend"), r("All", "likes"), r("All", "friend")]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines[1], "All\tfriend\t0.500000\t8\t1\t1");
        assert_eq!(lines[2], "All\tlikes\t0.500000\t8\t1\t1");
        assert_eq!(lines[3], "OnlyText\tfriend\t0.500000\t8\t1\t1");
    }
}
