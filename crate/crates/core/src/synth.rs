//! Planted-structure social corpora with known ground truth.
//!
//! Users are split into contiguous, evenly sized communities. Each unordered
//! pair is a friend with probability `p_in` inside a community and `p_out`
//! across. Every user writes one document whose tokens come from a mixture
//! putting `topic_skew` on the community's vocabulary block and spreading
//! the rest uniformly over the other blocks. Each planted attribute maps a
//! community to an entity, then flips to a uniformly random other label with
//! probability `noise`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{CorpusError, CorpusSources, SocialCorpus, UserTable, DOCUMENTS_FILE, EDGES_FILE, TRIPLES_FILE};
use crate::rng;

pub const TRUTH_FILE: &str = "truth.tsv";
/// Pseudo-attribute naming the planted community in predicates.
pub const COMMUNITY: &str = "community";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("{users} users cannot fill {communities} communities with at least two members each")]
    TooFewUsers { users: usize, communities: usize },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("no user satisfies the condition list")]
    NoSupport,
    #[error("malformed truth file line {line}: {message}")]
    Truth { line: usize, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

type Result<T> = std::result::Result<T, SynthError>;

/// One planted attribute: community `c` carries `values[c]` before noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    pub noise: f64,
}

impl AttributeSpec {
    /// `<prefix>0 … <prefix>{n−1}` as values.
    pub fn numbered(name: &str, prefix: &str, communities: usize, noise: f64) -> Self {
        AttributeSpec {
            name: name.to_string(),
            values: (0..communities).map(|c| format!("{prefix}{c}")).collect(),
            noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub vocab_size: usize,
    pub tokens_per_user: usize,
    pub topic_skew: f64,
    pub attributes: Vec<AttributeSpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_communities: 2,
            p_in: 0.1,
            p_out: 0.01,
            vocab_size: 1000,
            tokens_per_user: 200,
            topic_skew: 0.8,
            attributes: default_attributes(2, 0.1),
            seed: 1,
        }
    }
}

/// A noiseless community marker `member` plus `likes`, planted on the same
/// communities with `noise`.
pub fn default_attributes(communities: usize, noise: f64) -> Vec<AttributeSpec> {
    vec![
        AttributeSpec::numbered("member", "c", communities, 0.0),
        AttributeSpec::numbered("likes", "item", communities, noise),
    ]
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.contains(|c: char| c.is_whitespace() || c == '=' || c == ',')
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_communities < 2 {
            return bad("n_communities must be at least 2".into());
        }
        if self.n_users < 2 * self.n_communities {
            return Err(SynthError::TooFewUsers {
                users: self.n_users,
                communities: self.n_communities,
            });
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return bad(format!(
                "need 0 ≤ p_out ≤ p_in ≤ 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        let floor = 1.0 / self.n_communities as f64;
        if !(self.topic_skew >= floor - 1e-12 && self.topic_skew <= 1.0) {
            return bad(format!("topic_skew must lie in [{floor}, 1], got {}", self.topic_skew));
        }
        if self.tokens_per_user > 0 && self.vocab_size < self.n_communities {
            return bad("vocab_size must be at least n_communities".into());
        }
        let mut seen = Vec::new();
        for a in &self.attributes {
            if !valid_name(&a.name) || a.name == COMMUNITY || seen.contains(&&a.name) {
                return bad(format!("bad or duplicate attribute name {:?}", a.name));
            }
            seen.push(&a.name);
            if a.values.len() != self.n_communities || !a.values.iter().all(|v| valid_name(v)) {
                return bad(format!("attribute {:?} needs one distinct value per community", a.name));
            }
            let mut v = a.values.clone();
            v.sort();
            v.dedup();
            if v.len() != a.values.len() {
                return bad(format!("attribute {:?} repeats a value", a.name));
            }
            if !(0.0..0.5).contains(&a.noise) {
                return bad(format!("attribute {:?} noise must lie in [0, 0.5)", a.name));
            }
        }
        Ok(())
    }
}

/// Planted labels for one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedAttribute {
    pub name: String,
    pub values: Vec<String>,
    /// Label index per user (into `values`).
    pub labels: Vec<usize>,
}

/// Rendered TSV contents, byte-identical to what [`SynthDataset::write`]
/// puts on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFiles {
    pub documents: String,
    pub edges: String,
    pub triples: String,
    pub truth: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub corpus: SocialCorpus,
    /// Planted community per user, indexed like `corpus.users`.
    pub communities: Vec<usize>,
    pub attributes: Vec<PlantedAttribute>,
    pub files: SynthFiles,
}

fn user_name(i: usize, n: usize) -> String {
    let width = (n.max(2) - 1).to_string().len().max(3);
    format!("u{i:0width$}")
}

fn token_name(i: usize, n: usize) -> String {
    let width = (n.max(2) - 1).to_string().len().max(3);
    format!("w{i:0width$}")
}

/// Block `b` of `0..n` when split into `parts` near-equal contiguous pieces.
fn block_range(n: usize, parts: usize, b: usize) -> std::ops::Range<usize> {
    (b * n / parts)..((b + 1) * n / parts)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let n = cfg.n_users;
    let k = cfg.n_communities;
    let names: Vec<String> = (0..n).map(|i| user_name(i, n)).collect();
    let communities: Vec<usize> = (0..n).map(|i| i * k / n).collect();

    let mut edges = String::new();
    let mut grng = rng::seeded(rng::derive_seed(cfg.seed, 0));
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if communities[i] == communities[j] {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng::bernoulli(&mut grng, p) {
                let _ = writeln!(edges, "{}\t{}", names[i], names[j]);
            }
        }
    }

    let mut documents = String::new();
    if cfg.tokens_per_user > 0 {
        let mut trng = rng::seeded(rng::derive_seed(cfg.seed, 1));
        let blocks: Vec<_> = (0..k).map(|b| block_range(cfg.vocab_size, k, b)).collect();
        for (i, name) in names.iter().enumerate() {
            let own = &blocks[communities[i]];
            let others = cfg.vocab_size - own.len();
            let mut toks = Vec::with_capacity(cfg.tokens_per_user);
            for _ in 0..cfg.tokens_per_user {
                let t = if others == 0 || rng::bernoulli(&mut trng, cfg.topic_skew) {
                    own.start + rng::below(&mut trng, own.len())
                } else {
                    // uniform over the tokens outside the own block
                    let r = rng::below(&mut trng, others);
                    if r < own.start {
                        r
                    } else {
                        r + own.len()
                    }
                };
                toks.push(token_name(t, cfg.vocab_size));
            }
            let _ = writeln!(documents, "{name}\t{}", toks.join(" "));
        }
    }

    let mut arng = rng::seeded(rng::derive_seed(cfg.seed, 2));
    let mut attributes = Vec::with_capacity(cfg.attributes.len());
    for spec in &cfg.attributes {
        let labels = communities
            .iter()
            .map(|&c| {
                if rng::bernoulli(&mut arng, spec.noise) {
                    let r = rng::below(&mut arng, k - 1);
                    if r < c {
                        r
                    } else {
                        r + 1
                    }
                } else {
                    c
                }
            })
            .collect();
        attributes.push(PlantedAttribute {
            name: spec.name.clone(),
            values: spec.values.clone(),
            labels,
        });
    }
    let mut triples = String::new();
    for a in &attributes {
        for (i, &l) in a.labels.iter().enumerate() {
            let _ = writeln!(triples, "{}\t{}\t{}", a.name, names[i], a.values[l]);
        }
    }
    let mut truth = String::new();
    for i in 0..n {
        let attrs: Vec<String> = attributes
            .iter()
            .map(|a| format!("{}={}", a.name, a.values[a.labels[i]]))
            .collect();
        let _ = writeln!(truth, "{}\t{}\t{}", names[i], communities[i], attrs.join(","));
    }

    let corpus = SocialCorpus::from_readers(
        CorpusSources {
            documents: Some((Cursor::new(documents.as_bytes()), DOCUMENTS_FILE.to_string())),
            edges: Some((Cursor::new(edges.as_bytes()), EDGES_FILE.to_string())),
            triples: Some((Cursor::new(triples.as_bytes()), TRIPLES_FILE.to_string())),
        },
        1,
        UserTable::from_ids(&names),
    )?;
    Ok(SynthDataset {
        corpus,
        communities,
        attributes,
        files: SynthFiles {
            documents,
            edges,
            triples,
            truth,
        },
    })
}

impl SynthDataset {
    /// Writes the three corpus files and `truth.tsv` into `dir`, creating it
    /// if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, body) in [
            (DOCUMENTS_FILE, &self.files.documents),
            (EDGES_FILE, &self.files.edges),
            (TRIPLES_FILE, &self.files.triples),
            (TRUTH_FILE, &self.files.truth),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(&p))?;
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&PlantedAttribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn truth(&self) -> Truth {
        Truth::parse(&self.files.truth).expect("generated truth is well formed")
    }
}

/// `attribute = value`; `attribute` may be [`COMMUNITY`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predicate {
    pub attribute: String,
    pub value: String,
}

impl Predicate {
    pub fn new(attribute: &str, value: &str) -> Self {
        Predicate {
            attribute: attribute.to_string(),
            value: value.to_string(),
        }
    }
}

/// Parsed `truth.tsv`: per-user community and attribute values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Truth {
    pub users: Vec<String>,
    pub communities: Vec<usize>,
    pub attributes: Vec<BTreeMap<String, String>>,
}

impl Truth {
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Truth::default();
        for (i, line) in text.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| SynthError::Truth {
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [user, community, attrs] = fields.as_slice() else {
                return Err(err("expected <user_id>\\t<community>\\t<attr=value,...>"));
            };
            if user.is_empty() {
                return Err(err("empty user id"));
            }
            let community = community.parse().map_err(|_| err("community is not an integer"))?;
            let mut map = BTreeMap::new();
            for pair in attrs.split(',').filter(|p| !p.is_empty()) {
                let (k, v) = pair.split_once('=').ok_or_else(|| err("expected attr=value"))?;
                map.insert(k.to_string(), v.to_string());
            }
            t.users.push(user.to_string());
            t.communities.push(community);
            t.attributes.push(map);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Value of `attribute` for user row `i`; communities render as their
    /// index.
    pub fn value(&self, i: usize, attribute: &str) -> Option<String> {
        if attribute == COMMUNITY {
            Some(self.communities[i].to_string())
        } else {
            self.attributes[i].get(attribute).cloned()
        }
    }

    fn known(&self, attribute: &str) -> bool {
        attribute == COMMUNITY || self.attributes.iter().any(|m| m.contains_key(attribute))
    }

    fn holds(&self, i: usize, preds: &[Predicate]) -> bool {
        preds
            .iter()
            .all(|p| self.value(i, &p.attribute).as_deref() == Some(p.value.as_str()))
    }

    /// `count(A ∧ B) / count(A)` by direct counting over users.
    pub fn empirical_conditional(&self, given: &[Predicate], target: &[Predicate]) -> Result<f64> {
        for p in given.iter().chain(target) {
            if !self.known(&p.attribute) {
                return Err(SynthError::UnknownAttribute(p.attribute.clone()));
            }
        }
        let support: Vec<usize> = (0..self.len()).filter(|&i| self.holds(i, given)).collect();
        if support.is_empty() {
            return Err(SynthError::NoSupport);
        }
        let both = support.iter().filter(|&&i| self.holds(i, target)).count();
        Ok(both as f64 / support.len() as f64)
    }
}

/// [`Truth::empirical_conditional`] over a generated dataset.
pub fn empirical_conditional(dataset: &SynthDataset, given: &[Predicate], target: &[Predicate]) -> Result<f64> {
    dataset.truth().empirical_conditional(given, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cliques(per: usize) -> SynthConfig {
        SynthConfig {
            n_users: 2 * per,
            p_in: 1.0,
            p_out: 0.0,
            vocab_size: 20,
            tokens_per_user: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn two_five_cliques() {
        let d = generate(&cliques(5)).unwrap();
        assert_eq!(d.corpus.edges.len(), 20);
        for e in &d.corpus.edges {
            assert_eq!(d.communities[e.a], d.communities[e.b]);
        }
    }

    #[test]
    fn noiseless_attribute_equals_community() {
        let cfg = SynthConfig {
            attributes: default_attributes(2, 0.0),
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        for a in &d.attributes {
            assert_eq!(a.labels, d.communities);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.files, b.files);
        assert_eq!(a.corpus.dump(), b.corpus.dump());
        let c = generate(&SynthConfig {
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.files.edges, c.files.edges);
    }

    #[test]
    fn corpus_matches_truth() {
        let d = generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.corpus.users.len(), 200);
        assert_eq!(d.corpus.documents.len(), 200);
        assert!(d.corpus.documents.iter().all(|doc| doc.tokens.len() == 200));
        assert_eq!(d.corpus.triples.len(), 400);
        let member = d.corpus.relations.get("member").unwrap();
        for t in d.corpus.triples.iter().filter(|t| t.relation == member) {
            let v = d.corpus.entities.name(t.entity);
            assert_eq!(v, format!("c{}", d.communities[t.user]));
        }
        let truth = d.truth();
        assert_eq!(truth.users[0], d.corpus.users.name(0));
        assert_eq!(truth.value(150, COMMUNITY).unwrap(), "1");
    }

    #[test]
    fn communities_are_even() {
        let d = generate(&SynthConfig {
            n_users: 9,
            n_communities: 3,
            attributes: default_attributes(3, 0.1),
            vocab_size: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(d.communities, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SynthConfig {
                n_users: 3,
                ..SynthConfig::default()
            },
            SynthConfig {
                p_out: 0.5,
                p_in: 0.1,
                ..SynthConfig::default()
            },
            SynthConfig {
                topic_skew: 0.4,
                ..SynthConfig::default()
            },
            SynthConfig {
                attributes: default_attributes(2, 0.5),
                ..SynthConfig::default()
            },
            SynthConfig {
                attributes: default_attributes(3, 0.1),
                ..SynthConfig::default()
            },
        ];
        assert!(matches!(generate(&bad[0]), Err(SynthError::TooFewUsers { .. })));
        for c in &bad[1..] {
            assert!(matches!(generate(c), Err(SynthError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn conditional_trivia() {
        let d = generate(&SynthConfig::default()).unwrap();
        let a = [Predicate::new("member", "c0")];
        assert_eq!(empirical_conditional(&d, &a, &a).unwrap(), 1.0);
        let contra = [Predicate::new("member", "c1")];
        assert_eq!(empirical_conditional(&d, &a, &contra).unwrap(), 0.0);
        assert!(matches!(
            empirical_conditional(&d, &[Predicate::new("member", "nobody")], &a),
            Err(SynthError::NoSupport)
        ));
        assert!(matches!(
            empirical_conditional(&d, &[Predicate::new("height", "x")], &a),
            Err(SynthError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn planted_conditional_near_noise_rate() {
        let d = generate(&SynthConfig {
            n_users: 1000,
            p_in: 0.0,
            p_out: 0.0,
            tokens_per_user: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        for c in 0..2 {
            let f = empirical_conditional(
                &d,
                &[Predicate::new("member", &format!("c{c}"))],
                &[Predicate::new("likes", &format!("item{c}"))],
            )
            .unwrap();
            assert!((f - 0.9).abs() <= 0.05, "{f}");
        }
    }

    #[test]
    fn equal_densities_when_p_in_equals_p_out() {
        // 3σ band on the difference of intra and inter densities pooled
        // over 50 seeds
        let (mut intra, mut inter, mut n_intra, mut n_inter) = (0usize, 0usize, 0usize, 0usize);
        for seed in 0..50 {
            let cfg = SynthConfig {
                n_users: 40,
                p_in: 0.2,
                p_out: 0.2,
                tokens_per_user: 0,
                attributes: Vec::new(),
                seed,
                ..SynthConfig::default()
            };
            let d = generate(&cfg).unwrap();
            for e in &d.corpus.edges {
                if d.communities[e.a] == d.communities[e.b] {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
            n_intra += 2 * 20 * 19 / 2;
            n_inter += 20 * 20;
        }
        let (pi, po) = (intra as f64 / n_intra as f64, inter as f64 / n_inter as f64);
        let p = 0.2;
        let sigma = (p * (1.0 - p) * (1.0 / n_intra as f64 + 1.0 / n_inter as f64)).sqrt();
        assert!((pi - po).abs() <= 3.0 * sigma, "{pi} {po} {sigma}");
    }

    #[test]
    fn nearest_centroid_recovers_communities() {
        // learnability bound: classify users by nearest community centroid
        // of raw token-count vectors (centroids from the planted labels)
        let d = generate(&SynthConfig::default()).unwrap();
        let v = d.corpus.vocab.len();
        let counts: Vec<Vec<f64>> = d
            .corpus
            .documents
            .iter()
            .map(|doc| {
                let mut c = vec![0.0; v];
                for &t in &doc.tokens {
                    c[t] += 1.0;
                }
                c
            })
            .collect();
        let mut centroids = vec![vec![0.0; v]; 2];
        let mut sizes = [0.0; 2];
        for (doc, c) in d.corpus.documents.iter().zip(&counts) {
            let k = d.communities[doc.user];
            sizes[k] += 1.0;
            for (a, b) in centroids[k].iter_mut().zip(c) {
                *a += b;
            }
        }
        for (cen, s) in centroids.iter_mut().zip(sizes) {
            cen.iter_mut().for_each(|x| *x /= s);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = d
            .corpus
            .documents
            .iter()
            .zip(&counts)
            .filter(|(doc, c)| {
                let guess = if dist(c, &centroids[0]) <= dist(c, &centroids[1]) {
                    0
                } else {
                    1
                };
                guess == d.communities[doc.user]
            })
            .count();
        assert!(correct as f64 / 200.0 > 0.9);
    }

    #[test]
    fn truth_roundtrip_and_errors() {
        let d = generate(&cliques(5)).unwrap();
        let t = Truth::parse(&d.files.truth).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.value(0, "likes").as_deref(), Some("item0"));
        assert!(matches!(
            Truth::parse("u1\tx\ta=b\n"),
            Err(SynthError::Truth { line: 1, .. })
        ));
        assert!(matches!(Truth::parse("u1\t0\n"), Err(SynthError::Truth { .. })));
    }

    #[test]
    fn write_creates_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&cliques(5)).unwrap();
        d.write(dir.path()).unwrap();
        for f in [DOCUMENTS_FILE, EDGES_FILE, TRIPLES_FILE, TRUTH_FILE] {
            assert_eq!(
                fs::read_to_string(dir.path().join(f)).unwrap().len(),
                match f {
                    DOCUMENTS_FILE => d.files.documents.len(),
                    EDGES_FILE => d.files.edges.len(),
                    TRIPLES_FILE => d.files.triples.len(),
                    _ => d.files.truth.len(),
                }
            );
        }
    }
}
