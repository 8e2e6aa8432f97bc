//! Corpus ingestion: id tables, vocabulary, documents, friendship edges and
//! attribute triples, plus the negative samplers and context windows the
//! trainer draws from.
//!
//! All three input files are UTF-8 TSV with LF line endings and no header:
//!
//! * documents: `<user_id>\t<space-separated tokens>`
//! * edges: `<user_a>\t<user_b>`
//! * triples: `<relation>\t<user_id>\t<entity>`
//!
//! Blank lines are ignored in every file.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("{file}:{line}: self-loop edge on user {user:?}")]
    SelfLoop { file: String, line: usize, user: String },
    #[error("empty vocabulary: no token reaches min_count {min_count}")]
    EmptyVocabulary { min_count: u64 },
    #[error("min_count must be positive")]
    InvalidMinCount,
    #[error("sampler needs at least one positive, finite weight")]
    NoPositiveWeight,
    #[error("sampler power must lie in (0, 1], got {0}")]
    InvalidPower(f64),
    #[error("exclusions cover the whole sampler support")]
    ExclusionCoversSupport,
    #[error("a corpus needs a documents file or an edges file")]
    NoEvidence,
}

impl CorpusError {
    fn malformed(file: &str, line: usize, message: impl Into<String>) -> Self {
        CorpusError::Malformed {
            file: file.to_string(),
            line,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CorpusError>;

/// Insertion-ordered string interner: the n-th distinct id gets index n.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdTable {
    ids: IndexSet<String>,
}

pub type UserTable = IdTable;
pub type EntityTable = IdTable;
pub type RelationTable = IdTable;

impl IdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = Self::new();
        for id in ids {
            table.intern(&id.into());
        }
        table
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.ids.get_index_of(id)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.ids[index]
    }

    /// Returns the index of `id`, appending it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        match self.ids.get_index_of(id) {
            Some(i) => i,
            None => self.ids.insert_full(id.to_string()).0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }
}

pub type TokenCounts = HashMap<String, u64>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: IdTable,
    freq: Vec<u64>,
    min_count: u64,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.tokens.get(token)
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens.name(index)
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn table(&self) -> &IdTable {
        &self.tokens
    }

    /// Maps raw tokens to indices, dropping out-of-vocabulary tokens.
    pub fn encode(&self, raw: &RawDocument) -> Document {
        Document {
            user: raw.user,
            tokens: raw.tokens.iter().filter_map(|t| self.get(t)).collect(),
        }
    }
}

/// Keeps tokens with `count >= min_count`, indexed by descending frequency
/// with lexicographic tie-breaking.
pub fn build_vocabulary(counts: &TokenCounts, min_count: u64) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(CorpusError::InvalidMinCount);
    }
    let mut kept: Vec<(&str, u64)> = counts
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(t, &c)| (t.as_str(), c))
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyVocabulary { min_count });
    }
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary {
        tokens: IdTable::from_ids(kept.iter().map(|(t, _)| *t)),
        freq: kept.iter().map(|(_, c)| *c).collect(),
        min_count,
    })
}

/// A documents-file record before vocabulary filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub user: usize,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DocumentIngest {
    pub records: Vec<RawDocument>,
    /// Records dropped because their token list was empty.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub user: usize,
    pub tokens: Vec<usize>,
}

/// Undirected friendship, stored with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
}

impl Edge {
    /// Canonical form of an unordered pair; `None` for self-loops.
    pub fn new(x: usize, y: usize) -> Option<Edge> {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => Some(Edge { a: x, b: y }),
            std::cmp::Ordering::Greater => Some(Edge { a: y, b: x }),
            std::cmp::Ordering::Equal => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub relation: usize,
    pub user: usize,
    pub entity: usize,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

/// Iterates non-blank lines with 1-based line numbers. Only the `\n`
/// terminator is stripped.
fn numbered_lines<'a, R: BufRead + 'a>(reader: R, file: &'a str) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader
        .split(b'\n')
        .enumerate()
        .map(move |(i, line)| {
            let bytes = line.map_err(|e| CorpusError::malformed(file, i + 1, format!("unreadable line: {e}")))?;
            String::from_utf8(bytes)
                .map(|l| (i + 1, l))
                .map_err(|_| CorpusError::malformed(file, i + 1, "invalid UTF-8"))
        })
        .filter(|r| !matches!(r, Ok((_, l)) if l.is_empty()))
}

pub fn read_documents<R: BufRead>(
    reader: R,
    file: &str,
    users: &mut UserTable,
    counts: &mut TokenCounts,
) -> Result<DocumentIngest> {
    let mut ingest = DocumentIngest::default();
    for item in numbered_lines(reader, file) {
        let (line_no, line) = item?;
        let (user, text) = line
            .split_once('\t')
            .ok_or_else(|| CorpusError::malformed(file, line_no, "expected <user_id>\\t<tokens>"))?;
        if user.is_empty() {
            return Err(CorpusError::malformed(file, line_no, "empty user id"));
        }
        let tokens: Vec<String> = text.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
        if tokens.is_empty() {
            ingest.skipped += 1;
            continue;
        }
        for t in &tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        ingest.records.push(RawDocument {
            user: users.intern(user),
            tokens,
        });
    }
    Ok(ingest)
}

pub fn ingest_documents(path: &Path, users: &mut UserTable, counts: &mut TokenCounts) -> Result<DocumentIngest> {
    read_documents(open(path)?, &file_label(path), users, counts)
}

/// Parses edges, canonicalizing each pair and dropping repeats. The result
/// keeps first-appearance order.
pub fn read_edges<R: BufRead>(reader: R, file: &str, users: &mut UserTable) -> Result<Vec<Edge>> {
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for item in numbered_lines(reader, file) {
        let (line_no, line) = item?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(CorpusError::malformed(
                file,
                line_no,
                format!("expected <user_a>\\t<user_b>, found {} field(s)", fields.len()),
            ));
        }
        if fields[0] == fields[1] {
            return Err(CorpusError::SelfLoop {
                file: file.to_string(),
                line: line_no,
                user: fields[0].to_string(),
            });
        }
        let a = users.intern(fields[0]);
        let b = users.intern(fields[1]);
        let edge = Edge::new(a, b).expect("distinct ids intern to distinct indices");
        if seen.insert(edge) {
            edges.push(edge);
        }
    }
    Ok(edges)
}

pub fn ingest_edges(path: &Path, users: &mut UserTable) -> Result<Vec<Edge>> {
    read_edges(open(path)?, &file_label(path), users)
}

pub fn read_triples<R: BufRead>(
    reader: R,
    file: &str,
    relations: &mut RelationTable,
    users: &mut UserTable,
    entities: &mut EntityTable,
) -> Result<Vec<Triple>> {
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for item in numbered_lines(reader, file) {
        let (line_no, line) = item?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(CorpusError::malformed(
                file,
                line_no,
                format!(
                    "expected <relation>\\t<user_id>\\t<entity>, found {} field(s)",
                    fields.len()
                ),
            ));
        }
        let triple = Triple {
            relation: relations.intern(fields[0]),
            user: users.intern(fields[1]),
            entity: entities.intern(fields[2]),
        };
        if seen.insert(triple) {
            triples.push(triple);
        }
    }
    Ok(triples)
}

pub fn ingest_triples(
    path: &Path,
    relations: &mut RelationTable,
    users: &mut UserTable,
    entities: &mut EntityTable,
) -> Result<Vec<Triple>> {
    read_triples(open(path)?, &file_label(path), relations, users, entities)
}

/// Locations of the (up to) three corpus files.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusFiles {
    pub documents: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub triples: Option<PathBuf>,
}

pub const DOCUMENTS_FILE: &str = "documents.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";

impl CorpusFiles {
    /// Picks up `documents.tsv`, `edges.tsv` and `triples.tsv` from `dir`,
    /// whichever exist.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |name: &str| {
            let p = dir.join(name);
            p.is_file().then_some(p)
        };
        CorpusFiles {
            documents: pick(DOCUMENTS_FILE),
            edges: pick(EDGES_FILE),
            triples: pick(TRIPLES_FILE),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocialCorpus {
    pub users: UserTable,
    pub vocab: Vocabulary,
    pub entities: EntityTable,
    pub relations: RelationTable,
    pub documents: Vec<Document>,
    pub edges: Vec<Edge>,
    pub triples: Vec<Triple>,
    /// Document records skipped at ingest for having no tokens.
    pub skipped_documents: usize,
}

/// In-memory sources for [`SocialCorpus::from_readers`]. `None` means the
/// stream is absent.
pub struct CorpusSources<D, E, T> {
    pub documents: Option<(D, String)>,
    pub edges: Option<(E, String)>,
    pub triples: Option<(T, String)>,
}

impl SocialCorpus {
    pub fn load(files: &CorpusFiles, min_count: u64) -> Result<Self> {
        Self::load_with_users(files, min_count, UserTable::new())
    }

    /// Like [`SocialCorpus::load`], with a pre-seeded user table so that
    /// known users keep fixed indices.
    pub fn load_with_users(files: &CorpusFiles, min_count: u64, users: UserTable) -> Result<Self> {
        let label = |p: &Option<PathBuf>| p.as_deref().map(file_label).unwrap_or_default();
        let documents = files.documents.as_deref().map(open).transpose()?;
        let edges = files.edges.as_deref().map(open).transpose()?;
        let triples = files.triples.as_deref().map(open).transpose()?;
        Self::from_readers(
            CorpusSources {
                documents: documents.map(|r| (r, label(&files.documents))),
                edges: edges.map(|r| (r, label(&files.edges))),
                triples: triples.map(|r| (r, label(&files.triples))),
            },
            min_count,
            users,
        )
    }

    pub fn from_readers<D: BufRead, E: BufRead, T: BufRead>(
        sources: CorpusSources<D, E, T>,
        min_count: u64,
        mut users: UserTable,
    ) -> Result<Self> {
        if sources.documents.is_none() && sources.edges.is_none() {
            return Err(CorpusError::NoEvidence);
        }
        let mut counts = TokenCounts::new();
        let ingest = match sources.documents {
            Some((r, name)) => read_documents(r, &name, &mut users, &mut counts)?,
            None => DocumentIngest::default(),
        };
        let vocab = if counts.is_empty() {
            Vocabulary {
                tokens: IdTable::new(),
                freq: Vec::new(),
                min_count,
            }
        } else {
            build_vocabulary(&counts, min_count)?
        };
        let documents = ingest.records.iter().map(|r| vocab.encode(r)).collect();
        let edges = match sources.edges {
            Some((r, name)) => read_edges(r, &name, &mut users)?,
            None => Vec::new(),
        };
        let mut relations = RelationTable::new();
        let mut entities = EntityTable::new();
        let triples = match sources.triples {
            Some((r, name)) => read_triples(r, &name, &mut relations, &mut users, &mut entities)?,
            None => Vec::new(),
        };
        Ok(SocialCorpus {
            users,
            vocab,
            entities,
            relations,
            documents,
            edges,
            triples,
            skipped_documents: ingest.skipped,
        })
    }

    /// Number of text training positions: tokens whose context is nonempty.
    pub fn text_positions(&self) -> usize {
        self.documents
            .iter()
            .filter(|d| d.tokens.len() >= 2)
            .map(|d| d.tokens.len())
            .sum()
    }

    /// Deterministic text rendering of every table and record.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "USERS {}", self.users.len());
        for (i, u) in self.users.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{u}");
        }
        let _ = writeln!(out, "VOCAB {} min_count={}", self.vocab.len(), self.vocab.min_count);
        for i in 0..self.vocab.len() {
            let _ = writeln!(out, "{i}\t{}\t{}", self.vocab.token(i), self.vocab.freq[i]);
        }
        let _ = writeln!(out, "ENTITIES {}", self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{e}");
        }
        let _ = writeln!(out, "RELATIONS {}", self.relations.len());
        for (i, r) in self.relations.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{r}");
        }
        let _ = writeln!(out, "DOCUMENTS {}", self.documents.len());
        for d in &self.documents {
            let toks: Vec<String> = d.tokens.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}\t{}", d.user, toks.join(" "));
        }
        let _ = writeln!(out, "EDGES {}", self.edges.len());
        for e in &self.edges {
            let _ = writeln!(out, "{}\t{}", e.a, e.b);
        }
        let _ = writeln!(out, "TRIPLES {}", self.triples.len());
        for t in &self.triples {
            let _ = writeln!(out, "{}\t{}\t{}", t.relation, t.user, t.entity);
        }
        out
    }

    /// Adjacency as a set of canonical edges, for membership tests.
    pub fn edge_set(&self) -> HashSet<Edge> {
        self.edges.iter().copied().collect()
    }

    /// Users that appear in at least one edge, sorted.
    pub fn connected_users(&self) -> BTreeSet<usize> {
        self.edges.iter().flat_map(|e| [e.a, e.b]).collect()
    }
}

/// Cumulative-weight table for drawing indices in proportion to
/// `weight^power`.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSampler {
    cumulative: Vec<f64>,
    support: usize,
    power: f64,
}

pub fn build_sampler(weights: &[f64], power: f64) -> Result<NegativeSampler> {
    if !(power > 0.0 && power <= 1.0) {
        return Err(CorpusError::InvalidPower(power));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CorpusError::NoPositiveWeight);
    }
    let mut total = 0.0;
    let mut support = 0;
    let cumulative: Vec<f64> = weights
        .iter()
        .map(|&w| {
            if w > 0.0 {
                support += 1;
                total += w.powf(power);
            }
            total
        })
        .collect();
    if support == 0 {
        return Err(CorpusError::NoPositiveWeight);
    }
    Ok(NegativeSampler {
        cumulative,
        support,
        power,
    })
}

impl NegativeSampler {
    /// Uniform distribution over `0..n`.
    pub fn uniform(n: usize) -> Result<Self> {
        build_sampler(&vec![1.0; n], 1.0)
    }

    /// Unigram distribution raised to `power`.
    pub fn unigram(freq: &[u64], power: f64) -> Result<Self> {
        let w: Vec<f64> = freq.iter().map(|&f| f as f64).collect();
        build_sampler(&w, power)
    }

    /// Size of the index range.
    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    /// Number of indices with positive weight.
    pub fn support(&self) -> usize {
        self.support
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().expect("sampler is never empty")
    }

    fn weight(&self, index: usize) -> f64 {
        let prev = if index == 0 { 0.0 } else { self.cumulative[index - 1] };
        self.cumulative[index] - prev
    }

    /// Analytic probability of drawing `index`.
    pub fn probability(&self, index: usize) -> f64 {
        self.weight(index) / self.total()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let target = rng::unit(rng) * self.total();
        let i = self.cumulative.partition_point(|&c| c <= target);
        if i < self.cumulative.len() {
            i
        } else {
            // target rounded up to the total: take the last supported index.
            (0..self.cumulative.len())
                .rev()
                .find(|&j| self.weight(j) > 0.0)
                .expect("sampler has positive support")
        }
    }
}

/// Draws from `sampler` by rejection until the index is not in `exclude`.
pub fn sample_negative(sampler: &NegativeSampler, rng: &mut Rng, exclude: &[usize]) -> Result<usize> {
    if !exclude.is_empty() {
        let mut blocked: Vec<usize> = exclude
            .iter()
            .copied()
            .filter(|&i| i < sampler.len() && sampler.weight(i) > 0.0)
            .collect();
        blocked.sort_unstable();
        blocked.dedup();
        if blocked.len() >= sampler.support {
            return Err(CorpusError::ExclusionCoversSupport);
        }
    }
    loop {
        let i = sampler.sample(rng);
        if !exclude.contains(&i) {
            return Ok(i);
        }
    }
}

/// Up to `window` tokens on each side of `position`, excluding the center.
pub fn context_window(tokens: &[usize], position: usize, window: usize) -> Vec<usize> {
    debug_assert!(position < tokens.len());
    let lo = position.saturating_sub(window);
    let hi = (position + window + 1).min(tokens.len());
    tokens[lo..position]
        .iter()
        .chain(&tokens[position + 1..hi])
        .copied()
        .collect()
}
