//! Learnable tensors, their initialization and the text model file.
//!
//! Model file layout (UTF-8, LF):
//!
//! ```text
//! SOCIALVEC 1
//! K <dim>
//! USERS <n>
//! <user-id> <v1> ... <vK>
//! WORDS_IN <n>
//! ...
//! WORDS_OUT <n>      # 0 when the word table is shared
//! ENTITIES <n>
//! RELATIONS <n>
//! <relation> <K*K values, row-major>
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{IdTable, SocialCorpus};
use crate::rng;
use crate::tensor::Matrix;

pub const MODEL_MAGIC: &str = "SOCIALVEC";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("embedding width K must be at least 1")]
    ZeroDim,
    #[error("initialization half-range must be positive and finite, got {0}")]
    InvalidHalfRange(f64),
    #[error("relation noise must be nonnegative and finite, got {0}")]
    InvalidNoise(f64),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (expected header `{expected}`)")]
    BadHeader { expected: String },
    #[error("unsupported model file version {found} (this build reads version {supported})")]
    VersionMismatch { found: String, supported: u32 },
    #[error("model file is truncated in section {section}")]
    Truncated { section: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("tensor {0} holds a non-finite value")]
    NonFinite(&'static str),
    #[error("id {0:?} cannot be written: ids must be nonempty and free of whitespace")]
    InvalidId(String),
    #[error("section {section} has {rows} rows but its table has {table} ids")]
    TableMismatch {
        section: &'static str,
        rows: usize,
        table: usize,
    },
}

type FileResult<T> = std::result::Result<T, ModelFileError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    User,
    WordIn,
    WordOut,
    Entity,
    Relation,
}

impl TensorId {
    pub fn is_word(self) -> bool {
        matches!(self, TensorId::WordIn | TensorId::WordOut)
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorId::User => "users",
            TensorId::WordIn => "words_in",
            TensorId::WordOut => "words_out",
            TensorId::Entity => "entities",
            TensorId::Relation => "relations",
        }
    }
}

/// Read access to parameter rows. Relation rows are `K*K` row-major matrices.
pub trait ParamSource {
    fn dim(&self) -> usize;
    fn row(&self, tensor: TensorId, index: usize) -> Cow<'_, [f64]>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelSizes {
    pub users: usize,
    pub words: usize,
    pub entities: usize,
    pub relations: usize,
}

impl ModelSizes {
    pub fn of(corpus: &SocialCorpus) -> Self {
        ModelSizes {
            users: corpus.users.len(),
            words: corpus.vocab.len(),
            entities: corpus.entities.len(),
            relations: corpus.relations.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dim: usize,
    users: Matrix,
    words_in: Matrix,
    words_out: Matrix,
    entities: Matrix,
    relations: Matrix,
    shared_word_table: bool,
    words_frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub seed: u64,
    /// Half-range of the uniform vector init; `None` means `0.5 / K`.
    pub vector_half_range: Option<f64>,
    /// Half-range of the noise added to identity relation matrices; `None`
    /// means `0.1 / K`.
    pub relation_noise: Option<f64>,
    /// Use one word table for both the context and target sides.
    pub shared_word_table: bool,
}

impl InitConfig {
    pub fn seeded(seed: u64) -> Self {
        InitConfig {
            seed,
            vector_half_range: None,
            relation_noise: None,
            shared_word_table: false,
        }
    }
}

pub fn init_params(sizes: ModelSizes, dim: usize, init: &InitConfig) -> Result<ModelParams, ParamsError> {
    if dim == 0 {
        return Err(ParamsError::ZeroDim);
    }
    let half = init.vector_half_range.unwrap_or(0.5 / dim as f64);
    if !(half > 0.0 && half.is_finite()) {
        return Err(ParamsError::InvalidHalfRange(half));
    }
    let noise = init.relation_noise.unwrap_or(0.1 / dim as f64);
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(ParamsError::InvalidNoise(noise));
    }
    let mut rng = rng::seeded(init.seed);
    let mut vectors = |rows: usize| Matrix::from_fn(rows, dim, |_, _| rng::uniform(&mut rng, -half, half));
    let users = vectors(sizes.users);
    let words_in = vectors(sizes.words);
    let words_out = if init.shared_word_table {
        Matrix::zeros(0, dim)
    } else {
        vectors(sizes.words)
    };
    let entities = vectors(sizes.entities);
    let relations = Matrix::from_fn(sizes.relations, dim * dim, |_, c| {
        let diag = if c / dim == c % dim { 1.0 } else { 0.0 };
        if noise == 0.0 {
            diag
        } else {
            diag + rng::uniform(&mut rng, -noise, noise)
        }
    });
    Ok(ModelParams {
        dim,
        users,
        words_in,
        words_out,
        entities,
        relations,
        shared_word_table: init.shared_word_table,
        words_frozen: false,
    })
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> ModelSizes {
        ModelSizes {
            users: self.users.rows(),
            words: self.words_in.rows(),
            entities: self.entities.rows(),
            relations: self.relations.rows(),
        }
    }

    pub fn shared_word_table(&self) -> bool {
        self.shared_word_table
    }

    pub fn words_frozen(&self) -> bool {
        self.words_frozen
    }

    pub fn set_words_frozen(&mut self, frozen: bool) {
        self.words_frozen = frozen;
    }

    /// The matrix backing `tensor`. With a shared word table, `WordOut`
    /// resolves to the input table.
    pub fn tensor(&self, tensor: TensorId) -> &Matrix {
        match tensor {
            TensorId::User => &self.users,
            TensorId::WordIn => &self.words_in,
            TensorId::WordOut if self.shared_word_table => &self.words_in,
            TensorId::WordOut => &self.words_out,
            TensorId::Entity => &self.entities,
            TensorId::Relation => &self.relations,
        }
    }

    pub fn tensor_mut(&mut self, tensor: TensorId) -> &mut Matrix {
        match tensor {
            TensorId::User => &mut self.users,
            TensorId::WordIn => &mut self.words_in,
            TensorId::WordOut if self.shared_word_table => &mut self.words_in,
            TensorId::WordOut => &mut self.words_out,
            TensorId::Entity => &mut self.entities,
            TensorId::Relation => &mut self.relations,
        }
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn user(&self, index: usize) -> &[f64] {
        self.users.row(index)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    fn first_non_finite(&self) -> Option<TensorId> {
        [
            TensorId::User,
            TensorId::WordIn,
            TensorId::WordOut,
            TensorId::Entity,
            TensorId::Relation,
        ]
        .into_iter()
        .find(|&t| !self.tensor(t).is_finite())
    }

    /// SHA-256 over the raw bits of every tensor, hex encoded. Used to check
    /// that inference-time code leaves embeddings untouched.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for m in [
            &self.users,
            &self.words_in,
            &self.words_out,
            &self.entities,
            &self.relations,
        ] {
            h.update((m.rows() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Mean of all user vectors; the zero vector when there are no users.
    pub fn mean_user(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        let n = self.users.rows();
        if n == 0 {
            return mean;
        }
        for row in self.users.iter_rows() {
            crate::tensor::axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        mean
    }
}

impl ParamSource for ModelParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, tensor: TensorId, index: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.tensor(tensor).row(index))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short stable digest of an id table (order-sensitive).
pub fn table_fingerprint(table: &IdTable) -> String {
    let mut h = Sha256::new();
    for id in table.iter() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize()[..8])
}

/// Id tables embedded in a model file so it is self-describing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelTables {
    pub users: IdTable,
    pub words: IdTable,
    pub entities: IdTable,
    pub relations: IdTable,
}

impl ModelTables {
    pub fn from_corpus(corpus: &SocialCorpus) -> Self {
        ModelTables {
            users: corpus.users.clone(),
            words: corpus.vocab.table().clone(),
            entities: corpus.entities.clone(),
            relations: corpus.relations.clone(),
        }
    }
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_row(out: &mut impl Write, id: &str, values: &[f64]) -> std::io::Result<()> {
    out.write_all(id.as_bytes())?;
    for v in values {
        write!(out, " {}", fmt_real(*v))?;
    }
    out.write_all(b"\n")
}

fn check_id(id: &str) -> FileResult<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(ModelFileError::InvalidId(id.to_string()));
    }
    Ok(())
}

pub fn write_model(params: &ModelParams, tables: &ModelTables, out: &mut impl Write) -> FileResult<()> {
    if let Some(t) = params.first_non_finite() {
        return Err(ModelFileError::NonFinite(t.name()));
    }
    let out_rows = if params.shared_word_table {
        None
    } else {
        Some(&params.words_out)
    };
    let sections: [(&'static str, &IdTable, Option<&Matrix>); 5] = [
        ("USERS", &tables.users, Some(&params.users)),
        ("WORDS_IN", &tables.words, Some(&params.words_in)),
        ("WORDS_OUT", &tables.words, out_rows),
        ("ENTITIES", &tables.entities, Some(&params.entities)),
        ("RELATIONS", &tables.relations, Some(&params.relations)),
    ];
    for (section, table, m) in &sections {
        if let Some(m) = m {
            if m.rows() != table.len() {
                return Err(ModelFileError::TableMismatch {
                    section,
                    rows: m.rows(),
                    table: table.len(),
                });
            }
        }
        table.iter().try_for_each(check_id)?;
    }
    let io = |source| ModelFileError::Io {
        path: PathBuf::from("<model>"),
        source,
    };
    writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}").map_err(io)?;
    writeln!(out, "K {}", params.dim).map_err(io)?;
    for (section, table, m) in &sections {
        match m {
            Some(m) => {
                writeln!(out, "{section} {}", m.rows()).map_err(io)?;
                for (id, row) in table.iter().zip(m.iter_rows()) {
                    write_row(out, id, row).map_err(io)?;
                }
            }
            None => writeln!(out, "{section} 0").map_err(io)?,
        }
    }
    out.flush().map_err(io)
}

pub fn save_model(params: &ModelParams, tables: &ModelTables, path: &Path) -> FileResult<()> {
    let io = |source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    };
    // Serialize fully before touching the file so a failed check leaves no
    // partial output behind.
    let mut buf = Vec::new();
    write_model(params, tables, &mut buf)?;
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(&buf).map_err(io)?;
    f.flush().map_err(io)
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, section: &str) -> FileResult<(usize, &'a str)> {
        self.iter
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| ModelFileError::Truncated {
                section: section.to_string(),
            })
    }
}

fn parse_real(tok: &str, line: usize) -> FileResult<f64> {
    let v: f64 = tok.parse().map_err(|_| ModelFileError::Parse {
        line,
        message: format!("not a real number: {tok:?}"),
    })?;
    Ok(v)
}

fn parse_section_header(lines: &mut Lines<'_>, name: &str) -> FileResult<usize> {
    let (line, text) = lines.next(name)?;
    let mut parts = text.split(' ');
    let (Some(tag), Some(n), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(ModelFileError::Parse {
            line,
            message: format!("expected `{name} <count>`"),
        });
    };
    if tag != name {
        return Err(ModelFileError::Parse {
            line,
            message: format!("expected section {name}, found {tag:?}"),
        });
    }
    n.parse().map_err(|_| ModelFileError::Parse {
        line,
        message: format!("bad row count {n:?}"),
    })
}

fn parse_section(lines: &mut Lines<'_>, name: &'static str, width: usize) -> FileResult<(IdTable, Matrix)> {
    let n = parse_section_header(lines, name)?;
    let mut table = IdTable::new();
    let mut data = Vec::with_capacity(n * width);
    for _ in 0..n {
        let (line, text) = lines.next(name)?;
        let mut parts = text.split(' ');
        let id = parts.next().unwrap_or_default();
        let before = data.len();
        for tok in parts {
            data.push(parse_real(tok, line)?);
        }
        let found = data.len() - before;
        if found != width {
            return Err(ModelFileError::DimensionMismatch {
                line,
                expected: width,
                found,
            });
        }
        if table.get(id).is_some() {
            return Err(ModelFileError::Parse {
                line,
                message: format!("duplicate id {id:?}"),
            });
        }
        check_id(id)?;
        table.intern(id);
    }
    let m = Matrix::from_vec(n, width, data);
    if !m.is_finite() {
        return Err(ModelFileError::NonFinite(name));
    }
    Ok((table, m))
}

pub fn read_model(mut input: impl Read) -> FileResult<(ModelParams, ModelTables)> {
    let mut text = String::new();
    input.read_to_string(&mut text).map_err(|source| ModelFileError::Io {
        path: PathBuf::from("<model>"),
        source,
    })?;
    let mut lines = Lines {
        iter: text.lines().enumerate(),
    };
    let (_, header) = lines.next("header")?;
    let version = header
        .strip_prefix(MODEL_MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| ModelFileError::BadHeader {
            expected: format!("{MODEL_MAGIC} {MODEL_VERSION}"),
        })?;
    if version != MODEL_VERSION.to_string() {
        return Err(ModelFileError::VersionMismatch {
            found: version.to_string(),
            supported: MODEL_VERSION,
        });
    }
    // Every complete file ends with a newline; anything else was cut short.
    if !text.ends_with('\n') {
        return Err(ModelFileError::Truncated {
            section: "final line".to_string(),
        });
    }
    let dim = parse_section_header(&mut lines, "K")?;
    if dim == 0 {
        return Err(ModelFileError::Parse {
            line: 2,
            message: "K must be at least 1".into(),
        });
    }
    let (users_t, users) = parse_section(&mut lines, "USERS", dim)?;
    let (words_t, words_in) = parse_section(&mut lines, "WORDS_IN", dim)?;
    let (out_t, words_out) = parse_section(&mut lines, "WORDS_OUT", dim)?;
    let (entities_t, entities) = parse_section(&mut lines, "ENTITIES", dim)?;
    let (relations_t, relations) = parse_section(&mut lines, "RELATIONS", dim * dim)?;
    if let Some((i, extra)) = lines.iter.next() {
        return Err(ModelFileError::Parse {
            line: i + 1,
            message: format!("unexpected trailing content {extra:?}"),
        });
    }
    let shared = words_out.rows() == 0 && words_in.rows() > 0;
    if !shared && out_t != words_t {
        return Err(ModelFileError::TableMismatch {
            section: "WORDS_OUT",
            rows: words_out.rows(),
            table: words_t.len(),
        });
    }
    let params = ModelParams {
        dim,
        users,
        words_in,
        words_out,
        entities,
        relations,
        shared_word_table: shared,
        words_frozen: false,
    };
    let tables = ModelTables {
        users: users_t,
        words: words_t,
        entities: entities_t,
        relations: relations_t,
    };
    Ok((params, tables))
}

pub fn load_model(path: &Path) -> FileResult<(ModelParams, ModelTables)> {
    let f = File::open(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_model(BufReader::new(f))
}

/// Overwrites context-side word vectors from a `<token> <v1> ... <vK>` text
/// file. Tokens absent from `words` are ignored. Returns how many vocabulary
/// tokens were matched; `freeze` marks the word tables as excluded from
/// training updates.
pub fn read_pretrained_words(
    params: &mut ModelParams,
    input: impl BufRead,
    words: &IdTable,
    freeze: bool,
) -> FileResult<usize> {
    let dim = params.dim;
    let mut matched = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ModelFileError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|t| parse_real(t, line_no))
            .collect::<FileResult<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(ModelFileError::DimensionMismatch {
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelFileError::NonFinite("pretrained words"));
        }
        if let Some(w) = words.get(token) {
            params.words_in.row_mut(w).copy_from_slice(&values);
            matched += 1;
        }
    }
    params.words_frozen = freeze;
    Ok(matched)
}

pub fn load_pretrained_words(
    params: &mut ModelParams,
    path: &Path,
    words: &IdTable,
    freeze: bool,
) -> FileResult<usize> {
    let f = File::open(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_pretrained_words(params, BufReader::new(f), words, freeze)
}
