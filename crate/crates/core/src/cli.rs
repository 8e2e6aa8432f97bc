//! Command-line driver: `synth`, `train`, `train-head`, `eval`, `group` and
//! `export` subcommands over one binary.
//!
//! Tunables are `key=value` settings resolved per run with precedence
//! flag > config file > built-in default. The config file is named by
//! `--config` or the `SOCIALVEC_CONFIG` environment variable; it holds
//! `key=value` lines, `#` comments and blank lines. Unknown keys are usage
//! errors. Every run echoes its resolved settings to stderr as `# key=value`
//! lines before doing any work.
//!
//! Exit codes: 0 success, 1 data or runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::corpus::{CorpusFiles, SocialCorpus};
use crate::harness::{
    ablation_matrix, friend_pairs, results_tsv, LabelSet, SplitSpec, Task, Variant, FRIEND_LABELS, FRIEND_TASK,
};
use crate::inference::{
    attr_train, group_query, rel_train, AttributeClassifier, GroupCondition, GroupFitConfig, HeadConfig,
    ModelFingerprint, SavedHead,
};
use crate::params::{fmt_real, load_model, save_model, ModelParams, ModelTables};
use crate::synth::{default_attributes, generate, SynthConfig, Truth, COMMUNITY};
use crate::trainer::{train, Streams, TrainConfig};

pub const CONFIG_ENV: &str = "SOCIALVEC_CONFIG";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    Seed,
    Train,
    Streams,
    Head,
    Split,
    Group,
    Synth,
}

struct Key {
    name: &'static str,
    scope: Scope,
    help: &'static str,
}

const KEYS: &[Key] = &[
    Key {
        name: "seed",
        scope: Scope::Seed,
        help: "base seed for every randomized step",
    },
    Key {
        name: "k",
        scope: Scope::Train,
        help: "embedding width K",
    },
    Key {
        name: "epochs",
        scope: Scope::Train,
        help: "training epochs",
    },
    Key {
        name: "lambda1",
        scope: Scope::Train,
        help: "graph loss weight",
    },
    Key {
        name: "lambda2",
        scope: Scope::Train,
        help: "relation loss weight",
    },
    Key {
        name: "lr0",
        scope: Scope::Train,
        help: "initial SGD step",
    },
    Key {
        name: "lr_min",
        scope: Scope::Train,
        help: "SGD step floor",
    },
    Key {
        name: "text_negatives",
        scope: Scope::Train,
        help: "negative words per text event",
    },
    Key {
        name: "graph_negatives",
        scope: Scope::Train,
        help: "negative users per graph event",
    },
    Key {
        name: "relation_negatives",
        scope: Scope::Train,
        help: "negative entities per triple",
    },
    Key {
        name: "window",
        scope: Scope::Train,
        help: "context half-width",
    },
    Key {
        name: "min_count",
        scope: Scope::Train,
        help: "minimum token frequency",
    },
    Key {
        name: "workers",
        scope: Scope::Train,
        help: "training threads (1 = deterministic)",
    },
    Key {
        name: "freeze_words",
        scope: Scope::Train,
        help: "keep word vectors fixed",
    },
    Key {
        name: "shared_word_table",
        scope: Scope::Train,
        help: "one word table for context and target",
    },
    Key {
        name: "word_sampler_power",
        scope: Scope::Train,
        help: "unigram distortion exponent",
    },
    Key {
        name: "pretrained_words",
        scope: Scope::Train,
        help: "word vector file (empty = none)",
    },
    Key {
        name: "text",
        scope: Scope::Streams,
        help: "train on documents",
    },
    Key {
        name: "graph",
        scope: Scope::Streams,
        help: "train on friendship edges",
    },
    Key {
        name: "relations",
        scope: Scope::Streams,
        help: "train on attribute triples",
    },
    Key {
        name: "head_hidden",
        scope: Scope::Head,
        help: "head hidden width H",
    },
    Key {
        name: "head_pair_hidden",
        scope: Scope::Head,
        help: "relation head pair width H'",
    },
    Key {
        name: "head_epochs",
        scope: Scope::Head,
        help: "head training epochs",
    },
    Key {
        name: "head_lr",
        scope: Scope::Head,
        help: "AdaGrad step",
    },
    Key {
        name: "head_eps",
        scope: Scope::Head,
        help: "AdaGrad epsilon",
    },
    Key {
        name: "split_train",
        scope: Scope::Split,
        help: "train share",
    },
    Key {
        name: "split_dev",
        scope: Scope::Split,
        help: "dev share",
    },
    Key {
        name: "split_test",
        scope: Scope::Split,
        help: "test share",
    },
    Key {
        name: "group_iterations",
        scope: Scope::Group,
        help: "group fit iterations",
    },
    Key {
        name: "group_step",
        scope: Scope::Group,
        help: "group fit ascent step",
    },
    Key {
        name: "group_mu",
        scope: Scope::Group,
        help: "group embedding L2 penalty",
    },
    Key {
        name: "n_users",
        scope: Scope::Synth,
        help: "users",
    },
    Key {
        name: "n_communities",
        scope: Scope::Synth,
        help: "communities",
    },
    Key {
        name: "p_in",
        scope: Scope::Synth,
        help: "edge probability within a community",
    },
    Key {
        name: "p_out",
        scope: Scope::Synth,
        help: "edge probability across communities",
    },
    Key {
        name: "vocab_size",
        scope: Scope::Synth,
        help: "vocabulary size",
    },
    Key {
        name: "tokens_per_user",
        scope: Scope::Synth,
        help: "tokens per document",
    },
    Key {
        name: "topic_skew",
        scope: Scope::Synth,
        help: "mass on the community's vocabulary block",
    },
    Key {
        name: "noise",
        scope: Scope::Synth,
        help: "flip noise of the planted `likes` attribute",
    },
];

fn defaults() -> BTreeMap<&'static str, String> {
    let t = TrainConfig::default();
    let h = HeadConfig::default();
    let s = SplitSpec::default();
    let g = GroupFitConfig::default();
    let y = SynthConfig::default();
    let noise = y.attributes.iter().find(|a| a.name == "likes").map_or(0.1, |a| a.noise);
    let pairs: Vec<(&'static str, String)> = vec![
        ("seed", t.seed.to_string()),
        ("k", t.dim.to_string()),
        ("epochs", t.epochs.to_string()),
        ("lambda1", t.lambda_graph.to_string()),
        ("lambda2", t.lambda_relation.to_string()),
        ("lr0", t.lr0.to_string()),
        ("lr_min", t.lr_min.to_string()),
        ("text_negatives", t.text_negatives.to_string()),
        ("graph_negatives", t.graph_negatives.to_string()),
        ("relation_negatives", t.relation_negatives.to_string()),
        ("window", t.window.to_string()),
        ("min_count", t.min_count.to_string()),
        ("workers", t.workers.to_string()),
        ("freeze_words", t.freeze_words.to_string()),
        ("shared_word_table", t.shared_word_table.to_string()),
        ("word_sampler_power", t.word_sampler_power.to_string()),
        ("pretrained_words", String::new()),
        ("text", t.streams.text.to_string()),
        ("graph", t.streams.graph.to_string()),
        ("relations", t.streams.relations.to_string()),
        ("head_hidden", h.hidden.to_string()),
        ("head_pair_hidden", h.pair_hidden.to_string()),
        ("head_epochs", h.epochs.to_string()),
        ("head_lr", h.lr.to_string()),
        ("head_eps", h.eps.to_string()),
        ("split_train", s.train.to_string()),
        ("split_dev", s.dev.to_string()),
        ("split_test", s.test.to_string()),
        ("group_iterations", g.iterations.to_string()),
        ("group_step", g.step.to_string()),
        ("group_mu", g.mu.to_string()),
        ("n_users", y.n_users.to_string()),
        ("n_communities", y.n_communities.to_string()),
        ("p_in", y.p_in.to_string()),
        ("p_out", y.p_out.to_string()),
        ("vocab_size", y.vocab_size.to_string()),
        ("tokens_per_user", y.tokens_per_user.to_string()),
        ("topic_skew", y.topic_skew.to_string()),
        ("noise", noise.to_string()),
    ];
    pairs.into_iter().collect()
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Parses a `key=value` config file body. Keys are checked against the full
/// key table, not just the running command's.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let k = k.trim();
        if !KEYS.iter().any(|key| key.name == k) {
            return Err(format!("config line {}: unknown key {k:?}", i + 1));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Resolved settings for one command.
struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    fn resolve(scopes: &[Scope], m: &ArgMatches) -> Result<Self> {
        let config_path = m.get_one::<PathBuf>("config").cloned().or_else(|| {
            std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        });
        let file = match &config_path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text).map_err(usage)?
            }
            None => BTreeMap::new(),
        };
        let defaults = defaults();
        let mut values = BTreeMap::new();
        for key in KEYS.iter().filter(|k| scopes.contains(&k.scope)) {
            let v = m
                .get_one::<String>(key.name)
                .cloned()
                .or_else(|| file.get(key.name).cloned())
                .unwrap_or_else(|| defaults[key.name].clone());
            values.insert(key.name, v);
        }
        Ok(Settings { values })
    }

    fn echo(&self, command: &str, err: &mut dyn Write) {
        let _ = writeln!(err, "# socialvec {command}");
        for (k, v) in &self.values {
            let _ = writeln!(err, "# {k}={v}");
        }
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("setting {key} not in scope"))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| usage(format!("invalid value {v:?} for {key}")))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let pretrained = self.raw("pretrained_words");
        let streams = if self.values.contains_key("text") {
            Streams {
                text: self.get("text")?,
                graph: self.get("graph")?,
                relations: self.get("relations")?,
            }
        } else {
            Streams::ALL
        };
        let cfg = TrainConfig {
            dim: self.get("k")?,
            epochs: self.get("epochs")?,
            lambda_graph: self.get("lambda1")?,
            lambda_relation: self.get("lambda2")?,
            lr0: self.get("lr0")?,
            lr_min: self.get("lr_min")?,
            text_negatives: self.get("text_negatives")?,
            graph_negatives: self.get("graph_negatives")?,
            relation_negatives: self.get("relation_negatives")?,
            window: self.get("window")?,
            min_count: self.get("min_count")?,
            seed: self.get("seed")?,
            workers: self.get("workers")?,
            freeze_words: self.get("freeze_words")?,
            shared_word_table: self.get("shared_word_table")?,
            word_sampler_power: self.get("word_sampler_power")?,
            streams,
            pretrained_words: (!pretrained.is_empty()).then(|| PathBuf::from(pretrained)),
            progress: false,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn head_config(&self) -> Result<HeadConfig> {
        Ok(HeadConfig {
            hidden: self.get("head_hidden")?,
            pair_hidden: self.get("head_pair_hidden")?,
            epochs: self.get("head_epochs")?,
            lr: self.get("head_lr")?,
            eps: self.get("head_eps")?,
            seed: self.get("seed")?,
        })
    }

    fn split_spec(&self) -> Result<SplitSpec> {
        let s = SplitSpec {
            train: self.get("split_train")?,
            dev: self.get("split_dev")?,
            test: self.get("split_test")?,
            seed: self.get("seed")?,
        };
        s.validate().map_err(usage)?;
        Ok(s)
    }

    fn group_config(&self) -> Result<GroupFitConfig> {
        Ok(GroupFitConfig {
            iterations: self.get("group_iterations")?,
            step: self.get("group_step")?,
            mu: self.get("group_mu")?,
        })
    }

    fn synth_config(&self) -> Result<SynthConfig> {
        let n_communities = self.get("n_communities")?;
        let cfg = SynthConfig {
            n_users: self.get("n_users")?,
            n_communities,
            p_in: self.get("p_in")?,
            p_out: self.get("p_out")?,
            vocab_size: self.get("vocab_size")?,
            tokens_per_user: self.get("tokens_per_user")?,
            topic_skew: self.get("topic_skew")?,
            attributes: default_attributes(n_communities, self.get("noise")?),
            seed: self.get("seed")?,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn with_keys(cmd: Command, scopes: &[Scope]) -> Command {
    let cmd = cmd.arg(path_arg("config", "key=value settings file"));
    KEYS.iter().filter(|k| scopes.contains(&k.scope)).fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(k.help),
        )
    })
}

const SYNTH: &[Scope] = &[Scope::Seed, Scope::Synth];
const TRAIN: &[Scope] = &[Scope::Seed, Scope::Train, Scope::Streams];
const HEAD: &[Scope] = &[Scope::Seed, Scope::Head];
const EVAL: &[Scope] = &[Scope::Seed, Scope::Train, Scope::Head, Scope::Split];
const GROUP: &[Scope] = &[Scope::Group];
const EXPORT: &[Scope] = &[];

fn command() -> Command {
    let task = || {
        Arg::new("task")
            .long("task")
            .value_parser(["attr", FRIEND_TASK])
            .default_value("attr")
            .help("attribute or friend prediction")
    };
    let attribute = || {
        Arg::new("attribute")
            .long("attribute")
            .default_value(COMMUNITY)
            .help("truth attribute to predict")
    };
    Command::new("socialvec")
        .about("Joint user/word/entity embeddings with attribute, relation and group inference")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(
            Command::new("synth")
                .about("write a planted-structure corpus and truth.tsv")
                .arg(path_arg("out", "output directory").required(true)),
            SYNTH,
        ))
        .subcommand(with_keys(
            Command::new("train")
                .about("train embeddings on a corpus directory")
                .arg(path_arg("corpus", "directory with documents/edges/triples .tsv").required(true))
                .arg(path_arg("model", "model file to write").required(true)),
            TRAIN,
        ))
        .subcommand(with_keys(
            Command::new("train-head")
                .about("train an attribute or friend head on a frozen model")
                .arg(path_arg("model", "trained model file").required(true))
                .arg(path_arg("out", "classifier file to write").required(true))
                .arg(task())
                .arg(attribute())
                .arg(path_arg("truth", "truth.tsv with labels"))
                .arg(path_arg("corpus", "corpus directory (friend task)")),
            HEAD,
        ))
        .subcommand(with_keys(
            Command::new("eval")
                .about("run the split/ablation protocol and print a results table")
                .arg(path_arg("corpus", "corpus directory").required(true))
                .arg(task())
                .arg(attribute())
                .arg(path_arg("truth", "truth.tsv with labels"))
                .arg(
                    Arg::new("variants")
                        .long("variants")
                        .default_value("All,OnlyText,OnlyNetwork,OnlyAttribute,Network+Text,Network+Attribute")
                        .help("comma-separated variant names"),
                ),
            EVAL,
        ))
        .subcommand(with_keys(
            Command::new("group")
                .about("answer `IF a=x,... THEN b=y,...` group queries")
                .arg(path_arg("model", "trained model file").required(true))
                .arg(
                    path_arg("head", "attribute classifier file")
                        .action(ArgAction::Append)
                        .required(true),
                )
                .arg(
                    Arg::new("query")
                        .long("query")
                        .action(ArgAction::Append)
                        .required(true)
                        .help("query string; give two with --ratio"),
                )
                .arg(
                    Arg::new("ratio")
                        .long("ratio")
                        .action(ArgAction::SetTrue)
                        .help("print P(query 1) / P(query 2)"),
                ),
            GROUP,
        ))
        .subcommand(with_keys(
            Command::new("export")
                .about("write user embeddings as `<id> <v1> ... <vK>` lines")
                .arg(path_arg("model", "trained model file").required(true))
                .arg(path_arg("out", "output file (default stdout)")),
            EXPORT,
        ))
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "synth" => cmd_synth(sub, out, err),
        "train" => cmd_train(sub, out, err),
        "train-head" => cmd_train_head(sub, out, err),
        "eval" => cmd_eval(sub, out, err),
        "group" => cmd_group(sub, out, err),
        "export" => cmd_export(sub, out, err),
        _ => unreachable!("unknown subcommand"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn required_path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    path(m, name).expect("clap enforces required arguments")
}

fn cmd_synth(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(SYNTH, m)?;
    s.echo("synth", err);
    let cfg = s.synth_config()?;
    let dir = required_path(m, "out");
    let dataset = generate(&cfg).map_err(data)?;
    dataset.write(dir).map_err(usage)?;
    let _ = writeln!(
        out,
        "users={} edges={} triples={} dir={}",
        dataset.corpus.users.len(),
        dataset.corpus.edges.len(),
        dataset.corpus.triples.len(),
        dir.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path, min_count: u64, users: Option<crate::corpus::UserTable>) -> Result<SocialCorpus> {
    if !dir.is_dir() {
        return Err(data(format!("corpus directory {} not found", dir.display())));
    }
    let files = CorpusFiles::in_dir(dir);
    match users {
        Some(u) => SocialCorpus::load_with_users(&files, min_count, u),
        None => SocialCorpus::load(&files, min_count),
    }
    .map_err(data)
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(TRAIN, m)?;
    s.echo("train", err);
    let cfg = s.train_config()?;
    let corpus = load_corpus(required_path(m, "corpus"), cfg.min_count, None)?;
    let (params, report) = train(&corpus, &cfg).map_err(data)?;
    for epoch in &report.epochs {
        for line in epoch.progress_lines() {
            let _ = writeln!(err, "{line}");
        }
    }
    let model = required_path(m, "model");
    save_model(&params, &ModelTables::from_corpus(&corpus), model).map_err(data)?;
    let last = report.epochs.last().map_or(0.0, |e| e.joint_mean);
    let _ = writeln!(
        out,
        "model={} users={} words={} entities={} relations={} events={} joint_loss={:.6}",
        model.display(),
        corpus.users.len(),
        corpus.vocab.len(),
        corpus.entities.len(),
        corpus.relations.len(),
        report.total_events(),
        last
    );
    Ok(())
}

fn load_truth(m: &ArgMatches) -> Result<Truth> {
    let p = path(m, "truth").ok_or_else(|| data("labels missing: pass --truth <truth.tsv>"))?;
    Truth::load(p).map_err(data)
}

fn cmd_train_head(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(HEAD, m)?;
    s.echo("train-head", err);
    let head = s.head_config()?;
    let (params, tables) = load_model(required_path(m, "model")).map_err(data)?;
    let fp = ModelFingerprint::of(&params, &tables);
    let saved = if m.get_one::<String>("task").map(String::as_str) == Some(FRIEND_TASK) {
        let dir = path(m, "corpus").ok_or_else(|| usage("the friend task needs --corpus"))?;
        let corpus = load_corpus(dir, 1, Some(tables.users.clone()))?;
        if corpus.users.len() != tables.users.len() {
            return Err(data("corpus names users the model was not trained on"));
        }
        let pairs = friend_pairs(&corpus, head.seed).map_err(data)?;
        let labels = FRIEND_LABELS.iter().map(|l| l.to_string()).collect();
        let fit = rel_train(&params, fp, FRIEND_TASK, labels, &pairs, &head, None).map_err(data)?;
        let acc = fit.classifier.accuracy(&params, &pairs).map_err(data)?;
        let _ = writeln!(
            out,
            "head={FRIEND_TASK} examples={} train_accuracy={acc:.6}",
            pairs.len()
        );
        SavedHead::Relation(fit.classifier)
    } else {
        let attribute = m.get_one::<String>("attribute").expect("has default");
        let truth = load_truth(m)?;
        let labels = labels_for_model(&truth, &tables, attribute)?;
        let examples: Vec<(usize, usize)> = labels
            .labels
            .iter()
            .enumerate()
            .filter_map(|(u, l)| l.map(|l| (u, l)))
            .collect();
        let fit = attr_train(&params, fp, attribute, labels.values.clone(), &examples, &head, None).map_err(data)?;
        let acc = fit.classifier.accuracy(&params, &examples).map_err(data)?;
        let _ = writeln!(
            out,
            "head={attribute} examples={} train_accuracy={acc:.6}",
            examples.len()
        );
        SavedHead::Attribute(fit.classifier)
    };
    saved.save(required_path(m, "out")).map_err(data)
}

fn labels_for_model(truth: &Truth, tables: &ModelTables, attribute: &str) -> Result<LabelSet> {
    LabelSet::from_truth_tables(truth, &tables.users, &tables.relations, attribute).map_err(data)
}

fn cmd_eval(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(EVAL, m)?;
    s.echo("eval", err);
    let cfg = s.train_config()?;
    let head = s.head_config()?;
    let split = s.split_spec()?;
    let variants = m
        .get_one::<String>("variants")
        .expect("has default")
        .split(',')
        .map(|v| Variant::named(v.trim()).map_err(usage))
        .collect::<Result<Vec<_>>>()?;
    let corpus = load_corpus(required_path(m, "corpus"), cfg.min_count, None)?;
    let task = if m.get_one::<String>("task").map(String::as_str) == Some(FRIEND_TASK) {
        Task::Friend
    } else {
        let attribute = m.get_one::<String>("attribute").expect("has default");
        let truth = load_truth(m)?;
        Task::Attribute(LabelSet::from_truth(&truth, &corpus, attribute).map_err(data)?)
    };
    let results = ablation_matrix(&corpus, &[task], &variants, &cfg, &head, &split).map_err(data)?;
    let _ = write!(out, "{}", results_tsv(&results));
    Ok(())
}

/// `(attribute, value)` pairs.
pub type Conditions = Vec<(String, String)>;

/// `IF a=x[,b=y…] THEN c=z[,…]` → (given, target).
pub fn parse_query(q: &str) -> std::result::Result<(Conditions, Conditions), String> {
    let q = q.trim();
    let rest = q
        .strip_prefix("IF ")
        .ok_or_else(|| format!("query {q:?}: an IF clause is required (`IF a=x THEN b=y`)"))?;
    let (given, target) = rest
        .split_once(" THEN ")
        .ok_or_else(|| format!("query {q:?}: missing THEN clause"))?;
    let conds = |s: &str| -> std::result::Result<Conditions, String> {
        s.split(',')
            .map(|c| {
                let (a, v) = c
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| format!("condition {c:?} is not attribute=value"))?;
                let (a, v) = (a.trim(), v.trim());
                if a.is_empty() || v.is_empty() {
                    return Err(format!("condition {c:?} is not attribute=value"));
                }
                Ok((a.to_string(), v.to_string()))
            })
            .collect()
    };
    Ok((conds(given)?, conds(target)?))
}

fn resolve<'a>(heads: &'a [AttributeClassifier], conds: &[(String, String)]) -> Result<Vec<GroupCondition<'a>>> {
    conds
        .iter()
        .map(|(a, v)| {
            let clf = heads
                .iter()
                .find(|h| h.attribute == *a)
                .ok_or_else(|| data(format!("unresolvable condition {a}={v}: no head for {a:?}")))?;
            let label = clf
                .label_index(v)
                .ok_or_else(|| data(format!("unresolvable condition {a}={v}: head {a:?} has no label {v:?}")))?;
            GroupCondition::new(clf, label).map_err(data)
        })
        .collect()
}

fn cmd_group(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(GROUP, m)?;
    s.echo("group", err);
    let cfg = s.group_config()?;
    let queries: Vec<&String> = m.get_many::<String>("query").expect("required").collect();
    let ratio = m.get_flag("ratio");
    if ratio && queries.len() != 2 {
        return Err(usage("--ratio needs exactly two --query values"));
    }
    if !ratio && queries.len() != 1 {
        return Err(usage("give one --query (or two with --ratio)"));
    }
    let parsed = queries
        .iter()
        .map(|q| parse_query(q).map_err(usage))
        .collect::<Result<Vec<_>>>()?;
    let (params, tables) = load_model(required_path(m, "model")).map_err(data)?;
    let heads = load_heads(m, &params, &tables)?;
    let init = params.mean_user();
    let mut results = Vec::new();
    for (given, target) in &parsed {
        let a = resolve(&heads, given)?;
        let b = resolve(&heads, target)?;
        results.push(group_query(&a, &b, &init, &cfg).map_err(data)?);
    }
    if ratio {
        let denom = results[1].probability;
        if denom == 0.0 {
            return Err(data("ratio denominator is zero"));
        }
        let _ = writeln!(out, "ratio={:.6}", results[0].probability / denom);
    } else {
        let _ = writeln!(out, "{}", results[0]);
    }
    Ok(())
}

fn load_heads(m: &ArgMatches, params: &ModelParams, tables: &ModelTables) -> Result<Vec<AttributeClassifier>> {
    m.get_many::<PathBuf>("head")
        .expect("required")
        .map(|p| match SavedHead::load(p).map_err(data)? {
            SavedHead::Attribute(c) => {
                c.check_model(params, tables).map_err(data)?;
                Ok(c)
            }
            SavedHead::Relation(_) => Err(usage(format!(
                "{} holds a relation head; group queries take attribute heads",
                p.display()
            ))),
        })
        .collect()
}

fn cmd_export(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::resolve(EXPORT, m)?;
    s.echo("export", err);
    let (params, tables) = load_model(required_path(m, "model")).map_err(data)?;
    let mut text = String::new();
    for (i, id) in tables.users.iter().enumerate() {
        text.push_str(id);
        for v in params.user(i) {
            text.push(' ');
            text.push_str(&fmt_real(*v));
        }
        text.push('\n');
    }
    match path(m, "out") {
        Some(p) => fs::write(p, text).map_err(|e| data(format!("cannot write {}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_grammar() {
        let (a, b) = parse_query("IF member=c0,likes=item1 THEN likes=item0").unwrap();
        assert_eq!(
            a,
            vec![("member".into(), "c0".into()), ("likes".into(), "item1".into())]
        );
        assert_eq!(b, vec![("likes".into(), "item0".into())]);
        assert!(parse_query("THEN likes=item0").unwrap_err().contains("IF clause"));
        assert!(parse_query("IF member=c0").is_err());
        assert!(parse_query("IF member THEN likes=x").is_err());
    }

    #[test]
    fn config_parsing() {
        let c = parse_config("# comment\n\nk = 16\nlambda1=0\n").unwrap();
        assert_eq!(c["k"], "16");
        assert_eq!(c["lambda1"], "0");
        assert!(parse_config("bogus=1\n").unwrap_err().contains("unknown key"));
        assert!(parse_config("k\n").is_err());
    }

    #[test]
    fn every_key_has_a_default() {
        let d = defaults();
        for k in KEYS {
            assert!(d.contains_key(k.name), "{}", k.name);
        }
        assert_eq!(d.len(), KEYS.len());
        assert_eq!(d["k"], "500");
        assert_eq!(d["epochs"], "3");
    }

    #[test]
    fn clap_definition_is_consistent() {
        command().debug_assert();
    }
}
