//! The `kesdt` command-line tool.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{CvConfig, DataConfig, RunConfig};

use crate::classifier::LossKind;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::harness::{
    dataset_stats, generate_synthetic, load_dataset, run_ablation, run_cv, Dataset, DatasetFormat, Metrics,
    Preprocessor,
};
use crate::lexicon::{build_trie, load_dictionary_source, write_dictionary, LexiconTrie};
use crate::pipeline::{
    gradient_check, load_checkpoint, save_checkpoint, train, write_history, GradCheckOptions, Resources,
};

#[derive(Debug, Parser)]
#[command(name = "kesdt", version, about = "Knowledge-enhanced ADR text classifier")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Threads for cross-validation folds.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a phrase list into a domain dictionary.
    BuildLexicon(BuildLexiconArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Cross-validate the six ablation variants.
    Ablate(CvArgs),
    /// Classify one text with a checkpoint.
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset, lexicon and word vectors.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildLexiconArgs {
    /// Phrase file, one phrase per line.
    pub phrases: PathBuf,
    /// Output file (default: <out-dir>/dictionary.txt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_word_length: Option<usize>,
    #[arg(long)]
    pub keep_stopwords: bool,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// focal | cross_entropy
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub fusion_layer: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub h_max: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Drop the appended keyword segment.
    #[arg(long)]
    pub no_keywords: bool,
    /// Disable synonym fusion.
    #[arg(long)]
    pub no_synonyms: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text to classify; several arguments are joined with spaces.
    #[arg(required = true)]
    pub text: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "focal")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Fault injection: perturb this tensor's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub keyword_signal: Option<f64>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.output_dir = d.clone();
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.clone());
    }
    if a.format.is_some() {
        cfg.data.format = a.format;
    }
    if let Some(p) = &a.dev {
        cfg.data.dev_path = Some(p.clone());
    }
    if let Some(p) = &a.lexicon {
        cfg.lexicon = Some(p.clone());
    }
    if let Some(p) = &a.embeddings {
        cfg.embeddings = Some(p.clone());
    }
}

fn apply_train(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = o.$src { t.$($dst).+ = v; })*
        };
    }
    set!(
        epochs => epochs,
        learning_rate => learning_rate,
        batch_size => batch_size,
        loss => loss_kind,
        gamma => gamma,
        dropout => encoder.dropout_rate,
        fusion_layer => encoder.fusion_layer,
        max_len => max_len,
        h_max => h_max,
        d_model => encoder.d_model,
        heads => encoder.n_heads,
        d_ff => encoder.d_ff,
        layers => encoder.layers,
    );
    if o.no_keywords {
        t.enable_keywords = false;
    }
    if o.no_synonyms {
        t.enable_synonyms = false;
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into the output directory along with the effective config
/// and a manifest of SHA-256 hashes.
struct OutputDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_owned(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file written by someone else.
    fn register(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_owned(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<()> {
        self.write("config.toml", cfg.to_toml()?.as_bytes())?;
        #[derive(Serialize)]
        struct Entry<'a> {
            path: &'a str,
            sha256: &'a str,
        }
        let entries: Vec<Entry<'_>> = self
            .files
            .iter()
            .map(|(p, h)| Entry { path: p, sha256: h })
            .collect();
        let mut text = serde_json::to_string_pretty(&serde_json::json!({ "files": entries }))
            .map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_resources(cfg: &RunConfig) -> Result<Resources> {
    let lexicon = match &cfg.lexicon {
        Some(p) => build_trie(&load_dictionary_source(p, &cfg.dictionary)?),
        None => {
            log::warn!("no lexicon configured; keyword extraction finds nothing");
            LexiconTrie::default()
        }
    };
    let embeddings = cfg.embeddings.as_deref().map(EmbeddingTable::load).transpose()?;
    if embeddings.is_none() && cfg.train.enable_synonyms {
        log::warn!("no embedding table configured; synonym fusion has nothing to fuse");
    }
    Ok(Resources { lexicon, embeddings })
}

fn load_data(cfg: &RunConfig, command: &str) -> Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{command} needs a dataset (--data or [data].path)")))?;
    let ds = load_dataset(path, cfg.data_format(path))?;
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", path.display())));
    }
    Ok(ds)
}

fn metrics_text(m: &Metrics) -> String {
    format!(
        "tp {}  fp {}  fn {}  tn {}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\n",
        m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.f1
    )
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = effective_config(&cli)?;
    match &cli.command {
        Command::BuildLexicon(a) => {
            if let Some(n) = a.min_word_length {
                cfg.dictionary.min_word_length = n;
            }
            if a.keep_stopwords {
                cfg.dictionary.filter_stopwords = false;
            }
            cfg.dictionary.validate()?;
            let words = load_dictionary_source(&a.phrases, &cfg.dictionary)?;
            let target = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("dictionary.txt"));
            if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_dictionary(words.iter().map(String::as_str), &target)?;
            writeln!(out, "{} words -> {}", words.len(), target.display()).map_err(out_err)?;
            Ok(0)
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            apply_train(&mut cfg, &a.train);
            cfg.validate()?;
            cfg.check_paths()?;
            let resources = load_resources(&cfg)?;
            let train_set = load_data(&cfg, "train")?;
            let dev = match &cfg.data.dev_path {
                Some(p) => Some(load_dataset(p, cfg.data_format(p))?),
                None => None,
            };
            let outcome = train(&cfg.train, &resources, &train_set, dev.as_ref())?;
            let mut dir = OutputDir::create(&cfg.output_dir)?;
            let ckpt = dir.path("model.ckpt");
            save_checkpoint(&outcome.model, &ckpt)?;
            dir.register("model.ckpt")?;
            let mut hist = Vec::new();
            write_history(&outcome.history, &mut hist)?;
            dir.write("history.jsonl", &hist)?;
            if let Some(d) = &dev {
                dir.write_json("dev_metrics.json", &outcome.model.evaluate(d)?)?;
            }
            dir.finish(&cfg)?;
            let last = outcome.history.last().expect("at least one epoch");
            writeln!(
                out,
                "trained {} epochs on {} examples; final loss {:.6}; checkpoint {}",
                outcome.history.len(),
                train_set.len(),
                last.train_loss,
                ckpt.display()
            )
            .map_err(out_err)?;
            Ok(0)
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            cfg.check_paths()?;
            let model = load_checkpoint(&a.checkpoint)?;
            let ds = load_data(&cfg, "eval")?;
            let m = model.evaluate(&ds)?;
            let mut dir = OutputDir::create(&cfg.output_dir)?;
            dir.write_json("metrics.json", &m)?;
            let text = metrics_text(&m);
            dir.write("metrics.txt", text.as_bytes())?;
            dir.finish(&cfg)?;
            write!(out, "{text}").map_err(out_err)?;
            Ok(0)
        }
        Command::Cv(a) | Command::Ablate(a) => {
            apply_data(&mut cfg, &a.data);
            apply_train(&mut cfg, &a.train);
            if let Some(k) = a.k {
                cfg.cv.k = k;
            }
            cfg.validate()?;
            cfg.check_paths()?;
            let resources = load_resources(&cfg)?;
            let ds = load_data(&cfg, "cv")?;
            let stats = dataset_stats(&ds, &Preprocessor::new(cfg.train.preprocess.clone()));
            log::info!("dataset stats: {stats:?}");
            let mut dir = OutputDir::create(&cfg.output_dir)?;
            dir.write_json("dataset_stats.json", &stats)?;
            let text = if matches!(cli.command, Command::Cv(_)) {
                let report = run_cv(&cfg.train, &resources, &ds, cfg.cv.k, cfg.jobs)?;
                dir.write_json("cv.json", &report)?;
                let text = report.to_text();
                dir.write("cv.txt", text.as_bytes())?;
                text
            } else {
                let table = run_ablation(&cfg.train, &resources, &ds, cfg.cv.k, cfg.jobs)?;
                dir.write_json("ablation.json", &table)?;
                dir.write("ablation.csv", table.to_csv()?.as_bytes())?;
                let text = table.to_text();
                dir.write("ablation.txt", text.as_bytes())?;
                text
            };
            dir.finish(&cfg)?;
            write!(out, "{text}").map_err(out_err)?;
            Ok(0)
        }
        Command::Predict(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let p = model.predict(&a.text.join(" "))?;
            let json = serde_json::to_string(&p).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(out, "{json}").map_err(out_err)?;
            Ok(0)
        }
        Command::Gradcheck(a) => {
            let opts = GradCheckOptions {
                loss: a.loss,
                gamma: a.gamma,
                eps: a.eps,
                tolerance: a.tolerance,
                seed: cli.seed.unwrap_or(0),
                corrupt: a.corrupt.clone(),
                ..Default::default()
            };
            let report = gradient_check(&opts)?;
            if a.json {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
                writeln!(out, "{json}").map_err(out_err)?;
            } else {
                write!(out, "{}", report.to_text()).map_err(out_err)?;
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            if let Some(v) = a.n_pos {
                s.n_pos = v;
            }
            if let Some(v) = a.n_neg {
                s.n_neg = v;
            }
            if let Some(v) = a.vocab_size {
                s.vocab_size = v;
            }
            if let Some(v) = a.keyword_signal {
                s.keyword_signal = v;
            }
            cfg.synth.validate()?;
            let data = generate_synthetic(&cfg.synth)?;
            let mut dir = OutputDir::create(&cfg.output_dir)?;
            let mut buf = Vec::new();
            data.dataset.write_jsonl(&mut buf)?;
            dir.write("dataset.jsonl", &buf)?;
            buf.clear();
            data.write_lexicon(&mut buf)?;
            dir.write("lexicon.txt", &buf)?;
            buf.clear();
            data.write_vectors(&mut buf)?;
            dir.write("vectors.txt", &buf)?;
            dir.finish(&cfg)?;
            let stats = dataset_stats(&data.dataset, &Preprocessor::default());
            writeln!(
                out,
                "{} examples ({} positive, ratio {}) -> {}",
                stats.total,
                stats.positive,
                stats.ratio,
                cfg.output_dir.display()
            )
            .map_err(out_err)?;
            Ok(0)
        }
    }
}
