//! The `calltok` command-line pipeline: synth, train, tokenize, dist-report
//! and classify.

pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use calltok::checkpoint::{Checkpoint, QuantizerKind};
use calltok::classify::{
    chance_level, delta_drop, knn_grid_search, knn_predict_all, stats_pool, train_linear, uar,
    KnnConfig, LinearTrainConfig, Reference, Task,
};
use calltok::corpus::{generate_synthetic, Corpus, PaddingMode, Split, SynthConfig};
use calltok::seed::{config_hash, rng_for, Provenance};
use calltok::seqdist::{category_means, pairwise_matrix, DistanceKind, PairCategory};
use calltok::tokens::{tokenize_corpus, verify_ordering, TokenFile, TokenHeader};
use calltok::trainer::{grid_search, GridSpec, TrainConfig};
use calltok::CodebookInit;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::svg::{Chart, Series};

pub const THREADS_ENV: &str = "CALLTOK_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<calltok::Error> for CliError {
    fn from(e: calltok::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub type CliResult<T> = Result<T, CliError>;

/// Everything a run needs. Loaded from `--config`, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub vq_tokens: Option<PathBuf>,
    pub gvq_tokens: Option<PathBuf>,
    pub seed: u64,
    pub quantizer: QuantizerKind,
    pub distance: DistanceKind,
    pub layers: Option<Vec<usize>>,
    pub padding: PaddingMode,
    pub single_point: bool,
    pub dump_matrix: bool,
    pub shuffle_labels: bool,
    pub linear_learning_rates: Vec<f64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_root: None,
            manifest: None,
            output_dir: None,
            checkpoint: None,
            tokens: None,
            vq_tokens: None,
            gvq_tokens: None,
            seed: 7,
            quantizer: QuantizerKind::Vq,
            distance: DistanceKind::Normalized,
            layers: None,
            padding: PaddingMode::Unpadded,
            single_point: false,
            dump_matrix: false,
            shuffle_labels: false,
            linear_learning_rates: LinearTrainConfig::default().learning_rates,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const PATH_KEYS: [&str; 7] = [
    "corpus_root",
    "manifest",
    "output_dir",
    "checkpoint",
    "tokens",
    "vq_tokens",
    "gvq_tokens",
];

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    /// The single seed drives every component.
    fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        c.train.quantizer_kind = c.quantizer;
        c
    }

    /// Hash of the canonical JSON of the config with all paths removed.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self.resolved()).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for key in PATH_KEYS {
                map.remove(key);
            }
        }
        config_hash(&value)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.config_hash(),
        }
    }

    fn output_dir(&self) -> CliResult<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| invalid("no output directory given (--out)"))
    }

    fn corpus_paths(&self) -> CliResult<(PathBuf, PathBuf)> {
        let root = self
            .corpus_root
            .clone()
            .ok_or_else(|| invalid("no corpus root given (--corpus)"))?;
        if !root.is_dir() {
            return Err(invalid(format!(
                "corpus root {} is not a directory",
                root.display()
            )));
        }
        let manifest = self
            .manifest
            .clone()
            .unwrap_or_else(|| root.join("manifest.json"));
        require_file(&manifest, "manifest")?;
        Ok((root, manifest))
    }

    fn load_corpus(&self) -> CliResult<Corpus<f32>> {
        let (root, manifest) = self.corpus_paths()?;
        Ok(Corpus::load(&root, &manifest, self.padding)?)
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!(
            "{what} not found: expected {}",
            path.display()
        )))
    }
}

/// Create (if needed) and check the output directory before anything is
/// written.
fn prepare_output_dir(path: &Path) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(invalid("output directory path is empty"));
    }
    if path.exists() && !path.is_dir() {
        return Err(invalid(format!(
            "output path {} exists and is not a directory",
            path.display()
        )));
    }
    fs::create_dir_all(path).map_err(|e| {
        invalid(format!(
            "cannot create output directory {}: {e}",
            path.display()
        ))
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// What a command wrote, plus human-readable status lines.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub messages: Vec<String>,
}

impl Outcome {
    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        write_file(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }
}

#[derive(Serialize)]
struct ProvenanceFile<'a> {
    command: &'a str,
    seed: u64,
    config_hash: &'a str,
    config: &'a RunConfig,
}

fn provenance_json(command: &str, config: &RunConfig) -> String {
    let mut c = config.resolved();
    c.corpus_root = None;
    c.manifest = None;
    c.output_dir = None;
    c.checkpoint = None;
    c.tokens = None;
    c.vq_tokens = None;
    c.gvq_tokens = None;
    let hash = config.config_hash();
    let mut s = serde_json::to_string_pretty(&ProvenanceFile {
        command,
        seed: config.seed,
        config_hash: &hash,
        config: &c,
    })
    .expect("provenance serializes");
    s.push('\n');
    s
}

pub fn cmd_synth(config: &RunConfig) -> CliResult<Outcome> {
    let config = config.resolved();
    let out_dir = config.output_dir()?.to_path_buf();
    config.synth.validate()?;
    let corpus = generate_synthetic(&config.synth)?;
    prepare_output_dir(&out_dir)?;
    let manifest = corpus.write(&out_dir)?;
    let mut out = Outcome::default();
    out.written.push(manifest.clone());
    out.written.extend(
        corpus
            .manifest
            .records
            .iter()
            .map(|r| out_dir.join(&r.embedding_path)),
    );
    out.write(
        out_dir.join("provenance.json"),
        provenance_json("synth", &config),
    )?;
    out.messages.push(format!(
        "wrote {} samples to {}",
        corpus.manifest.records.len(),
        manifest.display()
    ));
    Ok(out)
}

fn default_checkpoint(config: &RunConfig) -> CliResult<PathBuf> {
    match &config.checkpoint {
        Some(p) => Ok(p.clone()),
        None => Ok(config
            .output_dir()?
            .join(format!("{}.ckpt", config.quantizer.as_str()))),
    }
}

fn default_tokens(config: &RunConfig, kind: QuantizerKind) -> CliResult<PathBuf> {
    Ok(config
        .output_dir()?
        .join(format!("tokens_{}.jsonl", kind.as_str())))
}

pub fn cmd_train(config: &RunConfig) -> CliResult<Outcome> {
    let config = config.resolved();
    let out_dir = config.output_dir()?.to_path_buf();
    config.train.validate()?;
    let ckpt_path = default_checkpoint(&config)?;
    let corpus = config.load_corpus()?;
    let grid = if config.single_point {
        GridSpec::single(&config.train)
    } else {
        GridSpec::for_kind(config.quantizer)
    };
    let search = grid_search(&corpus, &grid, &config.train)?;
    prepare_output_dir(&out_dir)?;
    let provenance = config.provenance();
    let kind = config.quantizer.as_str();
    let mut out = Outcome::default();
    out.write(
        out_dir.join(format!("grid_{kind}.csv")),
        search.to_csv(&provenance),
    )?;
    let checkpoint = Checkpoint {
        model: search.best.model.clone(),
        config_hash: provenance.config_hash.clone(),
        seed: provenance.seed,
    };
    let hash = checkpoint.write(&ckpt_path)?;
    out.written.push(ckpt_path.clone());
    #[derive(Serialize)]
    struct History<'a> {
        seed: u64,
        config_hash: &'a str,
        selected_grid_id: usize,
        config: &'a TrainConfig,
        history: &'a calltok::TrainHistory,
    }
    let mut history = serde_json::to_string_pretty(&History {
        seed: provenance.seed,
        config_hash: &provenance.config_hash,
        selected_grid_id: search.selected,
        config: &search.best.config,
        history: &search.best.history,
    })
    .expect("history serializes");
    history.push('\n');
    out.write(out_dir.join(format!("history_{kind}.json")), history)?;
    let failed = search.results.iter().filter(|r| r.outcome.is_err()).count();
    out.messages.push(format!(
        "trained {} grid points ({failed} failed); selected point {}; checkpoint {} ({hash})",
        search.results.len(),
        search.selected,
        ckpt_path.display()
    ));
    Ok(out)
}

pub fn cmd_tokenize(config: &RunConfig) -> CliResult<Outcome> {
    let config = config.resolved();
    let out_dir = config.output_dir()?.to_path_buf();
    let ckpt_path = default_checkpoint(&config)?;
    require_file(&ckpt_path, "checkpoint")?;
    let corpus = config.load_corpus()?;
    let (checkpoint, ckpt_hash) = Checkpoint::read(&ckpt_path)?;
    let kind = checkpoint.model.kind();
    let layers: Vec<usize> = match &config.layers {
        Some(sel) => {
            let mut sel = sel.clone();
            sel.sort_unstable();
            sel.dedup();
            sel
        }
        None => (0..corpus.layers()).collect(),
    };
    let sequences = tokenize_corpus(&corpus, &checkpoint.model, Some(&layers))?;
    let provenance = config.provenance();
    let file = TokenFile {
        header: Some(TokenHeader {
            vocab_size: calltok::Quantizer::vocab_size(&checkpoint.model),
            num_layers: corpus.layers(),
            layers,
            checkpoint_hash: ckpt_hash,
            seed: Some(provenance.seed),
            config_hash: Some(provenance.config_hash.clone()),
        }),
        sequences,
    };
    let report = verify_ordering(&corpus.manifest, &file);
    if !report.passed {
        return Err(CliError::Runtime(format!(
            "token ordering check failed: {report}"
        )));
    }
    let path = match &config.tokens {
        Some(p) => p.clone(),
        None => default_tokens(&config, kind)?,
    };
    prepare_output_dir(&out_dir)?;
    let mut out = Outcome::default();
    out.write(path.clone(), file.to_jsonl())?;
    out.messages.push(format!("{report}"));
    out.messages.push(format!(
        "wrote {} sequences to {}",
        file.sequences.len(),
        path.display()
    ));
    Ok(out)
}

fn read_tokens(path: &Path) -> CliResult<TokenFile> {
    if !path.is_file() {
        return Err(invalid(format!(
            "token file not found: expected {} (run `calltok tokenize` first)",
            path.display()
        )));
    }
    Ok(TokenFile::read(path)?)
}

fn token_stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("tokens");
    stem.strip_prefix("tokens_").unwrap_or(stem).to_string()
}

pub fn cmd_dist_report(config: &RunConfig) -> CliResult<Outcome> {
    let config = config.resolved();
    let out_dir = config.output_dir()?.to_path_buf();
    let tokens_path = match &config.tokens {
        Some(p) => p.clone(),
        None => default_tokens(&config, config.quantizer)?,
    };
    let tokens = read_tokens(&tokens_path)?;
    let (_, manifest_path) = config.corpus_paths()?;
    let manifest = calltok::corpus::load_manifest(&manifest_path)?;
    let report_ord = verify_ordering(&manifest, &tokens);
    if !report_ord.passed {
        return Err(invalid(format!(
            "token file does not match the manifest: {report_ord}"
        )));
    }
    let report = category_means(&tokens, &manifest, config.distance)?;
    let matrices = if config.dump_matrix {
        let mut layers = tokens.layers();
        layers.sort_unstable();
        layers
            .into_iter()
            .map(|l| Ok((l, pairwise_matrix(&tokens.layer(l), config.distance)?)))
            .collect::<CliResult<Vec<_>>>()?
    } else {
        Vec::new()
    };

    prepare_output_dir(&out_dir)?;
    let provenance = config.provenance();
    let stem = token_stem(&tokens_path);
    let mut out = Outcome::default();
    out.write(
        out_dir.join(format!("distances_{stem}.csv")),
        report.to_csv(&provenance),
    )?;

    let mut series = Vec::new();
    let mut notes = Vec::new();
    for c in PairCategory::ALL {
        let points: Vec<(f64, f64)> = report
            .layers
            .iter()
            .filter_map(|l| l.categories[c.index()].mean.map(|m| (l.layer as f64, m)))
            .collect();
        if points.is_empty() {
            notes.push(format!("{}: no pairs (omitted)", c.as_str()));
        } else {
            series.push(Series {
                name: c.as_str().to_string(),
                points,
            });
        }
    }
    let y_label = match config.distance {
        DistanceKind::Normalized => "mean normalized Levenshtein distance",
        DistanceKind::Raw => "mean Levenshtein distance",
    };
    let title = format!("Layer-wise pair distances ({stem})");
    let chart = Chart {
        title: &title,
        x_label: "layer",
        y_label,
        series,
        notes,
    };
    out.write(
        out_dir.join(format!("distances_{stem}.svg")),
        chart.render(&provenance),
    )?;
    for (layer, m) in &matrices {
        out.write(
            out_dir.join(format!("distances_{stem}_layer{layer}.cdst")),
            m.to_dump_bytes(),
        )?;
    }
    out.messages.push(format!(
        "distance report over {} layers written to {}",
        report.layers.len(),
        out_dir.display()
    ));
    Ok(out)
}

/// One evaluated (task, layer, method) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScore {
    pub task: Task,
    pub layer: usize,
    pub method: String,
    pub knn: Option<KnnConfig>,
    pub val_uar: f64,
    pub test_uar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: Task,
    pub n_classes: usize,
    pub chance: f64,
    /// `(best layer by val UAR, test UAR)` per method.
    pub linear: Option<(usize, f64)>,
    pub vq: Option<(usize, f64)>,
    pub gvq: Option<(usize, f64)>,
}

impl SummaryRow {
    pub fn delta(&self, token: Option<(usize, f64)>) -> Option<f64> {
        let (_, base) = self.linear?;
        delta_drop(base, token?.1).ok()
    }
}

#[derive(Debug, Default)]
pub struct ClassifyOutcome {
    pub scores: Vec<LayerScore>,
    pub summary: Vec<SummaryRow>,
    pub outcome: Outcome,
}

fn task_labels(corpus: &Corpus<f32>, task: Task) -> (Vec<usize>, usize) {
    let m = &corpus.manifest;
    match task {
        Task::Ctid => (
            m.records.iter().map(|r| r.calltype_label).collect(),
            m.n_calltype,
        ),
        Task::Clid => (
            m.records.iter().map(|r| r.caller_label).collect(),
            m.n_caller,
        ),
    }
}

/// Labels per task, with train and val labels permuted when the shuffled
/// control is requested.
fn labels_for(corpus: &Corpus<f32>, task: Task, config: &RunConfig) -> (Vec<usize>, usize) {
    let (mut labels, n) = task_labels(corpus, task);
    if config.shuffle_labels {
        for split in [Split::Train, Split::Val] {
            let idx = corpus.split_indices(split);
            let mut vals: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            vals.shuffle(&mut rng_for(
                config.seed,
                &format!("shuffle/{}/{}", task.as_str(), split.as_str()),
            ));
            for (i, v) in idx.into_iter().zip(vals) {
                labels[i] = v;
            }
        }
    }
    (labels, n)
}

fn knn_scores(
    corpus: &Corpus<f32>,
    tokens: &TokenFile,
    method: &str,
    config: &RunConfig,
) -> CliResult<Vec<LayerScore>> {
    let mut layers = tokens.layers();
    layers.sort_unstable();
    let jobs: Vec<(Task, usize)> = Task::ALL
        .iter()
        .flat_map(|&t| layers.iter().map(move |&l| (t, l)))
        .collect();
    let train_idx = corpus.split_indices(Split::Train);
    let val_idx = corpus.split_indices(Split::Val);
    let test_idx = corpus.split_indices(Split::Test);
    jobs.par_iter()
        .map(|&(task, layer)| {
            let (labels, n) = labels_for(corpus, task, config);
            let seqs = tokens.layer(layer);
            let refs = |idx: &[usize]| -> Vec<Reference<'_>> {
                idx.iter()
                    .map(|&i| Reference {
                        tokens: &seqs[i].tokens,
                        label: labels[i],
                    })
                    .collect()
            };
            let train = refs(&train_idx);
            let val = refs(&val_idx);
            let search = knn_grid_search(&train, &val, task, n, config.distance)?;
            let queries: Vec<&[u16]> = test_idx.iter().map(|&i| &seqs[i].tokens[..]).collect();
            let preds = knn_predict_all(&queries, &train, &search.best, config.distance)?;
            let truths: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
            Ok(LayerScore {
                task,
                layer,
                method: method.to_string(),
                knn: Some(search.best),
                val_uar: search.val_uar,
                test_uar: uar(&preds, &truths, n)?,
            })
        })
        .collect()
}

fn linear_scores(
    corpus: &Corpus<f32>,
    layers: &[usize],
    config: &RunConfig,
) -> CliResult<Vec<LayerScore>> {
    let jobs: Vec<(Task, usize)> = Task::ALL
        .iter()
        .flat_map(|&t| layers.iter().map(move |&l| (t, l)))
        .collect();
    let features: Vec<Vec<Vec<f64>>> = layers
        .par_iter()
        .map(|&l| {
            corpus
                .samples
                .iter()
                .map(|s| {
                    stats_pool(&s.tensor, l, s.effective_frames)
                        .map(|f| f.into_iter().map(f64::from).collect())
                })
                .collect::<calltok::Result<Vec<Vec<f64>>>>()
        })
        .collect::<calltok::Result<_>>()?;
    let idx = |s| corpus.split_indices(s);
    let (train_idx, val_idx, test_idx) = (idx(Split::Train), idx(Split::Val), idx(Split::Test));
    jobs.par_iter()
        .map(|&(task, layer)| {
            let (labels, n) = labels_for(corpus, task, config);
            let feats = &features[layers
                .iter()
                .position(|&l| l == layer)
                .expect("layer listed")];
            let pick = |ids: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                (
                    ids.iter().map(|&i| feats[i].clone()).collect(),
                    ids.iter().map(|&i| labels[i]).collect(),
                )
            };
            let (tx, ty) = pick(&train_idx);
            let (vx, vy) = pick(&val_idx);
            let (sx, sy) = pick(&test_idx);
            let cfg = LinearTrainConfig {
                learning_rates: config.linear_learning_rates.clone(),
                seed: config.seed,
                ..LinearTrainConfig::default()
            };
            let probe = train_linear((&tx, &ty), (&vx, &vy), n, layer, &cfg)?;
            let preds: Vec<usize> = sx.iter().map(|x| probe.predict(x)).collect();
            Ok(LayerScore {
                task,
                layer,
                method: "linear".to_string(),
                knn: None,
                val_uar: probe.val_uar,
                test_uar: uar(&preds, &sy, n)?,
            })
        })
        .collect()
}

fn best_layer(scores: &[LayerScore], task: Task, method: &str) -> Option<(usize, f64)> {
    let mut best: Option<&LayerScore> = None;
    for s in scores
        .iter()
        .filter(|s| s.task == task && s.method == method)
    {
        if best.is_none_or(|b| s.val_uar > b.val_uar) {
            best = Some(s);
        }
    }
    best.map(|s| (s.layer, s.test_uar))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

pub fn cmd_classify(config: &RunConfig) -> CliResult<ClassifyOutcome> {
    let config = config.resolved();
    let out_dir = config.output_dir()?.to_path_buf();
    let token_paths: Vec<(QuantizerKind, PathBuf)> = match (&config.vq_tokens, &config.gvq_tokens) {
        (None, None) => vec![
            (
                QuantizerKind::Vq,
                default_tokens(&config, QuantizerKind::Vq)?,
            ),
            (
                QuantizerKind::Gvq,
                default_tokens(&config, QuantizerKind::Gvq)?,
            ),
        ],
        (vq, gvq) => [(QuantizerKind::Vq, vq), (QuantizerKind::Gvq, gvq)]
            .into_iter()
            .filter_map(|(k, p)| p.clone().map(|p| (k, p)))
            .collect(),
    };
    let token_files = token_paths
        .iter()
        .map(|(k, p)| Ok((*k, read_tokens(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let corpus = config.load_corpus()?;
    for (k, file) in &token_files {
        let report = verify_ordering(&corpus.manifest, file);
        if !report.passed {
            return Err(invalid(format!(
                "{} token file does not match the manifest: {report}",
                k.as_str()
            )));
        }
    }
    let layers: Vec<usize> = config
        .layers
        .clone()
        .unwrap_or_else(|| (0..corpus.layers()).collect());
    if let Some(&l) = layers.iter().find(|&&l| l >= corpus.layers()) {
        return Err(invalid(format!(
            "layer {l} outside [0, {})",
            corpus.layers()
        )));
    }

    let mut scores = linear_scores(&corpus, &layers, &config)?;
    for (k, file) in &token_files {
        scores.extend(knn_scores(&corpus, file, k.as_str(), &config)?);
    }

    let summary: Vec<SummaryRow> = Task::ALL
        .iter()
        .map(|&task| {
            let n = task_labels(&corpus, task).1;
            SummaryRow {
                task,
                n_classes: n,
                chance: chance_level(n),
                linear: best_layer(&scores, task, "linear"),
                vq: best_layer(&scores, task, "vq"),
                gvq: best_layer(&scores, task, "gvq"),
            }
        })
        .collect();

    prepare_output_dir(&out_dir)?;
    let provenance = config.provenance();
    let dataset = &corpus.manifest.dataset_name;
    let mut out = Outcome::default();

    let mut csv =
        String::from("task,dataset,layer,method,k,weighting,split,uar,seed,config_hash\n");
    for s in &scores {
        let (k, w) = s.knn.map_or(("NA".to_string(), "NA"), |c| {
            (c.k.to_string(), c.weighting.as_str())
        });
        for (split, value) in [("val", s.val_uar), ("test", s.test_uar)] {
            let _ = writeln!(
                csv,
                "{},{dataset},{},{},{k},{w},{split},{value:.2},{},{}",
                s.task.as_str(),
                s.layer,
                s.method,
                provenance.seed,
                provenance.config_hash
            );
        }
    }
    out.write(out_dir.join("uar_layers.csv"), csv)?;

    let mut table = String::from(
        "task,dataset,n_C,chance,linear,vq,gvq,delta_vq,delta_gvq,linear_layer,vq_layer,gvq_layer,linear_standardized,label_shuffle,seed,config_hash\n",
    );
    for r in &summary {
        let layer =
            |v: Option<(usize, f64)>| v.map_or_else(|| "NA".to_string(), |x| x.0.to_string());
        let _ = writeln!(
            table,
            "{},{dataset},{},{:.2},{},{},{},{},{},{},{},{},true,{},{},{}",
            r.task.as_str(),
            r.n_classes,
            r.chance,
            fmt_opt(r.linear.map(|x| x.1)),
            fmt_opt(r.vq.map(|x| x.1)),
            fmt_opt(r.gvq.map(|x| x.1)),
            fmt_opt(r.delta(r.vq)),
            fmt_opt(r.delta(r.gvq)),
            layer(r.linear),
            layer(r.vq),
            layer(r.gvq),
            config.shuffle_labels,
            provenance.seed,
            provenance.config_hash
        );
    }
    out.write(out_dir.join("summary.csv"), table)?;

    for task in Task::ALL {
        let mut series = Vec::new();
        for method in ["linear", "vq", "gvq"] {
            let points: Vec<(f64, f64)> = scores
                .iter()
                .filter(|s| s.task == task && s.method == method)
                .map(|s| (s.layer as f64, s.test_uar))
                .collect();
            if !points.is_empty() {
                series.push(Series {
                    name: method.to_string(),
                    points,
                });
            }
        }
        let n = task_labels(&corpus, task).1;
        let title = format!("Layer-wise test UAR, {}", task.as_str());
        let chart = Chart {
            title: &title,
            x_label: "layer",
            y_label: "UAR [%]",
            series,
            notes: vec![format!("chance {:.2}", chance_level(n))],
        };
        let name = format!("uar_{}.svg", task.as_str().to_lowercase());
        out.write(out_dir.join(name), chart.render(&provenance))?;
    }
    for r in &summary {
        out.messages.push(format!(
            "{}: chance {:.2}, linear {}, vq {}, gvq {}",
            r.task.as_str(),
            r.chance,
            fmt_opt(r.linear.map(|x| x.1)),
            fmt_opt(r.vq.map(|x| x.1)),
            fmt_opt(r.gvq.map(|x| x.1))
        ));
    }
    Ok(ClassifyOutcome {
        scores,
        summary,
        outcome: out,
    })
}

/// Worker count from `CALLTOK_THREADS` (`0` or unset = automatic).
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| {
            invalid(format!(
                "{THREADS_ENV} must be a non-negative integer, got {v:?}"
            ))
        }),
    }
}

/// Run `f` inside a dedicated pool of `threads` workers (`0` = automatic).
pub fn run_with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Parser, Debug)]
#[command(
    name = "calltok",
    version,
    about = "Tokenize vocalization embeddings and evaluate the tokens"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Grid-search and train a quantizer.
    Train(TrainArgs),
    /// Tokenize a corpus with a trained checkpoint.
    Tokenize(TokenizeArgs),
    /// Layer-wise pair-category distance report.
    DistReport(DistArgs),
    /// k-NN and linear-probe classification.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus root directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Manifest path (default: <corpus>/manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Embeddings were extracted in manifest-order batches of this size.
    #[arg(long)]
    pub padding_batch: Option<usize>,
}

impl CommonArgs {
    fn base(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.corpus {
            c.corpus_root = Some(p.clone());
        }
        if let Some(p) = &self.manifest {
            c.manifest = Some(p.clone());
        }
        if let Some(p) = &self.out {
            c.output_dir = Some(p.clone());
        }
        if let Some(b) = self.padding_batch {
            c.padding = PaddingMode::Batched { batch_size: b };
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Vq,
    Gvq,
}

impl From<KindArg> for QuantizerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Vq => QuantizerKind::Vq,
            KindArg::Gvq => QuantizerKind::Gvq,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TemperatureArg {
    Schedule,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Random,
    KmeansPp,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n_calltype: Option<usize>,
    #[arg(long)]
    pub n_caller: Option<usize>,
    #[arg(long)]
    pub samples_per_pair: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Repeat-pad embedding files in manifest-order batches of this size.
    #[arg(long)]
    pub extraction_batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub quantizer: Option<KindArg>,
    /// Train only the configured point instead of the full grid.
    #[arg(long)]
    pub single_point: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub ema: Option<bool>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub diversity_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub temperature_mode: Option<TemperatureArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Checkpoint path (default: <out>/<quantizer>.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub quantizer: Option<KindArg>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated layer subset, e.g. `0,2`.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Token file to write (default: <out>/tokens_<quantizer>.jsonl).
    #[arg(long)]
    pub tokens: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub quantizer: Option<KindArg>,
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Use raw instead of length-normalized Levenshtein distance.
    #[arg(long)]
    pub raw: bool,
    /// Also write every per-layer distance matrix.
    #[arg(long)]
    pub dump_matrix: bool,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub vq_tokens: Option<PathBuf>,
    #[arg(long)]
    pub gvq_tokens: Option<PathBuf>,
    #[arg(long)]
    pub raw: bool,
    /// Permute train/val labels (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
}

impl Command {
    /// The effective run config: `--config` file (if any) overridden by flags.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        match self {
            Command::Synth(a) => {
                let mut c = a.common.base()?;
                let s = &mut c.synth;
                if let Some(v) = a.n_calltype {
                    s.n_calltype = v;
                }
                if let Some(v) = a.n_caller {
                    s.n_caller = v;
                }
                if let Some(v) = a.samples_per_pair {
                    s.samples_per_pair = v;
                }
                if let Some(v) = a.layers {
                    s.layers = v;
                }
                if let Some(v) = a.dim {
                    s.dim = v;
                }
                if let Some(v) = a.noise {
                    s.noise_scale = v;
                }
                if let Some(v) = a.extraction_batch {
                    s.extraction_batch = Some(v);
                }
                Ok(c)
            }
            Command::Train(a) => {
                let mut c = a.common.base()?;
                if let Some(k) = a.quantizer {
                    c.quantizer = k.into();
                }
                c.single_point |= a.single_point;
                if let Some(p) = &a.checkpoint {
                    c.checkpoint = Some(p.clone());
                }
                let t = &mut c.train;
                if let Some(v) = a.lr {
                    t.learning_rate = v;
                }
                if let Some(v) = a.ema {
                    t.vq.ema = v;
                }
                if let Some(v) = a.vocab_size {
                    t.vocab_size = v;
                }
                if let Some(v) = a.epochs {
                    t.max_epochs = v;
                }
                if let Some(v) = a.batch_size {
                    t.batch_size = v;
                }
                if let Some(v) = a.kl_weight {
                    t.gvq.kl_weight = v;
                }
                if let Some(v) = a.diversity_weight {
                    t.gvq.diversity_weight = v;
                }
                if let Some(m) = a.temperature_mode {
                    t.gvq.temperature.mode = match m {
                        TemperatureArg::Schedule => calltok::TemperatureMode::Schedule,
                        TemperatureArg::Constant => calltok::TemperatureMode::Constant,
                    };
                }
                if let Some(i) = a.init {
                    t.vq.init = match i {
                        InitArg::Random => CodebookInit::RandomFrames,
                        InitArg::KmeansPp => CodebookInit::KMeansPlusPlus,
                    };
                }
                Ok(c)
            }
            Command::Tokenize(a) => {
                let mut c = a.common.base()?;
                if let Some(k) = a.quantizer {
                    c.quantizer = k.into();
                }
                if let Some(p) = &a.checkpoint {
                    c.checkpoint = Some(p.clone());
                }
                if let Some(l) = &a.layers {
                    c.layers = Some(l.clone());
                }
                if let Some(p) = &a.tokens {
                    c.tokens = Some(p.clone());
                }
                Ok(c)
            }
            Command::DistReport(a) => {
                let mut c = a.common.base()?;
                if let Some(k) = a.quantizer {
                    c.quantizer = k.into();
                }
                if let Some(p) = &a.tokens {
                    c.tokens = Some(p.clone());
                }
                if a.raw {
                    c.distance = DistanceKind::Raw;
                }
                c.dump_matrix |= a.dump_matrix;
                Ok(c)
            }
            Command::Classify(a) => {
                let mut c = a.common.base()?;
                if let Some(p) = &a.vq_tokens {
                    c.vq_tokens = Some(p.clone());
                }
                if let Some(p) = &a.gvq_tokens {
                    c.gvq_tokens = Some(p.clone());
                }
                if a.raw {
                    c.distance = DistanceKind::Raw;
                }
                c.shuffle_labels |= a.shuffle_labels;
                if let Some(l) = &a.layers {
                    c.layers = Some(l.clone());
                }
                Ok(c)
            }
        }
    }

    pub fn execute(&self) -> CliResult<Vec<String>> {
        let config = self.run_config()?;
        let out = match self {
            Command::Synth(_) => cmd_synth(&config)?,
            Command::Train(_) => cmd_train(&config)?,
            Command::Tokenize(_) => cmd_tokenize(&config)?,
            Command::DistReport(_) => cmd_dist_report(&config)?,
            Command::Classify(_) => cmd_classify(&config)?.outcome,
        };
        Ok(out.messages)
    }
}

/// Parse-free entry point used by `main`: honours `CALLTOK_THREADS`.
pub fn run(cli: Cli) -> CliResult<Vec<String>> {
    let threads = threads_from_env()?;
    run_with_threads(threads, || cli.command.execute())?
}
