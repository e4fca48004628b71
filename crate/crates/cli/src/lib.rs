//! Command-line driver: option parsing, config files, and artifact writing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use shapeclust::candidates::DEFAULT_RATIOS;
use shapeclust::cluster::{nmi, rand_index};
use shapeclust::data::{load_dataset, Dataset, Format};
use shapeclust::distance::{match_locations, transform};
use shapeclust::losses::loss_log_csv;
use shapeclust::pipeline::{cluster_dataset, discover_shapelets, Clustering, TrainConfig, DEFAULT_RESTARTS};
use shapeclust::shapelet::{load_shapelets, save_shapelets, Shapelet};
use shapeclust::Error;

pub const SWEEP_KS: [usize; 5] = [1, 2, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Learn shapelets, cluster, and write every artifact.
    Train,
    /// Distance matrix of the dataset against a shapelet dump.
    Transform,
    /// NMI and RI of stored assignments against dataset labels.
    Evaluate,
    /// Train and cluster once per shapelet count in {1, 2, 5, 10, 20}.
    Sweep,
}

const CONFIG_HELP: &str = "\
CONFIG FILE:
  A flat text file of `key = value` lines; `#` starts a comment. Keys are the
  long flag names without dashes, e.g.

    dataset = data/Coffee.tsv
    mode = train
    k = 2
    ratios = 0.1,0.2,0.3
    no-dbi = true

  Flags given on the command line override the file; the file overrides
  built-in defaults.

ENVIRONMENT:
  SHAPECLUST_THREADS   worker thread count (default: all cores)
  RUST_LOG             log filter, e.g. info or debug

ERRORS:
  Failures print one line `error[CODE]: message` on stderr and exit nonzero.";

/// Unsupervised shapelet discovery and clustering for time series.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "shapeclust", version, after_help = CONFIG_HELP)]
pub struct Cli {
    /// Dataset file (UCR .tsv or UEA .ts)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset format; inferred from the extension when omitted
    #[arg(long, value_parser = parse_format)]
    pub format: Option<Format>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Number of shapelets
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated candidate length ratios
    #[arg(long)]
    pub ratios: Option<String>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Gradient steps per epoch
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    /// Seed for every random choice in the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the triplet loss
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Smooth-max temperature
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train without the triplet loss
    #[arg(long)]
    pub no_triplet: bool,
    /// Train without the diversity loss
    #[arg(long)]
    pub no_diversity: bool,
    /// Train without the Davies-Bouldin loss
    #[arg(long)]
    pub no_dbi: bool,
    /// K-means restarts for the final clustering
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Cluster count; defaults to the number of classes in the labels
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Shapelet dump for transform mode
    #[arg(long)]
    pub shapelets: Option<PathBuf>,
    /// Assignment CSV for evaluate mode
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    /// Config file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse::<Format>().map_err(|e| e.to_string())
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(serialize_with = "ser_format")]
    pub format: Format,
    pub mode: Mode,
    pub out: PathBuf,
    pub clusters: Option<usize>,
    pub restarts: usize,
    pub shapelets: Option<PathBuf>,
    pub assignments: Option<PathBuf>,
    pub train: TrainConfig,
}

fn ser_format<S: serde::Serializer>(f: &Format, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(f.name())
}

fn config_err(message: impl Into<String>) -> anyhow::Error {
    Error::Config(message.into()).into()
}

pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_err(format!("config line {}: expected `key = value`", i + 1)));
        };
        let key = key.trim().replace('_', "-");
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn parse_ratios(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| config_err(format!("bad length ratio `{t}`")))
        })
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(config_err(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

/// Apply config-file entries to fields the command line left unset.
fn fill_from_file(cli: &mut Cli, file: BTreeMap<String, String>) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| config_err(format!("config key `{key}`: cannot parse `{v}`")))
    }
    for (key, v) in file {
        let v = v.as_str();
        match key.as_str() {
            "dataset" => {
                cli.dataset.get_or_insert_with(|| PathBuf::from(v));
            }
            "format" => {
                if cli.format.is_none() {
                    cli.format = Some(parse_format(v).map_err(config_err)?);
                }
            }
            "mode" => {
                if cli.mode.is_none() {
                    cli.mode = Some(Mode::from_str(v, true).map_err(|_| config_err(format!("unknown mode `{v}`")))?);
                }
            }
            "k" => {
                if cli.k.is_none() {
                    cli.k = Some(num(&key, v)?);
                }
            }
            "ratios" => {
                cli.ratios.get_or_insert_with(|| v.to_string());
            }
            "epochs" => {
                if cli.epochs.is_none() {
                    cli.epochs = Some(num(&key, v)?);
                }
            }
            "batches-per-epoch" => {
                if cli.batches_per_epoch.is_none() {
                    cli.batches_per_epoch = Some(num(&key, v)?);
                }
            }
            "seed" => {
                if cli.seed.is_none() {
                    cli.seed = Some(num(&key, v)?);
                }
            }
            "lr" => {
                if cli.lr.is_none() {
                    cli.lr = Some(num(&key, v)?);
                }
            }
            "lambda" => {
                if cli.lambda.is_none() {
                    cli.lambda = Some(num(&key, v)?);
                }
            }
            "alpha" => {
                if cli.alpha.is_none() {
                    cli.alpha = Some(num(&key, v)?);
                }
            }
            "out" => {
                cli.out.get_or_insert_with(|| PathBuf::from(v));
            }
            "no-triplet" => cli.no_triplet |= parse_bool(&key, v)?,
            "no-diversity" => cli.no_diversity |= parse_bool(&key, v)?,
            "no-dbi" => cli.no_dbi |= parse_bool(&key, v)?,
            "restarts" => {
                if cli.restarts.is_none() {
                    cli.restarts = Some(num(&key, v)?);
                }
            }
            "clusters" => {
                if cli.clusters.is_none() {
                    cli.clusters = Some(num(&key, v)?);
                }
            }
            "shapelets" => {
                cli.shapelets.get_or_insert_with(|| PathBuf::from(v));
            }
            "assignments" => {
                cli.assignments.get_or_insert_with(|| PathBuf::from(v));
            }
            other => return Err(config_err(format!("unknown config key `{other}`"))),
        }
    }
    Ok(())
}

impl RunConfig {
    /// Merge flags, the optional config file, and defaults, then validate.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cli = cli.clone();
        if let Some(path) = cli.config.clone() {
            let text = fs::read_to_string(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            fill_from_file(&mut cli, parse_config_file(&text)?)?;
        }
        let dataset = cli
            .dataset
            .clone()
            .ok_or_else(|| config_err("--dataset is required"))?;
        let format = cli.format.unwrap_or_else(|| Format::from_path(&dataset));
        let mode = cli.mode.unwrap_or(Mode::Train);
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: cli.epochs.unwrap_or(defaults.epochs),
            batches_per_epoch: cli.batches_per_epoch.unwrap_or(defaults.batches_per_epoch),
            learning_rate: cli.lr.unwrap_or(defaults.learning_rate),
            lambda: cli.lambda.unwrap_or(defaults.lambda),
            k: cli.k.unwrap_or(defaults.k),
            ratios: match &cli.ratios {
                Some(r) => parse_ratios(r)?,
                None => DEFAULT_RATIOS.to_vec(),
            },
            alpha: cli.alpha.unwrap_or(defaults.alpha),
            seed: cli.seed.unwrap_or(defaults.seed),
            use_triplet: !cli.no_triplet,
            use_diversity: !cli.no_diversity,
            use_dbi: !cli.no_dbi,
            ..defaults
        };
        let config = Self {
            dataset,
            format,
            mode,
            out: cli.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            clusters: cli.clusters,
            restarts: cli.restarts.unwrap_or(DEFAULT_RESTARTS),
            shapelets: cli.shapelets.clone(),
            assignments: cli.assignments.clone(),
            train,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Transform if self.shapelets.is_none() => {
                return Err(config_err("transform mode requires --shapelets"));
            }
            Mode::Evaluate if self.assignments.is_none() => {
                return Err(config_err("evaluate mode requires --assignments"));
            }
            _ => {}
        }
        if self.restarts == 0 {
            return Err(config_err("--restarts must be at least 1"));
        }
        if self.clusters == Some(0) {
            return Err(config_err("--clusters must be at least 1"));
        }
        if matches!(self.mode, Mode::Train | Mode::Sweep) {
            self.train.validate()?;
        }
        Ok(())
    }

    fn clusters_for(&self, dataset: &Dataset) -> Result<usize> {
        self.clusters
            .or_else(|| dataset.class_count())
            .ok_or_else(|| config_err("the dataset has no labels; pass --clusters"))
    }
}

/// Short machine-readable code for an error chain.
pub fn error_code(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("E_RUNTIME", Error::code)
}

/// One-line `error[CODE]: message` rendering of an error chain, skipping
/// causes already spelled out by their parent.
pub fn error_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', " ");
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    format!("error[{}]: {}", error_code(err), parts.join(": "))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn assignments_csv(dataset: &Dataset, labels: &[usize]) -> String {
    let mut out = String::from("instance,id,cluster\n");
    for (i, (inst, l)) in dataset.instances().iter().zip(labels).enumerate() {
        let _ = writeln!(out, "{i},{},{l}", inst.id());
    }
    out
}

pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<usize>> {
    let bad = |message: String| Error::Artifact {
        path: origin.to_string(),
        message,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("instance,id,cluster") {
        return Err(bad("missing header `instance,id,cluster`".into()).into());
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cluster = line
            .rsplit(',')
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad cluster index", i + 2)))?;
        out.push(cluster);
    }
    Ok(out)
}

/// Shapelet values, one row per point.
pub fn shapelet_series_csv(shapelets: &[Shapelet]) -> String {
    let mut out = String::from("shapelet,variable,t,value\n");
    for (j, s) in shapelets.iter().enumerate() {
        for (t, v) in s.values.iter().enumerate() {
            let _ = writeln!(out, "{j},{},{t},{v}", s.variable);
        }
    }
    out
}

/// Best-match window of every shapelet in every instance, with the class
/// label when known, for overlay plots.
pub fn overlay_csv(dataset: &Dataset, shapelets: &[Shapelet]) -> Result<String> {
    let locations = match_locations(dataset, shapelets)?;
    let labels = dataset.labels();
    let mut out = String::from("instance,label,shapelet,variable,offset,length,distance\n");
    for (i, row) in locations.iter().enumerate() {
        let label = labels.map_or("", |l| l[i].as_str());
        for (j, (m, s)) in row.iter().zip(shapelets).enumerate() {
            let _ = writeln!(
                out,
                "{i},{label},{j},{},{},{},{}",
                s.variable,
                m.offset,
                s.values.len(),
                m.distance
            );
        }
    }
    Ok(out)
}

/// Per-class mean and standard deviation of each channel at every time step.
pub fn class_profiles_csv(dataset: &Dataset) -> String {
    let mut out = String::from("label,variable,t,mean,std\n");
    let labels: Vec<String> = match dataset.labels() {
        Some(l) => l.to_vec(),
        None => vec![String::new(); dataset.len()],
    };
    let classes: std::collections::BTreeSet<&String> = labels.iter().collect();
    for class in classes {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| &labels[i] == class).collect();
        let n = members.len() as f64;
        for v in 0..dataset.variables() {
            for t in 0..dataset.series_len() {
                let xs = members.iter().map(|&i| dataset.instance(i).channel(v)[t]);
                let mean = xs.clone().sum::<f64>() / n;
                let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let _ = writeln!(out, "{class},{v},{t},{mean},{}", var.sqrt());
            }
        }
    }
    out
}

/// Transformed coordinates with cluster and label, for `k <= 2` scatter plots.
pub fn scatter_csv(dataset: &Dataset, clustering: &Clustering) -> String {
    let t = &clustering.transformed;
    let header: Vec<String> = (1..=t.cols()).map(|j| format!("d_{j}")).collect();
    let mut out = format!("instance,{},cluster,label\n", header.join(","));
    for i in 0..t.rows() {
        let coords: Vec<String> = t.row(i).iter().map(f64::to_string).collect();
        let label = dataset.labels().map_or("", |l| l[i].as_str());
        let _ = writeln!(out, "{i},{},{},{label}", coords.join(","), clustering.assignment.labels[i]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub nmi: f64,
    pub ri: f64,
    pub instances: usize,
}

/// Paths written by one run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

impl Artifacts {
    fn put(&mut self, dir: &Path, name: &str, contents: &str) -> Result<()> {
        let path = dir.join(name);
        write(&path, contents)?;
        self.files.push(path);
        Ok(())
    }
}

fn train_and_cluster(config: &RunConfig, dataset: &Dataset, train: &TrainConfig, dir: &Path, artifacts: &mut Artifacts) -> Result<Clustering> {
    let clusters = config.clusters_for(dataset)?;
    let train = TrainConfig {
        dbi_clusters: clusters.max(2),
        ..train.clone()
    };
    let discovery = discover_shapelets(dataset, &train)?;
    let clustering = cluster_dataset(dataset, &discovery.shapelets, clusters, train.seed, config.restarts)?;

    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let shapelet_path = dir.join("shapelets.json");
    save_shapelets(&discovery.shapelets, &shapelet_path)?;
    artifacts.files.push(shapelet_path);
    let model_path = dir.join("model.json");
    discovery.model.save(&model_path)?;
    artifacts.files.push(model_path);
    artifacts.put(dir, "loss_log.csv", &loss_log_csv(&discovery.loss_log))?;
    artifacts.put(dir, "metrics.json", &clustering.metrics.to_json())?;
    artifacts.put(dir, "assignments.csv", &assignments_csv(dataset, &clustering.assignment.labels))?;
    artifacts.put(dir, "transformed.csv", &clustering.transformed.to_csv())?;
    artifacts.put(dir, "shapelet_series.csv", &shapelet_series_csv(&discovery.shapelets))?;
    artifacts.put(dir, "overlay.csv", &overlay_csv(dataset, &discovery.shapelets)?)?;
    artifacts.put(dir, "class_profiles.csv", &class_profiles_csv(dataset))?;
    if discovery.shapelets.len() <= 2 {
        artifacts.put(dir, "scatter.csv", &scatter_csv(dataset, &clustering))?;
    }
    Ok(clustering)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Execute one run and return the files it wrote.
pub fn run(config: &RunConfig) -> Result<Artifacts> {
    let dataset = load_dataset(&config.dataset, config.format)
        .with_context(|| format!("loading {}", config.dataset.display()))?;
    log::info!(
        "{}: {} instances, {} variables, length {}",
        config.dataset.display(),
        dataset.len(),
        dataset.variables(),
        dataset.series_len()
    );
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let mut artifacts = Artifacts::default();
    match config.mode {
        Mode::Train => {
            let c = train_and_cluster(config, &dataset, &config.train, out, &mut artifacts)?;
            log::info!("metrics: {:?}", c.metrics);
        }
        Mode::Sweep => {
            let mut table = String::from("k,nmi,ri,dbi,inertia\n");
            for k in SWEEP_KS {
                let train = TrainConfig {
                    k,
                    provisional_pool: config.train.provisional_pool.max(k),
                    ..config.train.clone()
                };
                let c = train_and_cluster(config, &dataset, &train, &out.join(format!("k{k}")), &mut artifacts)?;
                let m = &c.metrics;
                let _ = writeln!(
                    table,
                    "{k},{},{},{},{}",
                    fmt_opt(m.nmi),
                    fmt_opt(m.ri),
                    fmt_opt(m.dbi),
                    m.inertia
                );
            }
            artifacts.put(out, "sweep.csv", &table)?;
        }
        Mode::Transform => {
            let path = config.shapelets.as_ref().expect("validated");
            let shapelets = load_shapelets(path)?;
            let t = transform(&dataset, &shapelets)?;
            artifacts.put(out, "transformed.csv", &t.to_csv())?;
        }
        Mode::Evaluate => {
            let path = config.assignments.as_ref().expect("validated");
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let pred = parse_assignments(&text, &path.display().to_string())?;
            let Some(truth) = dataset.label_indices() else {
                bail!(Error::InvalidDataset("evaluate mode needs a labeled dataset".into()));
            };
            if pred.len() != truth.len() {
                bail!(Error::Contract(format!(
                    "{} assignments for {} instances",
                    pred.len(),
                    truth.len()
                )));
            }
            let eval = Evaluation {
                nmi: nmi(&pred, &truth)?,
                ri: rand_index(&pred, &truth)?,
                instances: pred.len(),
            };
            artifacts.put(out, "evaluation.json", &serde_json::to_string_pretty(&eval)?)?;
        }
    }
    let resolved = serde_json::to_string_pretty(config)?;
    artifacts.put(out, "run_config.json", &resolved)?;
    Ok(artifacts)
}

/// Size the global worker pool from `SHAPECLUST_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SHAPECLUST_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| config_err(format!("SHAPECLUST_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(config_err("SHAPECLUST_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let m = parse_config_file("# c\nk = 3\nno_dbi = true # x\n\nratios=0.1,0.2\n").unwrap();
        assert_eq!(m["k"], "3");
        assert_eq!(m["no-dbi"], "true");
        assert_eq!(m["ratios"], "0.1,0.2");
        assert!(parse_config_file("oops").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "dataset = a.tsv\nk = 3\nepochs = 7\nno-dbi = yes\n").unwrap();
        let cli = Cli::parse_from(["shapeclust", "--config", path.to_str().unwrap(), "--k", "2"]);
        let c = RunConfig::resolve(&cli).unwrap();
        assert_eq!(c.train.k, 2);
        assert_eq!(c.train.epochs, 7);
        assert!(!c.train.use_dbi);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.format, Format::UcrTsv);
    }

    #[test]
    fn mode_requirements() {
        let cli = Cli::parse_from(["shapeclust", "--dataset", "a.tsv", "--mode", "transform"]);
        let err = RunConfig::resolve(&cli).unwrap_err();
        assert_eq!(error_code(&err), "E_CONFIG");
        let cli = Cli::parse_from(["shapeclust", "--mode", "train"]);
        assert_eq!(error_code(&RunConfig::resolve(&cli).unwrap_err()), "E_CONFIG");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cli = Cli::default();
        let file = parse_config_file("colour = blue").unwrap();
        assert!(fill_from_file(&mut cli, file).is_err());
    }

    #[test]
    fn assignments_round_trip() {
        let text = "instance,id,cluster\n0,a,1\n1,b,0\n";
        assert_eq!(parse_assignments(text, "x").unwrap(), vec![1, 0]);
        assert!(parse_assignments("0,a,1\n", "x").is_err());
    }
}
