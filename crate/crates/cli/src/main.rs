use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use malfam_core::ensemble::predictions_csv;
use malfam_core::forest::NoiseMode;
use malfam_core::ingest::{ingest_corpus, read_labels, AppSample};
use malfam_core::pipeline::{
    self, sweep_csv, write_atomic, CorpusFolds, DatasetFolds, FoldSource, KClusters, DEFAULT_SWEEP,
};
use malfam_core::synth::{write_corpus, SyntheticSpec, LABELS_FILE};
use malfam_core::{Dataset, Error, ModelBundle, PipelineConfig};

#[derive(Parser)]
#[command(name = "malfam", version, about = "Android malware family classification from decompiled apps")]
struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a corpus and write a dataset file
    Extract {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label file (defaults to <corpus>/labels.tsv when present)
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model bundle from a dataset file
    Train {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Predict families for a corpus directory or a dataset file
    Predict {
        model: PathBuf,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Stratified cross-validation; writes report files into --out
    Evaluate {
        /// Corpus directory (fold-local extraction) or dataset file
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-validated accuracy over a range of selected-feature counts
    Sweep {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Comma-separated feature counts; every feature is always added last
        #[arg(long, value_delimiter = ',')]
        top_k_values: Option<Vec<usize>>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a labeled synthetic corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "drebin")]
        preset: Preset,
        /// Total apps (drebin preset) or apps per family (balanced preset)
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        families: usize,
        #[arg(long)]
        signature_size: Option<usize>,
        #[arg(long)]
        signature_presence: Option<f64>,
        #[arg(long)]
        noise_tokens: Option<usize>,
        #[arg(long)]
        noise_per_sample: Option<usize>,
        #[arg(long)]
        label_flip_rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Ten families sized like the largest Drebin families
    Drebin,
    /// Equal-sized families
    Balanced,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Permute,
    Bernoulli,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with pipeline settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    api_vocab_size: Option<usize>,
    #[arg(long)]
    top_k_features: Option<usize>,
    /// A count or "auto"
    #[arg(long)]
    k_clusters: Option<String>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    tree_depth: Option<usize>,
    #[arg(long)]
    boost_rounds: Option<usize>,
    #[arg(long)]
    weak_depth: Option<usize>,
    #[arg(long)]
    n_folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Framework package prefix (repeatable); replaces the default list
    #[arg(long = "api-prefix")]
    api_prefixes: Vec<String>,
    #[arg(long)]
    min_family_support: Option<usize>,
    #[arg(long, value_enum)]
    importance_noise: Option<Noise>,
    #[arg(long)]
    transitive_pairs: bool,
    /// Start from full-scale defaults (API vocabulary of 7000)
    #[arg(long)]
    full_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None if self.full_scale => PipelineConfig::full_scale(),
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(api_vocab_size, top_k_features, n_trees, tree_depth, boost_rounds, weak_depth, n_folds, seed, min_family_support);
        if let Some(k) = &self.k_clusters {
            c.k_clusters = k.parse::<KClusters>()?;
        }
        if !self.api_prefixes.is_empty() {
            c.api_prefixes = self.api_prefixes.clone();
        }
        if let Some(n) = self.importance_noise {
            c.importance_noise = match n {
                Noise::Permute => NoiseMode::Permute,
                Noise::Bernoulli => NoiseMode::Bernoulli,
            };
        }
        c.transitive_pairs |= self.transitive_pairs;
        c.validate()?;
        Ok(c)
    }
}

fn load_corpus(root: &Path, labels: Option<&Path>) -> Result<Vec<AppSample>> {
    let default = root.join(LABELS_FILE);
    let path = labels.map(Path::to_path_buf).or_else(|| default.is_file().then_some(default));
    let labels = match &path {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    let samples = ingest_corpus(root, labels.as_ref())?;
    let labeled = samples.iter().filter(|s| s.family.is_some()).count();
    info!("ingested {} apps ({labeled} labeled) from {}", samples.len(), root.display());
    Ok(samples)
}

fn fold_source(input: &Path, labels: Option<&Path>, config: &PipelineConfig) -> Result<Box<dyn FoldSource>> {
    if input.is_dir() {
        let samples = load_corpus(input, labels)?;
        Ok(Box::new(CorpusFolds::new(&samples, config)?))
    } else {
        let data = Dataset::load(input)?;
        Ok(Box::new(DatasetFolds::new(&data.labeled, config)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract {
            corpus,
            out,
            labels,
            config,
        } => {
            let config = config.resolve()?;
            let samples = load_corpus(&corpus, labels.as_deref())?;
            let data = pipeline::extract(&samples, &config)?;
            data.save(&out)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(
                stdout,
                "samples: {} ({} labeled, {} unlabeled)",
                samples.len(),
                data.labeled.len(),
                data.unlabeled.len()
            )?;
            writeln!(stdout, "api vocabulary: {}", data.vocabulary.len())?;
            writeln!(stdout, "features: {}", data.labeled.dimension())?;
            for (kind, n) in data.labeled.dictionary.count_by_kind() {
                writeln!(stdout, "  {}: {n}", kind.as_str())?;
            }
        }
        Command::Train { dataset, out, config } => {
            let config = config.resolve()?;
            let data = Dataset::load(&dataset)?;
            let bundle = pipeline::train(&data, &config)?;
            bundle.save(&out)?;
            println!(
                "model: {} clusters, {} features, {} families",
                bundle.ensemble.k(),
                bundle.dictionary.len(),
                bundle.families().len()
            );
        }
        Command::Predict {
            model,
            input,
            out,
            labels,
        } => {
            let bundle = ModelBundle::load(&model)?;
            let mut rows = Vec::new();
            let mut truth = Vec::new();
            if input.is_dir() {
                for s in load_corpus(&input, labels.as_deref())? {
                    let (label, scores) = bundle.predict_sample(&s)?;
                    truth.push(s.family.clone().map(|f| (f, label)));
                    rows.push((s.id, label, scores));
                }
            } else {
                let data = Dataset::load(&input)?;
                let dict = &data.labeled.dictionary;
                for r in &data.labeled.rows {
                    let (label, scores) = bundle.predict_foreign(&r.vector, dict)?;
                    truth.push(Some((data.labeled.families[r.label].clone(), label)));
                    rows.push((r.id.clone(), label, scores));
                }
                for (id, v) in &data.unlabeled {
                    let (label, scores) = bundle.predict_foreign(v, dict)?;
                    truth.push(None);
                    rows.push((id.clone(), label, scores));
                }
            }
            write_text(&out, &predictions_csv(bundle.families(), &rows)?)?;
            let known: Vec<bool> = truth
                .iter()
                .flatten()
                .map(|(f, p)| bundle.families()[*p] == *f)
                .collect();
            if !known.is_empty() {
                let hits = known.iter().filter(|&&b| b).count();
                println!(
                    "agreement with labels: {hits}/{} ({:.4})",
                    known.len(),
                    hits as f64 / known.len() as f64
                );
            }
            println!("predictions: {}", rows.len());
        }
        Command::Evaluate {
            input,
            out,
            labels,
            config,
        } => {
            let config = config.resolve()?;
            let source = fold_source(&input, labels.as_deref(), &config)?;
            let report = pipeline::evaluate(source.as_ref(), &config)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let json = serde_json::json!({ "config": config, "report": report });
            write_text(&out.join("report.json"), &serde_json::to_string_pretty(&json)?)?;
            write_text(&out.join("confusion.csv"), &report.averaged.confusion_csv()?)?;
            write_text(&out.join("family_accuracy.csv"), &report.pooled.family_accuracy_csv()?)?;
            let table = report.table("malfam");
            write_text(&out.join("table.txt"), &table)?;
            print!("{table}");
            let a = &report.averaged;
            println!(
                "accuracy {:.4}  macro P {:.4}  macro R {:.4}  macro F1 {:.4}",
                a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1
            );
        }
        Command::Sweep {
            input,
            out,
            labels,
            top_k_values,
            config,
        } => {
            let config = config.resolve()?;
            let source = fold_source(&input, labels.as_deref(), &config)?;
            let ks = top_k_values.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
            let points = pipeline::sweep(source.as_ref(), &config, &ks)?;
            let csv = sweep_csv(&points)?;
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        Command::Synth {
            out,
            preset,
            samples,
            families,
            signature_size,
            signature_presence,
            noise_tokens,
            noise_per_sample,
            label_flip_rate,
            seed,
        } => {
            let mut spec = match preset {
                Preset::Drebin => SyntheticSpec::drebin_like(samples, seed),
                Preset::Balanced => SyntheticSpec::balanced(families, samples, seed),
            };
            macro_rules! set {
                ($($f:ident),*) => { $( if let Some(v) = $f { spec.$f = v; } )* };
            }
            set!(signature_size, signature_presence, noise_tokens, noise_per_sample, label_flip_rate);
            let apps = write_corpus(&spec, &out)?;
            println!("wrote {} apps in {} families to {}", apps.len(), spec.families.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(e) if e.is_data_error() => 2,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
