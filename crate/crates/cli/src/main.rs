use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tscm::adjustment::{self, DEFAULT_BETA};
use tscm::geometry::pair_feature;
use tscm::io::{self, FeatureSet, Provenance};
use tscm::metrics::{self, EvalOptions, DEFAULT_KS};
use tscm::pipeline::{self, PipelineConfig};
use tscm::ploss::{self, PLossContext, TrainConfig};
use tscm::populations::{self, FEATURE_DIM};
use tscm::synth::{self, BgMode, SynthConfig};
use tscm::FeatureRow;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "tscm", version, about = "Two-stage predicate debiasing toolkit")]
struct Cli {
    /// Master seed. Overrides seeds found in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test world.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute pair geometry features for every triplet of a dataset.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build relationship populations from box annotations.
    Populations {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        alpha: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear classifier; cross-entropy when --pop is absent.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Training dataset, used for class frequencies.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pop: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Score features with a model and attach background logits.
    DumpLogits {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `constant:<c>` or `uniform:<a>,<b>`.
        #[arg(long, default_value = "constant:1.0")]
        bg: String,
    },
    /// Fit the adjustment matrix on a logit dump.
    FitAdjust {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply an adjustment matrix and write predictions.
    ApplyAdjust {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        adj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute recall, mean recall, correction rate and the gt-rank histogram.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole seeded reproduction and write every artifact.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Join the cause chain, skipping causes already spelled out by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tscm::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(tscm::Error::invalid("--threads", "must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let seed = cli.seed;

    match cli.command {
        Command::Synth { config, out_dir } => {
            let mut cfg: SynthConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let world = synth::generate(&cfg)?;
            let prov = Provenance::with_seed(cfg.seed);
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            io::save_dataset(&out_dir.join("train.dataset.jsonl"), &world.train.dataset, &prov)?;
            io::save_dataset(&out_dir.join("test.dataset.jsonl"), &world.test.dataset, &prov)?;
            io::save_features(&out_dir.join("train.feat.jsonl"), &world.train.features, &prov)?;
            io::save_features(&out_dir.join("test.feat.jsonl"), &world.test.features, &prov)?;
            write_json(
                &out_dir.join("clusters.json"),
                &json!({ "seed": cfg.seed, "clusters": world.clusters }),
            )?;
            log::info!("wrote synthetic world to {}", out_dir.display());
        }
        Command::Featurize { dataset, out } => {
            let ds = load(dataset.as_ref(), io::load_dataset)?;
            let mut rows = Vec::with_capacity(ds.num_triplets());
            for rec in ds.records() {
                for (pair_id, t) in rec.triplets.iter().enumerate() {
                    let f = pair_feature(&rec.objects[t.subject_idx].bbox, &rec.objects[t.object_idx].bbox)
                        .with_context(|| format!("image {:?} pair {pair_id}", rec.image_id))?;
                    rows.push(FeatureRow {
                        label: t.predicate,
                        x: f.as_array().to_vec(),
                        image_id: Some(rec.image_id.clone()),
                        pair_id: Some(pair_id),
                    });
                }
            }
            let set = FeatureSet { dim: FEATURE_DIM, rows };
            io::save_features(&out, &set, &Provenance::with_seed(seed.unwrap_or(DEFAULT_SEED)))?;
        }
        Command::Populations { dataset, alpha, out } => {
            let ds = load(dataset.as_ref(), io::load_dataset)?;
            let table = populations::populations_from_dataset(&ds, alpha)?;
            io::save_populations(&out, &table, &Provenance::with_seed(seed.unwrap_or(DEFAULT_SEED)))?;
        }
        Command::Train {
            features,
            dataset,
            pop,
            config,
            out_model,
        } => {
            let mut cfg: TrainConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let feats = load(features.as_ref(), io::load_features)?;
            let ds = load(dataset.as_ref(), io::load_dataset)?;
            let k = ds.num_predicates();
            let ctx = match pop {
                Some(p) => {
                    let table = load(p.as_ref(), io::load_populations)?;
                    PLossContext::new(populations::class_frequencies(&ds)?, table)?
                }
                None => PLossContext::cross_entropy(k),
            };
            let x: Vec<Vec<f64>> = feats.rows.iter().map(|r| r.x.clone()).collect();
            let model = ploss::train_linear(&x, &feats.labels(), &ctx, &cfg)?;
            io::save_model(&out_model, &model, &Provenance::with_seed(cfg.seed))?;
        }
        Command::DumpLogits {
            model,
            features,
            out,
            bg,
        } => {
            let bg: BgMode = bg.parse()?;
            let seed = seed.unwrap_or(DEFAULT_SEED);
            let model = load(model.as_ref(), io::load_model)?;
            let feats = load(features.as_ref(), io::load_features)?;
            let dump = synth::simulate_biased_logits(&model, &feats, bg, seed)?;
            io::save_logits(&out, &dump, &Provenance::with_seed(seed))?;
        }
        Command::FitAdjust { logits, beta, out } => {
            let seed = seed.unwrap_or(DEFAULT_SEED);
            if beta == 0 {
                bail!(tscm::Error::invalid("--beta", "beta must be ≥ 1"));
            }
            let dump = load(logits.as_ref(), io::load_logits)?;
            let matrix = adjustment::fit_adjustment(&dump, beta, seed)?;
            io::save_adjustment(&out, &matrix, &Provenance::with_seed(seed))?;
        }
        Command::ApplyAdjust { logits, adj, out } => {
            let dump = load(logits.as_ref(), io::load_logits)?;
            let matrix = load(adj.as_ref(), io::load_adjustment)?;
            let preds = adjustment::apply_to_dump(&dump, &matrix)?;
            io::save_predictions(&out, &preds, &Provenance::with_seed(seed.unwrap_or(DEFAULT_SEED)))?;
        }
        Command::Eval {
            preds,
            baseline,
            dataset,
            ks,
            out,
        } => {
            let p = load(preds.as_ref(), io::load_predictions)?;
            let k = p.num_predicates;
            let base = baseline.as_deref().map(|b| load(b, io::load_predictions)).transpose()?;
            if let Some(b) = &base {
                check_k(&preds, k, baseline.as_deref().unwrap(), b.num_predicates)?;
            }
            let gt_totals = match dataset.as_deref() {
                Some(path) => {
                    let ds = load(path, io::load_dataset)?;
                    check_k(&preds, k, path, ds.num_predicates())?;
                    let mut t = vec![0usize; k];
                    for r in ds.records() {
                        for tr in &r.triplets {
                            t[tr.predicate] += 1;
                        }
                    }
                    Some(t)
                }
                None => None,
            };
            let opts = EvalOptions {
                ks,
                baseline: base.as_ref().map(|b| b.rows.as_slice()),
                gt_totals,
            };
            let report = metrics::evaluate(&p.rows, k, &opts)?;
            write_json(&out, &report)?;
        }
        Command::Pipeline { config, out_dir } => {
            let mut cfg: PipelineConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let outcome = pipeline::run(&cfg)?;
            pipeline::write_artifacts(&outcome, &out_dir)?;
            for (name, v) in &outcome.summary.variants {
                log::info!("{name:>8}: acc {:.4}  mR {:.4}", v.accuracy, v.mean_recall);
            }
            log::info!("wrote artifacts to {}", out_dir.display());
        }
    }
    Ok(())
}

fn check_k(left: &Path, left_k: usize, right: &Path, right_k: usize) -> Result<()> {
    if left_k != right_k {
        bail!(tscm::Error::KMismatch {
            left: left.display().to_string(),
            left_k,
            right: right.display().to_string(),
            right_k,
        });
    }
    Ok(())
}

/// Load an artifact, naming the file when its content is rejected.
fn load<T>(path: &Path, f: fn(&Path) -> tscm::Result<T>) -> Result<T> {
    f(path).map_err(|e| {
        if e.is_io() {
            anyhow::Error::new(e)
        } else {
            anyhow::Error::new(e).context(path.display().to_string())
        }
    })
}

/// Parse a JSON config, falling back to defaults when no path is given.
fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| tscm::Error::invalid(path.display().to_string(), e.to_string()).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
