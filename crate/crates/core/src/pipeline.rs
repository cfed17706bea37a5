//! Seeded end-to-end run: synth world, populations, CE and P-Loss training,
//! logit dumps, adjustment fitting and evaluation of four variants.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjustment::{self, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::io::{self, LogitDump, PredictionSet, Provenance};
use crate::metrics::{self, EvalOptions, MetricsReport};
use crate::ploss::{self, LinearModel, PLossContext, TrainConfig};
use crate::populations;
use crate::synth::{self, BgMode, SynthConfig, SynthWorld};
use crate::types::{AdjustmentMatrix, PopulationTable};

pub const VARIANTS: [&str; 4] = ["baseline", "ploss", "adjust", "tscm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; overrides the synth and train seeds.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Population size; cluster size minus one when absent.
    pub alpha: Option<usize>,
    pub beta: usize,
    pub train: TrainConfig,
    pub bg_mode: BgMode,
    pub ks: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            synth: SynthConfig::default(),
            alpha: None,
            beta: DEFAULT_BETA,
            train: TrainConfig::default(),
            bg_mode: BgMode::default(),
            ks: metrics::DEFAULT_KS.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn resolved(&self) -> Result<PipelineConfig> {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.train.seed = self.seed;
        c.synth.validate()?;
        c.train.validate()?;
        if c.beta == 0 {
            return Err(Error::invalid("beta", "beta must be ≥ 1"));
        }
        if c.alpha.is_none() {
            let size = c.synth.num_predicates.div_ceil(c.synth.n_clusters);
            c.alpha = Some(size.saturating_sub(1).max(1));
        }
        Ok(c)
    }
}

/// Headline numbers for one variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub accuracy: f64,
    pub mean_recall: f64,
    pub avg_r: f64,
    pub avg_mr: f64,
    pub mr_combined: f64,
    pub mc_argmax: Option<f64>,
    pub gt_rank_mode: Option<usize>,
}

impl VariantSummary {
    fn from_report(r: &MetricsReport) -> Self {
        VariantSummary {
            accuracy: r.accuracy,
            mean_recall: r.mean_recall.unwrap_or(0.0),
            avg_r: r.avg_r,
            avg_mr: r.avg_mr,
            mr_combined: r.mr_combined,
            mc_argmax: r.mc_argmax,
            gt_rank_mode: metrics::histogram_mode(&r.gt_rank_histogram),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub alpha: usize,
    pub beta: usize,
    /// Fraction of ground-truth within-cluster pairs found by the populations.
    pub population_recovery: f64,
    pub margin_ce: f64,
    pub margin_ploss: f64,
    pub variants: BTreeMap<String, VariantSummary>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub config: PipelineConfig,
    pub world: SynthWorld,
    pub populations: PopulationTable,
    pub models: BTreeMap<String, LinearModel>,
    pub test_dumps: BTreeMap<String, LogitDump>,
    pub adjustments: BTreeMap<String, AdjustmentMatrix>,
    pub predictions: BTreeMap<String, PredictionSet>,
    pub reports: BTreeMap<String, MetricsReport>,
    pub summary: PipelineSummary,
}

/// Macro mean over classes of the mean margin `f_y - max f_c` where `c`
/// ranges over the other members of `y`'s cluster. Singleton clusters and
/// absent classes are skipped.
pub fn within_cluster_margin(dump: &LogitDump, clusters: &[usize]) -> f64 {
    let k = dump.num_predicates;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for rec in &dump.records {
        let y = rec.gt_predicate;
        let rival = (0..k)
            .filter(|&c| c != y && clusters[c] == clusters[y])
            .map(|c| rec.fg_logits[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if rival.is_finite() {
            sums[y] += rec.fg_logits[y] - rival;
            counts[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| sums[c] / counts[c] as f64)
        .collect();
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Share of ordered within-cluster pairs `(t, c)` with `c` in `t`'s population.
pub fn population_recovery(pops: &PopulationTable, clusters: &[usize]) -> f64 {
    let mut found = 0usize;
    let mut total = 0usize;
    for t in 0..clusters.len() {
        for c in (0..clusters.len()).filter(|&c| c != t && clusters[c] == clusters[t]) {
            total += 1;
            if pops.contains(t, c) {
                found += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        found as f64 / total as f64
    }
}

fn train(world: &SynthWorld, ctx: &PLossContext, cfg: &TrainConfig) -> Result<LinearModel> {
    let x: Vec<Vec<f64>> = world.train.features.rows.iter().map(|r| r.x.clone()).collect();
    ploss::train_linear(&x, &world.train.features.labels(), ctx, cfg)
}

/// Run every stage in memory.
pub fn run(config: &PipelineConfig) -> Result<PipelineOutcome> {
    let cfg = config.resolved()?;
    let alpha = cfg.alpha.expect("resolved");
    let seed = cfg.seed;

    log::info!("generating synthetic world (seed {seed})");
    let world = synth::generate(&cfg.synth)?;
    let pops = populations::populations_from_dataset(&world.train.dataset, alpha)?;
    let pi = populations::class_frequencies(&world.train.dataset)?;

    let k = cfg.synth.num_predicates;
    let mut models = BTreeMap::new();
    log::info!("training cross-entropy baseline");
    models.insert(
        "ce".to_string(),
        train(&world, &PLossContext::cross_entropy(k), &cfg.train)?,
    );
    log::info!("training with population loss (alpha {alpha})");
    models.insert(
        "ploss".to_string(),
        train(&world, &PLossContext::new(pi, pops.clone())?, &cfg.train)?,
    );

    let mut train_dumps = BTreeMap::new();
    let mut test_dumps = BTreeMap::new();
    for (name, model) in &models {
        train_dumps.insert(
            name.clone(),
            synth::simulate_biased_logits(model, &world.train.features, cfg.bg_mode, seed)?,
        );
        test_dumps.insert(
            name.clone(),
            synth::simulate_biased_logits(model, &world.test.features, cfg.bg_mode, seed ^ 1)?,
        );
    }

    let mut adjustments = BTreeMap::new();
    for (name, dump) in &train_dumps {
        log::info!("fitting adjustment on {name} logits");
        adjustments.insert(name.clone(), adjustment::fit_adjustment(dump, cfg.beta, seed)?);
    }

    let identity = AdjustmentMatrix::identity(k, cfg.beta);
    let plan = [
        ("baseline", "ce", &identity),
        ("ploss", "ploss", &identity),
        ("adjust", "ce", &adjustments["ce"]),
        ("tscm", "ploss", &adjustments["ploss"]),
    ];
    let mut predictions = BTreeMap::new();
    for (variant, model, matrix) in plan {
        predictions.insert(
            variant.to_string(),
            adjustment::apply_to_dump(&test_dumps[model], matrix)?,
        );
    }

    let gt_totals = {
        let mut t = vec![0usize; k];
        for r in world.test.dataset.records() {
            for tr in &r.triplets {
                t[tr.predicate] += 1;
            }
        }
        t
    };
    let baseline_rows = predictions["baseline"].rows.clone();
    let mut reports = BTreeMap::new();
    for variant in VARIANTS {
        let opts = EvalOptions {
            ks: cfg.ks.clone(),
            baseline: (variant != "baseline").then_some(baseline_rows.as_slice()),
            gt_totals: Some(gt_totals.clone()),
        };
        reports.insert(
            variant.to_string(),
            metrics::evaluate(&predictions[variant].rows, k, &opts)?,
        );
    }

    let summary = PipelineSummary {
        seed,
        alpha,
        beta: cfg.beta,
        population_recovery: population_recovery(&pops, &world.clusters),
        margin_ce: within_cluster_margin(&test_dumps["ce"], &world.clusters),
        margin_ploss: within_cluster_margin(&test_dumps["ploss"], &world.clusters),
        variants: reports
            .iter()
            .map(|(n, r)| (n.clone(), VariantSummary::from_report(r)))
            .collect(),
    };

    Ok(PipelineOutcome {
        config: cfg,
        world,
        populations: pops,
        models,
        test_dumps,
        adjustments,
        predictions,
        reports,
        summary,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid("report", e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write every artifact of `outcome` under `dir`.
pub fn write_artifacts(outcome: &PipelineOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prov = Provenance::with_seed(outcome.config.seed);
    let w = &outcome.world;
    io::save_dataset(&dir.join("train.dataset.jsonl"), &w.train.dataset, &prov)?;
    io::save_dataset(&dir.join("test.dataset.jsonl"), &w.test.dataset, &prov)?;
    io::save_features(&dir.join("train.feat.jsonl"), &w.train.features, &prov)?;
    io::save_features(&dir.join("test.feat.jsonl"), &w.test.features, &prov)?;
    io::save_populations(&dir.join("populations.jsonl"), &outcome.populations, &prov)?;
    for (name, model) in &outcome.models {
        io::save_model(&dir.join(format!("model.{name}.json")), model, &prov)?;
    }
    for (name, dump) in &outcome.test_dumps {
        io::save_logits(&dir.join(format!("test.{name}.logits.jsonl")), dump, &prov)?;
    }
    for (name, m) in &outcome.adjustments {
        io::save_adjustment(&dir.join(format!("adjust.{name}.jsonl")), m, &prov)?;
    }
    for (name, p) in &outcome.predictions {
        io::save_predictions(&dir.join(format!("preds.{name}.jsonl")), p, &prov)?;
    }
    write_json(&dir.join("config.json"), &outcome.config)?;
    write_json(&dir.join("metrics.json"), &outcome.reports)?;
    write_json(&dir.join("summary.json"), &outcome.summary)
}
