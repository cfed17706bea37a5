//! Seeded synthetic relationship world.
//!
//! Predicates follow a Zipf frequency profile and are grouped into confusion
//! clusters: members of a cluster have nearby feature prototypes and nearby
//! pair geometry, members of different clusters are far apart. By default
//! consecutive frequency ranks share a cluster; the interleaved layout puts
//! class `k` in cluster `k % n_clusters` instead. Each sample yields a feature vector (prototype plus Gaussian
//! noise) and a subject/object box pair drawn from its predicate's geometry.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FeatureSet, LogitDump};
use crate::ploss::LinearModel;
use crate::types::{BoundingBox, Dataset, FeatureRow, ImageRecord, LogitRecord, ObjectInstance, TripletInstance};

/// How predicates are assigned to confusion clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLayout {
    /// Class `k` joins cluster `k % n_clusters`.
    Interleaved,
    /// Consecutive frequency ranks share a cluster.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(rename = "K")]
    pub num_predicates: usize,
    #[serde(rename = "C")]
    pub num_categories: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub zipf_s: f64,
    pub n_clusters: usize,
    /// Distance between prototypes of one cluster.
    pub cluster_spread: f64,
    /// Typical distance between cluster centers.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Share of samples whose feature leans toward a cluster-mate.
    pub confusion_rate: f64,
    /// Range of the pull toward the cluster-mate, as a fraction of the
    /// prototype distance.
    pub confusion_reach: (f64, f64),
    /// Only lean toward more frequent cluster-mates.
    pub confuse_toward_frequent: bool,
    pub d: usize,
    pub layout: ClusterLayout,
    pub min_pairs_per_image: usize,
    pub max_pairs_per_image: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_predicates: 20,
            num_categories: 10,
            n_train: 20_000,
            n_test: 5_000,
            zipf_s: 1.5,
            n_clusters: 5,
            cluster_spread: 2.0,
            cluster_separation: 8.0,
            noise_sigma: 1.2,
            confusion_rate: 0.0,
            confusion_reach: (0.0, 0.5),
            confuse_toward_frequent: false,
            d: 16,
            layout: ClusterLayout::Blocked,
            min_pairs_per_image: 4,
            max_pairs_per_image: 40,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid("synth config", m));
        if self.num_predicates < 2 {
            return fail("K must be >= 2");
        }
        if self.n_clusters < 1 || self.n_clusters > self.num_predicates {
            return fail("need 1 <= n_clusters <= K");
        }
        if self.num_categories < 1 || self.d < 1 {
            return fail("C and d must be positive");
        }
        if self.n_train < self.num_predicates || self.n_test < 1 {
            return fail("n_train must be >= K and n_test >= 1");
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return fail("zipf_s must be >= 0");
        }
        if !(self.noise_sigma >= 0.0 && self.cluster_spread >= 0.0 && self.cluster_separation >= 0.0) {
            return fail("noise and distances must be non-negative");
        }
        let (lo, hi) = self.confusion_reach;
        if !(0.0..=1.0).contains(&self.confusion_rate) || !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return fail("confusion_rate and confusion_reach must lie in [0, 1]");
        }
        if self.min_pairs_per_image < 1 || self.max_pairs_per_image < self.min_pairs_per_image {
            return fail("need 1 <= min_pairs_per_image <= max_pairs_per_image");
        }
        Ok(())
    }

    /// Normalized Zipf mass `(k+1)^-s`.
    pub fn class_mass(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_predicates)
            .map(|k| ((k + 1) as f64).powf(-self.zipf_s))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    pub fn cluster_of(&self, class: usize) -> usize {
        match self.layout {
            ClusterLayout::Interleaved => class % self.n_clusters,
            ClusterLayout::Blocked => class * self.n_clusters / self.num_predicates,
        }
    }
}

/// Class counts proportional to `mass` by largest remainder, each at least 1
/// when `n >= mass.len()`.
pub fn apportion(n: usize, mass: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = mass.iter().map(|m| (m * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = mass[a] * n as f64 - counts[a] as f64;
        let fb = mass[b] * n as f64 - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    if n >= mass.len() {
        while let Some(k) = counts.iter().position(|&c| c == 0) {
            let donor = (0..counts.len())
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

/// Relative geometry of a predicate, in subject-height units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairGeometry {
    pub dx: f64,
    pub dy: f64,
    pub log_h_ratio: f64,
    pub log_w_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub dataset: Dataset,
    pub features: FeatureSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub train: SynthSplit,
    pub test: SynthSplit,
    /// Ground-truth confusion cluster of every predicate.
    pub clusters: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub geometry: Vec<PairGeometry>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn feature_prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Centers at radius separation/sqrt(2) so that random centers sit about
    // `separation` apart.
    let radius = cfg.cluster_separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| unit_vec(rng, cfg.d).into_iter().map(|x| x * radius).collect())
        .collect();
    let offset = cfg.cluster_spread / std::f64::consts::SQRT_2;
    (0..cfg.num_predicates)
        .map(|k| {
            let dir = unit_vec(rng, cfg.d);
            centers[cfg.cluster_of(k)]
                .iter()
                .zip(dir)
                .map(|(c, u)| c + offset * u)
                .collect()
        })
        .collect()
}

fn geometry_prototypes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PairGeometry> {
    let mut centers: Vec<[f64; 4]> = Vec::with_capacity(cfg.n_clusters);
    let mut attempts = 0;
    while centers.len() < cfg.n_clusters {
        let c = [
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() > 0.8);
        attempts += 1;
        if far || attempts > 1000 {
            centers.push(c);
        }
    }
    (0..cfg.num_predicates)
        .map(|k| {
            let c = centers[cfg.cluster_of(k)];
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.08..0.08);
            PairGeometry {
                dx: c[0] + jitter(rng),
                dy: c[1] + jitter(rng),
                log_h_ratio: c[2] + jitter(rng),
                log_w_ratio: c[3] + jitter(rng),
            }
        })
        .collect()
}

fn sample_boxes(geom: &PairGeometry, rng: &mut ChaCha8Rng) -> (BoundingBox, BoundingBox) {
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let h = rng.random_range(20.0..120.0);
    let w = h * rng.random_range(-0.4f64..0.4).exp();
    let cx = rng.random_range(0.0..800.0);
    let cy = rng.random_range(0.0..600.0);
    let oh = h * (geom.log_h_ratio + 0.5 * noise.sample(rng)).exp();
    let ow = w * (geom.log_w_ratio + 0.5 * noise.sample(rng)).exp();
    let ocx = cx + (geom.dx + noise.sample(rng)) * h;
    let ocy = cy + (geom.dy + noise.sample(rng)) * h;
    (
        BoundingBox { cx, cy, h, w },
        BoundingBox {
            cx: ocx,
            cy: ocy,
            h: oh,
            w: ow,
        },
    )
}

fn category_mass(num_categories: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_categories).map(|c| 1.0 / (c + 1) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn pick(mass: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, m) in mass.iter().enumerate() {
        acc += m;
        if u < acc {
            return i;
        }
    }
    mass.len() - 1
}

/// Prototype plus noise; with probability `confusion_rate` the center is
/// first pulled toward a cluster-mate's prototype by a fraction drawn
/// uniformly from `confusion_reach`.
fn sample_feature(
    cfg: &SynthConfig,
    label: usize,
    prototypes: &[Vec<f64>],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut center = prototypes[label].clone();
    if cfg.confusion_rate > 0.0 && rng.random::<f64>() < cfg.confusion_rate {
        let mates: Vec<usize> = (0..cfg.num_predicates)
            .filter(|&c| c != label && cfg.cluster_of(c) == cfg.cluster_of(label))
            .filter(|&c| !cfg.confuse_toward_frequent || c < label)
            .collect();
        if let Some(&mate) = mates.get(rng.random_range(0..mates.len().max(1))) {
            let (lo, hi) = cfg.confusion_reach;
            let lambda = rng.random_range(lo..=hi);
            for (c, m) in center.iter_mut().zip(&prototypes[mate]) {
                *c += lambda * (m - *c);
            }
        }
    }
    center.into_iter().map(|c| c + noise.sample(rng)).collect()
}

fn generate_split(
    cfg: &SynthConfig,
    name: &str,
    n: usize,
    prototypes: &[Vec<f64>],
    geometry: &[PairGeometry],
    rng: &mut ChaCha8Rng,
) -> Result<SynthSplit> {
    let counts = apportion(n, &cfg.class_mass());
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(rng);

    let noise =
        Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::invalid("synth config", e.to_string()))?;
    let subj_mass = category_mass(cfg.num_categories);
    let mut records = Vec::new();
    let mut rows = Vec::with_capacity(n);
    let mut next = 0;
    while next < labels.len() {
        let image_id = format!("{name}-{:06}", records.len());
        let pairs = rng
            .random_range(cfg.min_pairs_per_image..=cfg.max_pairs_per_image)
            .min(labels.len() - next);
        let mut objects = Vec::with_capacity(2 * pairs);
        let mut triplets = Vec::with_capacity(pairs);
        for pair_id in 0..pairs {
            let label = labels[next + pair_id];
            let (sb, ob) = sample_boxes(&geometry[label], rng);
            let subject_cat = pick(&subj_mass, rng);
            let object_cat = rng.random_range(0..cfg.num_categories);
            objects.push(ObjectInstance {
                category: subject_cat,
                bbox: sb,
            });
            objects.push(ObjectInstance {
                category: object_cat,
                bbox: ob,
            });
            triplets.push(TripletInstance {
                subject_idx: 2 * pair_id,
                object_idx: 2 * pair_id + 1,
                predicate: label,
            });
            let x = sample_feature(cfg, label, prototypes, &noise, rng);
            rows.push(FeatureRow {
                label,
                x,
                image_id: Some(image_id.clone()),
                pair_id: Some(pair_id),
            });
        }
        records.push(ImageRecord {
            image_id,
            objects,
            triplets,
        });
        next += pairs;
    }
    Ok(SynthSplit {
        dataset: Dataset::new(cfg.num_categories, cfg.num_predicates, records)?,
        features: FeatureSet { dim: cfg.d, rows },
    })
}

/// Build the train/test splits. Prototypes, train and test draw from
/// separate streams of the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut proto_rng = stream_rng(cfg.seed, 0);
    let prototypes = feature_prototypes(cfg, &mut proto_rng);
    let geometry = geometry_prototypes(cfg, &mut proto_rng);
    let train = generate_split(
        cfg,
        "train",
        cfg.n_train,
        &prototypes,
        &geometry,
        &mut stream_rng(cfg.seed, 1),
    )?;
    let test = generate_split(
        cfg,
        "test",
        cfg.n_test,
        &prototypes,
        &geometry,
        &mut stream_rng(cfg.seed, 2),
    )?;
    Ok(SynthWorld {
        train,
        test,
        clusters: (0..cfg.num_predicates).map(|k| cfg.cluster_of(k)).collect(),
        prototypes,
        geometry,
    })
}

/// How background logits are produced for a dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgMode {
    Constant(f64),
    Uniform(f64, f64),
}

impl Default for BgMode {
    fn default() -> Self {
        BgMode::Constant(1.0)
    }
}

impl std::str::FromStr for BgMode {
    type Err = Error;

    /// `constant:<c>` or `uniform:<a>,<b>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("bg mode", format!("cannot parse {s:?}"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("constant", [c]) if c.is_finite() => Ok(BgMode::Constant(*c)),
            ("uniform", [a, b]) if a.is_finite() && b.is_finite() && a < b => Ok(BgMode::Uniform(*a, *b)),
            _ => Err(bad()),
        }
    }
}

/// Run `model` over `features` and attach background logits per `bg_mode`.
pub fn simulate_biased_logits(
    model: &LinearModel,
    features: &FeatureSet,
    bg_mode: BgMode,
    seed: u64,
) -> Result<LogitDump> {
    if features.dim != model.dim() {
        return Err(Error::invalid(
            "features",
            format!(
                "dimension mismatch: features d={}, model d={}",
                features.dim,
                model.dim()
            ),
        ));
    }
    let k = model.num_classes();
    let mut rng = stream_rng(seed, 3);
    let records = features
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.label >= k {
                return Err(Error::invalid(
                    "features",
                    format!("row {i} label {} >= K={k}", row.label),
                ));
            }
            let bg_logit = match bg_mode {
                BgMode::Constant(c) => c,
                BgMode::Uniform(a, b) => rng.random_range(a..b),
            };
            Ok(LogitRecord {
                image_id: row.image_id.clone().unwrap_or_else(|| format!("row-{i:06}")),
                pair_id: row.pair_id.unwrap_or(0),
                gt_predicate: row.label,
                fg_logits: model.logits(&row.x),
                bg_logit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitDump {
        num_predicates: k,
        records,
    })
}
