//! Paired experiments: dimensionality-reduction comparison, SAIL against
//! plain MAP-Elites on the toy domain, and focused ideation against an
//! unseeded SAIL run with the same number of precise samples.

use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan, select_eps, ClusterConfig};
use crate::domains::{self, Domain, Toy1d};
use crate::embedding::{gplus, pca_project, tsne, TsneConfig};
use crate::ideation::{auto_select, run_iteration, select_classes, similarity_report, start_run, IdeationConfig, IdeationRun, Policy, SimilarityReport};
use crate::math::{pairwise_sq_distances, Rng};
use crate::qd::{sail, FeatureMap, MapElites, QdConfig, SailConfig, SailStatus};
use crate::{Error, Genome, Result};

/// Isotropic Gaussian clusters around normally distributed centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    /// Standard deviation of the centre coordinates.
    pub centre_scale: f64,
    /// Standard deviation of points around their centre.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            clusters: 5,
            per_cluster: 50,
            dim: 10,
            centre_scale: 3.0,
            noise: 1.0,
        }
    }
}

/// Points grouped by cluster, with the generating cluster of each point.
pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = Rng::new(seed).split("blobs");
    let centres: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..spec.dim).map(|_| spec.centre_scale * rng.normal()).collect())
        .collect();
    let mut points = Vec::with_capacity(spec.clusters * spec.per_cluster);
    let mut truth = Vec::with_capacity(points.capacity());
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            points.push(centre.iter().map(|m| m + spec.noise * rng.normal()).collect());
            truth.push(c);
        }
    }
    (points, truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrMethod {
    Tsne,
    Pca,
    /// DBSCAN directly on the input coordinates.
    None,
}

impl DrMethod {
    pub const ALL: [DrMethod; 3] = [DrMethod::Tsne, DrMethod::Pca, DrMethod::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tsne => "t-sne",
            Self::Pca => "pca",
            Self::None => "none",
        }
    }
}

/// Where the compared point sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DrSource {
    Blobs(BlobSpec),
    /// Prediction-map elites of one SAIL run per seed, in normalised
    /// parameter space.
    Domain { name: String, initial_samples: usize, sample_budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrConfig {
    pub runs: usize,
    pub seed: u64,
    pub source: DrSource,
    pub tsne: TsneConfig,
    pub cluster: ClusterConfig,
}

impl Default for DrConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            seed: 0,
            source: DrSource::Blobs(BlobSpec::default()),
            tsne: TsneConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrRow {
    pub run: usize,
    pub method: DrMethod,
    pub points: usize,
    pub eps: f64,
    pub clusters: usize,
    pub noise: usize,
    /// G+ in the space DBSCAN ran in; undefined with fewer than two clusters.
    pub gplus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSummary {
    pub method: DrMethod,
    pub runs: usize,
    /// Runs in which G+ was defined.
    pub defined: usize,
    pub mean_gplus: Option<f64>,
    pub mean_clusters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrComparison {
    pub config: DrConfig,
    pub rows: Vec<DrRow>,
    pub summary: Vec<DrSummary>,
}

/// Coordinates DBSCAN should see for a method.
pub fn reduce(points: &[Vec<f64>], method: DrMethod, tsne_cfg: &TsneConfig) -> Result<Vec<Vec<f64>>> {
    Ok(match method {
        DrMethod::Tsne => tsne(points, tsne_cfg)?.points.iter().map(|p| p.to_vec()).collect(),
        DrMethod::Pca => pca_project(points)?.points.iter().map(|p| p.to_vec()).collect(),
        DrMethod::None => points.to_vec(),
    })
}

/// Clusters `latent` and scores the result with G+ on its own distances.
pub fn score_space(run: usize, method: DrMethod, latent: &[Vec<f64>], cluster: &ClusterConfig) -> Result<DrRow> {
    let (eps, _) = select_eps(latent, cluster)?;
    let labels = dbscan(latent, eps, cluster.min_pts.max(1))?;
    let clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let gplus = match gplus(&pairwise_sq_distances(latent)?, &labels) {
        Ok(g) => Some(g),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(DrRow {
        run,
        method,
        points: latent.len(),
        eps,
        clusters,
        noise: labels.iter().filter(|l| **l < 0).count(),
        gplus,
    })
}

pub fn summarize_dr(rows: &[DrRow]) -> Vec<DrSummary> {
    DrMethod::ALL
        .iter()
        .map(|&method| {
            let mine: Vec<&DrRow> = rows.iter().filter(|r| r.method == method).collect();
            let defined: Vec<f64> = mine.iter().filter_map(|r| r.gplus).collect();
            DrSummary {
                method,
                runs: mine.len(),
                defined: defined.len(),
                mean_gplus: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                mean_clusters: if mine.is_empty() {
                    0.0
                } else {
                    mine.iter().map(|r| r.clusters as f64).sum::<f64>() / mine.len() as f64
                },
            }
        })
        .collect()
}

fn dr_points(source: &DrSource, seed: u64) -> Result<Vec<Vec<f64>>> {
    match source {
        DrSource::Blobs(spec) => Ok(gaussian_blobs(spec, seed).0),
        DrSource::Domain { name, initial_samples, sample_budget } => {
            let domain = domains::open(name, None)?;
            let config = IdeationConfig {
                domain: name.clone(),
                initial_samples: *initial_samples,
                sample_budget: *sample_budget,
                seed,
                ..IdeationConfig::default()
            };
            let (_, map) = sail_baseline(&config, domain.as_ref(), initial_samples + sample_budget)?;
            let bounds = &domain.descriptor().bounds;
            Ok(map.elites().map(|(_, e)| bounds.normalize(&e.genome)).collect())
        }
    }
}

/// One point set per run; every method clusters the same set.
pub fn dr_compare(config: &DrConfig, progress: &dyn Fn(usize)) -> Result<DrComparison> {
    let root = Rng::new(config.seed);
    let mut rows = Vec::with_capacity(config.runs * DrMethod::ALL.len());
    for run in 0..config.runs {
        progress(run);
        let rng = root.split(&format!("dr-{run}"));
        let points = dr_points(&config.source, rng.split("data").seed())?;
        let tsne_cfg = TsneConfig {
            seed: rng.split("tsne").seed(),
            ..config.tsne.clone()
        };
        for method in DrMethod::ALL {
            let latent = reduce(&points, method, &tsne_cfg)?;
            rows.push(score_space(run, method, &latent, &config.cluster)?);
        }
    }
    Ok(DrComparison {
        config: config.clone(),
        summary: summarize_dr(&rows),
        rows,
    })
}

/// Unseeded SAIL: the run's initial sample, then `total_samples` minus the
/// initial sample acquired in one SAIL call over the full space. The
/// returned run holds the archive, with acquisitions tagged iteration 1.
pub fn sail_baseline(config: &IdeationConfig, domain: &dyn Domain, total_samples: usize) -> Result<(IdeationRun, FeatureMap)> {
    let budget = total_samples.checked_sub(config.initial_samples).ok_or_else(|| {
        Error::Validation(format!(
            "total budget {total_samples} is smaller than the initial sample of {}",
            config.initial_samples
        ))
    })?;
    let mut run = start_run(config.clone(), domain, format!("sail-baseline-{}", config.seed))?;
    let descriptor = domain.descriptor();
    let seeds: Vec<Genome> = run.archive.iter().map(|a| a.genome.clone()).collect();
    let outcome = sail(
        &run.observations(),
        &seeds,
        budget,
        &descriptor.bounds,
        &descriptor.map,
        &config.sail,
        domain,
        &Rng::new(config.seed).split("sail-baseline"),
        &|_| {},
    )?;
    if let SailStatus::BudgetUnfilled(msg) = &outcome.status {
        log::warn!("SAIL baseline: {msg}");
    }
    for o in outcome.new_observations {
        run.archive.push(crate::ideation::ArchiveEntry {
            genome: o.genome,
            fitness: o.fitness,
            features: o.features,
            iteration: 1,
        });
    }
    for s in outcome.invalid {
        run.invalid.push(crate::ideation::InvalidEntry {
            genome: s.genome,
            reason: s.reason,
            iteration: 1,
        });
    }
    Ok((run, outcome.prediction_map))
}

/// Best true fitness per bin of the toy map, from a scan of `grid + 1`
/// evenly spaced points.
pub fn toy_bin_optima(grid: usize) -> Result<Vec<f64>> {
    let toy = Toy1d::new();
    let map = &toy.descriptor().map;
    let mut best = vec![f64::NEG_INFINITY; map.bin_count()];
    for i in 0..=grid {
        let x = i as f64 / grid as f64;
        let e = Toy1d::evaluate(&[x]);
        let b = map.flat_index(map.niche_index(e.features)?);
        best[b] = best[b].max(e.fitness);
    }
    Ok(best)
}

/// Fraction of bins whose elite, re-evaluated on the true objective, is
/// within `tolerance` (relative) of that bin's optimum. Empty bins count
/// as misses.
pub fn toy_quality(map: &FeatureMap, optima: &[f64], tolerance: f64) -> f64 {
    let hits = map
        .elites()
        .filter(|(b, e)| {
            let best = optima[map.config().flat_index(*b)];
            Toy1d::fitness(e.genome[0]) >= best - tolerance * best.abs()
        })
        .count();
    hits as f64 / optima.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub initial_samples: usize,
    pub acquired: usize,
    pub sail: SailConfig,
    /// Relative distance to the bin optimum that counts as a hit.
    pub tolerance: f64,
    /// Fraction of bins that must be hit.
    pub target: f64,
    /// Evaluations per MAP-Elites generation on the true objective.
    pub baseline_batch: usize,
    /// Evaluations after which the MAP-Elites baseline gives up.
    pub baseline_cap: usize,
    pub baseline_qd: QdConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            initial_samples: 10,
            acquired: 40,
            sail: SailConfig {
                batch_size: 5,
                ..SailConfig::default()
            },
            tolerance: 0.05,
            target: 0.8,
            baseline_batch: 10,
            baseline_cap: 2000,
            baseline_qd: QdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyComparison {
    pub seed: u64,
    pub sail_evaluations: usize,
    pub sail_quality: f64,
    /// Evaluations MAP-Elites needed to reach the target, counting its
    /// seeds; `None` if it did not within the cap.
    pub map_elites_evaluations: Option<usize>,
}

/// SAIL and MAP-Elites from the same initial Sobol sample on the toy domain.
pub fn toy_comparison(config: &ToyConfig, seed: u64) -> Result<ToyComparison> {
    let toy = Toy1d::new();
    let optima = toy_bin_optima(10_000)?;
    let ideation = IdeationConfig {
        domain: Toy1d::NAME.into(),
        initial_samples: config.initial_samples,
        sample_budget: config.acquired,
        seed,
        sail: config.sail.clone(),
        ..IdeationConfig::default()
    };
    let (run, map) = sail_baseline(&ideation, &toy, config.initial_samples + config.acquired)?;
    let sail_quality = toy_quality(&map, &optima, config.tolerance);

    let descriptor = toy.descriptor();
    let qd = QdConfig {
        children_per_generation: config.baseline_batch,
        ..config.baseline_qd.clone()
    };
    let mut me = MapElites::new(|g: &[f64]| Some(Toy1d::evaluate(g)), &descriptor.bounds, &descriptor.map, &qd)?;
    me.offer_all(run.archive.iter().filter(|a| a.iteration == 0).map(|a| a.genome.clone()).collect())?;
    let mut rng = Rng::new(seed).split("map-elites-baseline");
    let mut reached = None;
    loop {
        if toy_quality(me.map(), &optima, config.tolerance) >= config.target {
            reached = Some(me.evaluations());
            break;
        }
        if me.evaluations() >= config.baseline_cap {
            break;
        }
        me.generation(&mut rng)?;
    }
    Ok(ToyComparison {
        seed,
        sail_evaluations: run.archive.len() + run.invalid.len(),
        sail_quality,
        map_elites_evaluations: reached,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusConfig {
    pub ideation: IdeationConfig,
    pub iterations: usize,
    pub policy: Policy,
}

impl Default for FocusConfig {
    fn default() -> Self {
        Self {
            ideation: IdeationConfig {
                initial_samples: 50,
                sample_budget: 50,
                ..IdeationConfig::default()
            },
            iterations: 2,
            policy: Policy::Largest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusPair {
    pub seed: u64,
    /// The prototype selected after the first iteration.
    pub reference: Genome,
    pub produqd: SimilarityReport,
    pub sail: SimilarityReport,
    pub produqd_samples: usize,
    pub sail_samples: usize,
}

impl FocusPair {
    pub fn closer(&self) -> bool {
        self.produqd.distance.mean < self.sail.distance.mean
    }

    pub fn narrower(&self) -> bool {
        self.produqd.mean_spread < self.sail.mean_spread
    }
}

/// Runs ideation for `iterations` rounds with a scripted selection, and an
/// unseeded SAIL run with the same total number of precise samples. Both
/// final prediction maps are compared against the first selected
/// prototype.
pub fn focus_pair(config: &FocusConfig, domain: &dyn Domain, seed: u64) -> Result<FocusPair> {
    if config.iterations < 2 {
        return Err(Error::Validation("focusing needs at least two iterations".into()));
    }
    let ideation = IdeationConfig {
        seed,
        ..config.ideation.clone()
    };
    let mut run = start_run(ideation.clone(), domain, format!("focus-{seed}"))?;
    let mut reference = None;
    for k in 1..=config.iterations {
        run_iteration(&mut run, domain, ideation.sample_budget, &|_| {})?;
        if k < config.iterations {
            let pick = auto_select(&run, config.policy)?;
            select_classes(&mut run, k, &pick.classes)?;
            if reference.is_none() {
                let rec = run.iteration(k)?;
                reference = Some(rec.prototypes[pick.classes[0]].genome.clone());
            }
        }
    }
    let reference = reference.expect("at least one selection");
    let bounds = &domain.descriptor().bounds;
    let analytic = domain.is_analytic().then_some(domain);
    let last = run.latest().expect("iterations ran");
    let produqd = similarity_report(&last.prediction_map, last.index, &reference, bounds, analytic)?;
    let produqd_samples = run.archive.len() + run.invalid.len();

    let (base, map) = sail_baseline(&ideation, domain, produqd_samples_budget(&ideation, config.iterations))?;
    let sail = similarity_report(&map, 1, &reference, bounds, analytic)?;
    Ok(FocusPair {
        seed,
        reference,
        produqd,
        sail,
        produqd_samples,
        sail_samples: base.archive.len() + base.invalid.len(),
    })
}

fn produqd_samples_budget(config: &IdeationConfig, iterations: usize) -> usize {
    config.initial_samples + iterations * config.sample_budget
}
