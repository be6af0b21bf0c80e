//! Feature maps, MAP-Elites illumination and surrogate-assisted illumination
//! (SAIL).

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::stats::quantile_sorted;
use crate::math::{Rng, SobolSequence};
use crate::surrogate::{ucb, GpConfig, GpModel, UcbConfig};
use crate::{Bounds, Error, Genome, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDim {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl FeatureDim {
    pub fn new(name: impl Into<String>, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
        }
    }
}

/// Two feature dimensions, each uniformly divided into `resolution` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub features: [FeatureDim; 2],
    pub resolution: [usize; 2],
}

pub type Bin = (usize, usize);

impl MapConfig {
    pub fn new(features: [FeatureDim; 2], resolution: [usize; 2]) -> Result<Self> {
        let cfg = Self {
            features,
            resolution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (f, r) in self.features.iter().zip(self.resolution) {
            if !(f.min.is_finite() && f.max.is_finite() && f.min < f.max) {
                return Err(Error::Validation(format!(
                    "feature {} has an empty range [{}, {}]",
                    f.name, f.min, f.max
                )));
            }
            if r == 0 {
                return Err(Error::Validation(format!("feature {} has zero bins", f.name)));
            }
        }
        Ok(())
    }

    pub fn bin_count(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    /// Uniform binning; out-of-range values clamp to the boundary bins.
    pub fn niche_index(&self, features: [f64; 2]) -> Result<Bin> {
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite features {features:?}")));
        }
        let axis = |k: usize| {
            let f = &self.features[k];
            let r = self.resolution[k];
            let u = (features[k] - f.min) / (f.max - f.min);
            ((u * r as f64).floor().max(0.0) as usize).min(r - 1)
        };
        Ok((axis(0), axis(1)))
    }

    /// Row-major position of a bin.
    pub fn flat_index(&self, bin: Bin) -> usize {
        bin.0 * self.resolution[1] + bin.1
    }

    pub fn bin_of_flat(&self, idx: usize) -> Bin {
        (idx / self.resolution[1], idx % self.resolution[1])
    }

    pub fn clamp_features(&self, features: [f64; 2]) -> [f64; 2] {
        [
            features[0].clamp(self.features[0].min, self.features[0].max),
            features[1].clamp(self.features[1].min, self.features[1].max),
        ]
    }

    /// Feature-space point from unit coordinates.
    pub fn from_unit(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.features[0].min + u[0] * (self.features[0].max - self.features[0].min),
            self.features[1].min + u[1] * (self.features[1].max - self.features[1].min),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    pub features: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub genome: Genome,
    pub fitness: f64,
    pub features: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    config: MapConfig,
    bins: Vec<Option<Elite>>,
}

impl FeatureMap {
    pub fn new(config: MapConfig) -> Self {
        let bins = vec![None; config.bin_count()];
        Self { config, bins }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn get(&self, bin: Bin) -> Option<&Elite> {
        self.bins.get(self.config.flat_index(bin))?.as_ref()
    }

    /// Offer a candidate to its bin. Returns `true` when it was stored.
    pub fn offer(&mut self, genome: Genome, eval: Evaluation) -> Result<bool> {
        if !eval.fitness.is_finite() {
            return Ok(false);
        }
        let bin = self.config.niche_index(eval.features)?;
        let slot = &mut self.bins[self.config.flat_index(bin)];
        match slot {
            Some(e) if e.fitness >= eval.fitness => Ok(false),
            _ => {
                *slot = Some(Elite {
                    genome,
                    fitness: eval.fitness,
                    features: self.config.clamp_features(eval.features),
                });
                Ok(true)
            }
        }
    }

    /// Occupied bins in row-major order.
    pub fn elites(&self) -> impl Iterator<Item = (Bin, &Elite)> {
        self.bins
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (self.config.bin_of_flat(i), e)))
    }

    pub fn occupied(&self) -> usize {
        self.bins.iter().filter(|b| b.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied() == 0
    }

    pub fn coverage(&self) -> f64 {
        self.occupied() as f64 / self.bins.len() as f64
    }

    pub fn summary(&self) -> MapSummary {
        map_features(self)
    }

    /// CSV table of the occupied bins:
    /// `bin_x,bin_y,occupied,fitness,feature_1,feature_2,genome_0,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.elites().next().map_or(0, |(_, e)| e.genome.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["bin_x", "bin_y", "occupied", "fitness", "feature_1", "feature_2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..dim).map(|i| format!("genome_{i}")));
        w.write_record(&header)?;
        for ((bx, by), e) in self.elites() {
            let mut row = vec![
                bx.to_string(),
                by.to_string(),
                "1".to_string(),
                e.fitness.to_string(),
                e.features[0].to_string(),
                e.features[1].to_string(),
            ];
            row.extend(e.genome.iter().map(|g| g.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessQuantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: Bin,
    pub fitness: f64,
    pub features: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub coverage: f64,
    pub occupied: usize,
    pub total_bins: usize,
    pub fitness: Option<FitnessQuantiles>,
    pub table: Vec<BinRow>,
}

pub fn map_features(map: &FeatureMap) -> MapSummary {
    let table: Vec<BinRow> = map
        .elites()
        .map(|(bin, e)| BinRow {
            bin,
            fitness: e.fitness,
            features: e.features,
        })
        .collect();
    let mut f: Vec<f64> = table.iter().map(|r| r.fitness).collect();
    f.sort_by(f64::total_cmp);
    let fitness = (!f.is_empty()).then(|| FitnessQuantiles {
        min: f[0],
        q25: quantile_sorted(&f, 0.25),
        median: quantile_sorted(&f, 0.5),
        q75: quantile_sorted(&f, 0.75),
        max: f[f.len() - 1],
    });
    MapSummary {
        coverage: map.coverage(),
        occupied: table.len(),
        total_bins: map.config.bin_count(),
        fitness,
        table,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdConfig {
    pub generations: usize,
    pub children_per_generation: usize,
    /// Gaussian mutation step as a fraction of each parameter's range.
    pub mutation_sigma: f64,
    /// Uniform crossover between two parents before mutation.
    pub crossover: bool,
}

impl Default for QdConfig {
    fn default() -> Self {
        Self {
            generations: 256,
            children_per_generation: 32,
            mutation_sigma: 0.1,
            crossover: false,
        }
    }
}

impl QdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.children_per_generation == 0 {
            return Err(Error::Validation("children_per_generation must be positive".into()));
        }
        if !(self.mutation_sigma > 0.0 && self.mutation_sigma <= 0.5) {
            return Err(Error::Validation(format!(
                "mutation_sigma {} outside (0, 0.5]",
                self.mutation_sigma
            )));
        }
        Ok(())
    }
}

/// Incremental MAP-Elites. Candidates are generated sequentially from the
/// random stream, evaluated in parallel, then offered in generation order,
/// so the result does not depend on thread scheduling.
pub struct MapElites<'a, F> {
    objective: F,
    bounds: &'a Bounds,
    qd: &'a QdConfig,
    map: FeatureMap,
    evaluations: usize,
}

impl<'a, F> MapElites<'a, F>
where
    F: Fn(&[f64]) -> Option<Evaluation> + Sync,
{
    pub fn new(objective: F, bounds: &'a Bounds, config: &MapConfig, qd: &'a QdConfig) -> Result<Self> {
        config.validate()?;
        qd.validate()?;
        Ok(Self {
            objective,
            bounds,
            qd,
            map: FeatureMap::new(config.clone()),
            evaluations: 0,
        })
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn into_map(self) -> FeatureMap {
        self.map
    }

    /// Evaluate candidates in parallel and offer them in order.
    pub fn offer_all(&mut self, candidates: Vec<Genome>) -> Result<()> {
        let evals: Vec<Option<Evaluation>> = candidates.par_iter().map(|g| (self.objective)(g)).collect();
        self.evaluations += candidates.len();
        for (g, e) in candidates.into_iter().zip(evals) {
            if let Some(e) = e {
                self.map.offer(g, e)?;
            }
        }
        Ok(())
    }

    fn mutate(&self, parent: &[f64], rng: &mut Rng) -> Genome {
        let mut child: Genome = parent
            .iter()
            .enumerate()
            .map(|(i, x)| x + rng.normal() * self.qd.mutation_sigma * self.bounds.range(i))
            .collect();
        self.bounds.clamp(&mut child);
        child
    }

    pub fn generation(&mut self, rng: &mut Rng) -> Result<()> {
        let parents: Vec<&Elite> = self.map.elites().map(|(_, e)| e).collect();
        if parents.is_empty() {
            return Err(Error::EmptyMap);
        }
        let children: Vec<Genome> = (0..self.qd.children_per_generation)
            .map(|_| {
                let a = &parents[rng.below(parents.len())].genome;
                if self.qd.crossover && parents.len() > 1 {
                    let b = &parents[rng.below(parents.len())].genome;
                    let mixed: Genome = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| if rng.uniform() < 0.5 { *x } else { *y })
                        .collect();
                    self.mutate(&mixed, rng)
                } else {
                    self.mutate(a, rng)
                }
            })
            .collect();
        self.offer_all(children)
    }
}

/// Seed a map, then run `qd.generations` rounds of mutation and local
/// competition.
pub fn map_elites<F>(
    objective: F,
    seeds: &[Genome],
    bounds: &Bounds,
    config: &MapConfig,
    qd: &QdConfig,
    rng: &mut Rng,
) -> Result<FeatureMap>
where
    F: Fn(&[f64]) -> Option<Evaluation> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Validation("map_elites needs at least one seed".into()));
    }
    let mut me = MapElites::new(objective, bounds, config, qd)?;
    me.offer_all(seeds.to_vec())?;
    if me.map.is_empty() {
        return Err(Error::EmptyMap);
    }
    for _ in 0..qd.generations {
        me.generation(rng)?;
    }
    Ok(me.into_map())
}

/// A precisely evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub genome: Genome,
    pub fitness: f64,
    pub features: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidSample {
    pub genome: Genome,
    pub reason: String,
}

/// Source of precise evaluations for SAIL.
pub trait Evaluator: Sync {
    /// Features computable without a precise evaluation. `None` means they
    /// have to be modelled from observations.
    fn cheap_features(&self, genome: &[f64]) -> Option<[f64; 2]>;

    /// One outcome per genome, in input order.
    fn evaluate_batch(&self, genomes: &[Genome]) -> Vec<std::result::Result<Evaluation, String>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SailConfig {
    pub batch_size: usize,
    pub ucb: UcbConfig,
    pub qd: QdConfig,
    pub gp: GpConfig,
}

impl Default for SailConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            ucb: UcbConfig::default(),
            qd: QdConfig::default(),
            gp: GpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SailPhase {
    Acquisition,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SailProgress {
    pub phase: SailPhase,
    pub round: usize,
    pub rounds: usize,
    pub samples_acquired: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "message")]
pub enum SailStatus {
    Complete,
    /// The acquisition map ran out of unevaluated candidates.
    BudgetUnfilled(String),
}

pub struct SailOutcome {
    pub prediction_map: FeatureMap,
    pub model: GpModel,
    pub new_observations: Vec<Observation>,
    pub invalid: Vec<InvalidSample>,
    pub status: SailStatus,
}

enum Features<'a> {
    Exact(&'a dyn Evaluator),
    Modelled([GpModel; 2]),
}

impl Features<'_> {
    fn get(&self, genome: &[f64], config: &MapConfig) -> Option<[f64; 2]> {
        match self {
            Features::Exact(ev) => ev.cheap_features(genome),
            Features::Modelled([a, b]) => {
                let f = [a.predict_mean(genome).ok()?, b.predict_mean(genome).ok()?];
                Some(config.clamp_features(f))
            }
        }
    }
}

fn genome_key(g: &[f64]) -> Vec<u64> {
    g.iter().map(|v| v.to_bits()).collect()
}

struct Sail<'a> {
    bounds: &'a Bounds,
    config: &'a MapConfig,
    cfg: &'a SailConfig,
    evaluator: &'a dyn Evaluator,
    rng: &'a Rng,
}

impl Sail<'_> {
    fn fit(&self, obs: &[Observation], label: &str) -> Result<GpModel> {
        let x: Vec<Genome> = obs.iter().map(|o| o.genome.clone()).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.fitness).collect();
        GpModel::fit(&x, &y, self.bounds, &self.cfg.gp, &mut self.rng.split(label))
    }

    fn features(&self, obs: &[Observation], probe: &[f64], label: &str) -> Result<Features<'_>> {
        if self.evaluator.cheap_features(probe).is_some() {
            return Ok(Features::Exact(self.evaluator));
        }
        let x: Vec<Genome> = obs.iter().map(|o| o.genome.clone()).collect();
        let fit = |k: usize| {
            let y: Vec<f64> = obs.iter().map(|o| o.features[k]).collect();
            GpModel::fit(&x, &y, self.bounds, &self.cfg.gp, &mut self.rng.split(&format!("{label}-f{k}")))
        };
        Ok(Features::Modelled([fit(0)?, fit(1)?]))
    }

    fn illuminate(&self, model: &GpModel, features: &Features<'_>, ucb_cfg: UcbConfig, seeds: &[Genome], label: &str) -> Result<FeatureMap> {
        let objective = |g: &[f64]| {
            let f = features.get(g, self.config)?;
            let fitness = if ucb_cfg.kappa == 0.0 {
                model.predict_mean(g).ok()?
            } else {
                let p = model.predict(g).ok()?;
                ucb(p.mean, p.std, ucb_cfg)
            };
            Some(Evaluation { fitness, features: f })
        };
        map_elites(objective, seeds, self.bounds, self.config, &self.cfg.qd, &mut self.rng.split(label))
    }
}

/// Surrogate-assisted illumination.
///
/// Each acquisition round fits the GP on all valid observations, illuminates
/// an acquisition map with UCB fitness starting from `seeds`, and picks
/// `batch_size` elites from bins hit by a Sobol sequence over feature space.
/// The picks are precisely evaluated and join both the observations and the
/// seed set. Afterwards the GP is refit and a prediction map is illuminated
/// with the posterior mean from the same seed set.
#[allow(clippy::too_many_arguments)]
pub fn sail(
    observed: &[Observation],
    seeds: &[Genome],
    sample_budget: usize,
    bounds: &Bounds,
    config: &MapConfig,
    cfg: &SailConfig,
    evaluator: &dyn Evaluator,
    rng: &Rng,
    progress: &(dyn Fn(SailProgress) + Sync),
) -> Result<SailOutcome> {
    if observed.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if cfg.batch_size == 0 || sample_budget % cfg.batch_size != 0 {
        return Err(Error::Validation(format!(
            "sample budget {sample_budget} is not a multiple of batch size {}",
            cfg.batch_size
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Validation("SAIL needs at least one seed".into()));
    }
    config.validate()?;

    let ctx = Sail {
        bounds,
        config,
        cfg,
        evaluator,
        rng,
    };
    let rounds = sample_budget / cfg.batch_size;
    let mut obs = observed.to_vec();
    let mut seeds = seeds.to_vec();
    let mut new_obs = Vec::new();
    let mut invalid = Vec::new();
    let mut status = SailStatus::Complete;
    let mut seen: HashSet<Vec<u64>> = obs.iter().map(|o| genome_key(&o.genome)).collect();
    let mut sobol = SobolSequence::with_skip(2, 1 + observed.len() as u64)?;

    for round in 0..rounds {
        progress(SailProgress {
            phase: SailPhase::Acquisition,
            round,
            rounds,
            samples_acquired: new_obs.len(),
        });
        let model = ctx.fit(&obs, &format!("gp-{round}"))?;
        let features = ctx.features(&obs, &seeds[0], &format!("features-{round}"))?;
        let acq = ctx.illuminate(&model, &features, cfg.ucb, &seeds, &format!("acquisition-{round}"))?;

        let mut eligible: HashSet<usize> = acq
            .elites()
            .filter(|(_, e)| !seen.contains(&genome_key(&e.genome)))
            .map(|(b, _)| config.flat_index(b))
            .collect();
        let mut picks: Vec<Genome> = Vec::with_capacity(cfg.batch_size);
        let max_draws = 64 * config.bin_count();
        let mut draws = 0;
        while picks.len() < cfg.batch_size && !eligible.is_empty() && draws < max_draws {
            draws += 1;
            let u = sobol.next_point();
            let bin = config.niche_index(config.from_unit([u[0], u[1]]))?;
            if eligible.remove(&config.flat_index(bin)) {
                let g = acq.get(bin).expect("eligible bins are occupied").genome.clone();
                seen.insert(genome_key(&g));
                picks.push(g);
            }
        }

        let results = evaluator.evaluate_batch(&picks);
        for (g, r) in picks.iter().zip(results) {
            match r {
                Ok(e) if e.fitness.is_finite() && e.features.iter().all(|f| f.is_finite()) => {
                    let o = Observation {
                        genome: g.clone(),
                        fitness: e.fitness,
                        features: e.features,
                    };
                    seeds.push(g.clone());
                    obs.push(o.clone());
                    new_obs.push(o);
                }
                Ok(_) => invalid.push(InvalidSample {
                    genome: g.clone(),
                    reason: "non-finite evaluation".into(),
                }),
                Err(reason) => invalid.push(InvalidSample {
                    genome: g.clone(),
                    reason,
                }),
            }
        }
        if picks.len() < cfg.batch_size {
            let msg = format!(
                "acquisition map exhausted in round {round}: {} of {} samples selected",
                picks.len(),
                cfg.batch_size
            );
            log::warn!("{msg}");
            status = SailStatus::BudgetUnfilled(msg);
            break;
        }
    }

    progress(SailProgress {
        phase: SailPhase::Prediction,
        round: rounds,
        rounds,
        samples_acquired: new_obs.len(),
    });
    let model = ctx.fit(&obs, "gp-final")?;
    let features = ctx.features(&obs, &seeds[0], "features-final")?;
    let prediction_map = ctx.illuminate(&model, &features, UcbConfig { kappa: 0.0 }, &seeds, "prediction")?;
    Ok(SailOutcome {
        prediction_map,
        model,
        new_observations: new_obs,
        invalid,
        status,
    })
}
