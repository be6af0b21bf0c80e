//! The ideation loop: illuminate, extract classes, present prototypes, take
//! a selection and seed the next iteration with the selected classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clustering::{extract_classes, ClassPartition, ClusterConfig};
use crate::domains::{Domain, ExternalConfig};
use crate::embedding::{Embedding, TsneConfig};
use crate::math::stats::{std_dev, Summary};
use crate::math::{euclidean, sobol_points, Rng};
use crate::qd::{sail, Bin, FeatureMap, Observation, SailConfig, SailProgress, SailStatus};
use crate::{Error, Genome, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeationConfig {
    pub domain: String,
    /// Size of the initial Sobol sample.
    pub initial_samples: usize,
    /// Default number of precise evaluations per iteration.
    pub sample_budget: usize,
    pub seed: u64,
    pub sail: SailConfig,
    pub tsne: TsneConfig,
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
}

impl Default for IdeationConfig {
    fn default() -> Self {
        Self {
            domain: "airfoil2d".into(),
            initial_samples: 50,
            sample_budget: 100,
            seed: 0,
            sail: SailConfig::default(),
            tsne: TsneConfig::default(),
            cluster: ClusterConfig::default(),
            external: None,
        }
    }
}

impl IdeationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_samples == 0 {
            return Err(Error::Validation("initial_samples must be positive; the surrogate needs data".into()));
        }
        if self.sail.batch_size == 0 || self.sample_budget % self.sail.batch_size != 0 {
            return Err(Error::Validation(format!(
                "sample_budget {} must be a multiple of batch_size {}",
                self.sample_budget, self.sail.batch_size
            )));
        }
        if self.cluster.min_pts == 0 {
            return Err(Error::Validation("min_pts must be positive".into()));
        }
        self.sail.qd.validate()
    }
}

/// A precisely evaluated design. `iteration` is 0 for the initial sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub genome: Genome,
    pub fitness: f64,
    pub features: [f64; 2],
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidEntry {
    pub genome: Genome,
    pub reason: String,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: usize,
    /// Position of the medoid among the iteration's elites.
    pub elite: usize,
    pub bin: Bin,
    pub genome: Genome,
    pub predicted_fitness: f64,
    pub class_size: usize,
    pub node_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub sample_budget: usize,
    pub seed_count: usize,
    pub samples_acquired: usize,
    pub invalid_samples: usize,
    pub status: SailStatus,
    pub prediction_map: FeatureMap,
    /// Bins of the prediction-map elites, row-major; aligned with the
    /// embedding points and partition labels.
    pub elite_bins: Vec<Bin>,
    /// Whether each elite's genome was precisely evaluated.
    pub precise: Vec<bool>,
    pub embedding: Embedding,
    pub partition: ClassPartition,
    pub prototypes: Vec<Prototype>,
    /// Selected class ids, empty until a selection is made.
    pub selection: Vec<usize>,
}

impl IterationRecord {
    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn elite_genomes(&self) -> Vec<Genome> {
        self.elite_bins
            .iter()
            .map(|b| self.prediction_map.get(*b).expect("elite bin occupied").genome.clone())
            .collect()
    }

    /// Elite genomes labelled with any of `classes`.
    pub fn class_members(&self, classes: &[usize]) -> Vec<Genome> {
        self.elite_bins
            .iter()
            .zip(&self.partition.labels)
            .filter(|(_, l)| **l >= 0 && classes.contains(&(**l as usize)))
            .map(|(b, _)| self.prediction_map.get(*b).expect("elite bin occupied").genome.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: usize,
    pub parent_id: Option<usize>,
    pub iteration: usize,
    pub class: usize,
    pub genome: Genome,
    pub class_size: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeationRun {
    pub schema_version: u32,
    pub run_id: String,
    pub config: IdeationConfig,
    pub archive: Vec<ArchiveEntry>,
    pub invalid: Vec<InvalidEntry>,
    pub iterations: Vec<IterationRecord>,
    pub tree: Vec<TreeNode>,
}

impl IdeationRun {
    pub fn latest(&self) -> Option<&IterationRecord> {
        self.iterations.last()
    }

    pub fn awaiting_selection(&self) -> bool {
        self.latest().is_some_and(|it| it.selection.is_empty())
    }

    pub fn iteration(&self, index: usize) -> Result<&IterationRecord> {
        index
            .checked_sub(1)
            .and_then(|i| self.iterations.get(i))
            .ok_or_else(|| Error::NotFound(format!("iteration {index}")))
    }

    /// Seeds for the next iteration: all initial samples before the first
    /// iteration, afterwards the members of the selected classes.
    pub fn next_seeds(&self) -> Result<Vec<Genome>> {
        match self.latest() {
            None => Ok(self.archive.iter().filter(|a| a.iteration == 0).map(|a| a.genome.clone()).collect()),
            Some(it) if it.selection.is_empty() => Err(Error::Conflict(format!(
                "iteration {} awaits a selection",
                it.index
            ))),
            Some(it) => Ok(it.class_members(&it.selection)),
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.archive
            .iter()
            .map(|a| Observation {
                genome: a.genome.clone(),
                fitness: a.fitness,
                features: a.features,
            })
            .collect()
    }
}

/// Draws and evaluates the initial Sobol sample.
pub fn start_run(config: IdeationConfig, domain: &dyn Domain, run_id: impl Into<String>) -> Result<IdeationRun> {
    config.validate()?;
    let descriptor = domain.descriptor();
    if descriptor.name != config.domain {
        return Err(Error::Validation(format!(
            "config names domain {} but {} was supplied",
            config.domain, descriptor.name
        )));
    }
    let bounds = &descriptor.bounds;
    let genomes: Vec<Genome> = sobol_points(bounds.dim(), config.initial_samples, 1)?
        .iter()
        .map(|u| bounds.denormalize(u))
        .collect();
    let outcomes = domain.evaluate_batch(&genomes);
    let mut archive = Vec::new();
    let mut invalid = Vec::new();
    for (genome, outcome) in genomes.into_iter().zip(outcomes) {
        match outcome {
            Ok(e) if e.fitness.is_finite() => archive.push(ArchiveEntry {
                genome,
                fitness: e.fitness,
                features: e.features,
                iteration: 0,
            }),
            Ok(e) => invalid.push(InvalidEntry {
                genome,
                reason: format!("non-finite fitness {}", e.fitness),
                iteration: 0,
            }),
            Err(reason) => invalid.push(InvalidEntry {
                genome,
                reason,
                iteration: 0,
            }),
        }
    }
    if 2 * invalid.len() > config.initial_samples {
        return Err(Error::Initialization(format!(
            "{} of {} initial designs could not be evaluated",
            invalid.len(),
            config.initial_samples
        )));
    }
    Ok(IdeationRun {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.into(),
        config,
        archive,
        invalid,
        iterations: Vec::new(),
        tree: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Progress {
    Illuminating(SailProgress),
    ExtractingClasses { elites: usize },
}

/// One pass of illuminate / extract / present. The new record awaits a
/// selection.
pub fn run_iteration<'a>(
    run: &'a mut IdeationRun,
    domain: &dyn Domain,
    sample_budget: usize,
    progress: &(dyn Fn(Progress) + Sync),
) -> Result<&'a IterationRecord> {
    let seeds = run.next_seeds()?;
    let index = run.iterations.len() + 1;
    let descriptor = domain.descriptor();
    let bounds = &descriptor.bounds;
    let rng = Rng::new(run.config.seed).split(&format!("iteration-{index}"));

    let outcome = sail(
        &run.observations(),
        &seeds,
        sample_budget,
        bounds,
        &descriptor.map,
        &run.config.sail,
        domain,
        &rng,
        &|p| progress(Progress::Illuminating(p)),
    )?;
    if let SailStatus::BudgetUnfilled(msg) = &outcome.status {
        log::warn!("iteration {index}: {msg}");
    }

    let map = outcome.prediction_map;
    let elites: Vec<(Bin, Genome, f64)> = map.elites().map(|(b, e)| (b, e.genome.clone(), e.fitness)).collect();
    progress(Progress::ExtractingClasses { elites: elites.len() });
    let unit: Vec<Vec<f64>> = elites.iter().map(|(_, g, _)| bounds.normalize(g)).collect();
    let tsne = TsneConfig {
        seed: rng.split("tsne").seed(),
        ..run.config.tsne.clone()
    };
    let (embedding, partition) = extract_classes(&unit, &tsne, &run.config.cluster)?;

    for o in &outcome.new_observations {
        run.archive.push(ArchiveEntry {
            genome: o.genome.clone(),
            fitness: o.fitness,
            features: o.features,
            iteration: index,
        });
    }
    for s in &outcome.invalid {
        run.invalid.push(InvalidEntry {
            genome: s.genome.clone(),
            reason: s.reason.clone(),
            iteration: index,
        });
    }
    let evaluated: BTreeSet<Vec<u64>> = run.archive.iter().map(|a| bits(&a.genome)).collect();
    let precise = elites.iter().map(|(_, g, _)| evaluated.contains(&bits(g))).collect();

    let parents: Vec<&TreeNode> = match run.iterations.last() {
        Some(prev) => prev.prototypes.iter().filter(|p| prev.selection.contains(&p.class)).map(|p| &run.tree[p.node_id]).collect(),
        None => Vec::new(),
    };
    let mut prototypes = Vec::with_capacity(partition.class_count());
    let mut nodes = Vec::with_capacity(partition.class_count());
    for (class, &member) in partition.prototypes.iter().enumerate() {
        let (bin, genome, fitness) = elites[member].clone();
        let node_id = run.tree.len() + nodes.len();
        let parent_id = nearest_parent(&parents, &genome, bounds);
        nodes.push(TreeNode {
            node_id,
            parent_id,
            iteration: index,
            class,
            genome: genome.clone(),
            class_size: partition.class_sizes[class],
            selected: false,
        });
        prototypes.push(Prototype {
            class,
            elite: member,
            bin,
            genome,
            predicted_fitness: fitness,
            class_size: partition.class_sizes[class],
            node_id,
        });
    }
    run.tree.extend(nodes);
    run.iterations.push(IterationRecord {
        index,
        sample_budget,
        seed_count: seeds.len(),
        samples_acquired: outcome.new_observations.len(),
        invalid_samples: outcome.invalid.len(),
        status: outcome.status,
        elite_bins: elites.iter().map(|(b, _, _)| *b).collect(),
        precise,
        prediction_map: map,
        embedding,
        partition,
        prototypes,
        selection: Vec::new(),
    });
    Ok(run.iterations.last().expect("just pushed"))
}

fn bits(g: &[f64]) -> Vec<u64> {
    g.iter().map(|x| x.to_bits()).collect()
}

/// With several selected parents, a new prototype hangs below the one
/// closest to it in normalised parameter space.
fn nearest_parent(parents: &[&TreeNode], genome: &[f64], bounds: &crate::Bounds) -> Option<usize> {
    let g = bounds.normalize(genome);
    parents
        .iter()
        .map(|p| (euclidean(&bounds.normalize(&p.genome), &g), p.node_id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Records the selection on the latest iteration.
pub fn select_classes(run: &mut IdeationRun, iteration: usize, classes: &[usize]) -> Result<()> {
    let latest = run.iterations.len();
    if iteration == 0 || iteration > latest {
        return Err(Error::NotFound(format!("iteration {iteration}")));
    }
    if iteration != latest {
        return Err(Error::Conflict(format!(
            "iteration {iteration} is history; only iteration {latest} can be selected from"
        )));
    }
    if classes.is_empty() {
        return Err(Error::Validation("select at least one class".into()));
    }
    let record = run.iterations.last_mut().expect("latest exists");
    if !record.selection.is_empty() {
        return Err(Error::Conflict(format!("iteration {iteration} already has a selection")));
    }
    let k = record.class_count();
    if let Some(bad) = classes.iter().find(|c| **c >= k) {
        return Err(Error::Validation(format!("class {bad} does not exist; iteration has {k} classes")));
    }
    let selection: Vec<usize> = classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    for p in record.prototypes.iter().filter(|p| selection.contains(&p.class)) {
        run.tree[p.node_id].selected = true;
    }
    record.selection = selection;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "value")]
pub enum Policy {
    Largest,
    LargestK(usize),
    NearestPrevious,
    /// Uniform choice; without a seed one is derived from the run seed and
    /// iteration.
    Random(Option<u64>),
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<Option<u64>> {
            a.map(|v| v.parse::<u64>().map_err(|_| Error::Validation(format!("bad policy argument in {s}"))))
                .transpose()
        };
        match name {
            "largest" if arg.is_none() => Ok(Self::Largest),
            "largest-k" => match number(arg)? {
                Some(k) if k > 0 => Ok(Self::LargestK(k as usize)),
                _ => Err(Error::Validation("largest-k needs a positive count, e.g. largest-k=5".into())),
            },
            "nearest-previous" if arg.is_none() => Ok(Self::NearestPrevious),
            "random" => Ok(Self::Random(number(arg)?)),
            _ => Err(Error::Validation(format!(
                "unknown policy {s}; expected largest, largest-k=N, nearest-previous or random[=SEED]"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoSelection {
    pub classes: Vec<usize>,
    /// Fewer classes existed than the policy asked for.
    pub undersupplied: bool,
}

/// Scripted stand-in for the user's choice on the latest iteration.
pub fn auto_select(run: &IdeationRun, policy: Policy) -> Result<AutoSelection> {
    let latest = run.latest().ok_or_else(|| Error::Conflict("no iteration to select from".into()))?;
    let k = latest.class_count();
    if k == 0 {
        return Err(Error::Conflict(format!("iteration {} has no prototypes", latest.index)));
    }
    let by_size = || {
        let mut ids: Vec<usize> = (0..k).collect();
        ids.sort_by(|a, b| latest.prototypes[*b].class_size.cmp(&latest.prototypes[*a].class_size).then(a.cmp(b)));
        ids
    };
    let one = |c| AutoSelection {
        classes: vec![c],
        undersupplied: false,
    };
    match policy {
        Policy::Largest => Ok(one(by_size()[0])),
        Policy::LargestK(n) => {
            let mut ids: Vec<usize> = by_size().into_iter().take(n).collect();
            ids.sort_unstable();
            Ok(AutoSelection {
                classes: ids,
                undersupplied: n > k,
            })
        }
        Policy::NearestPrevious => {
            let prev = run
                .iterations
                .len()
                .checked_sub(2)
                .map(|i| &run.iterations[i])
                .filter(|p| !p.selection.is_empty())
                .ok_or_else(|| Error::Validation("nearest-previous needs a selection in an earlier iteration".into()))?;
            let bounds = crate::domains::descriptor(&run.config.domain)?.bounds;
            let reference = bounds.normalize(&prev.prototypes[prev.selection[0]].genome);
            let best = latest
                .prototypes
                .iter()
                .map(|p| (euclidean(&bounds.normalize(&p.genome), &reference), p.class))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("k > 0");
            Ok(one(best.1))
        }
        Policy::Random(seed) => {
            let mut rng = match seed {
                Some(s) => Rng::new(s).split(&format!("select-{}", latest.index)),
                None => Rng::new(run.config.seed).split(&format!("select-{}", latest.index)),
            };
            Ok(one(rng.below(k)))
        }
    }
}

/// Request to re-execute: each advance with its budget, each selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Advance { iteration: usize, budget: usize },
    Select { iteration: usize, classes: Vec<usize> },
}

/// Rebuilds a run from its configuration and event log.
pub fn replay(config: IdeationConfig, run_id: &str, events: &[RunEvent], domain: &dyn Domain) -> Result<IdeationRun> {
    let mut run = start_run(config, domain, run_id)?;
    for e in events {
        match e {
            RunEvent::Advance { iteration, budget } => {
                if *iteration != run.iterations.len() + 1 {
                    return Err(Error::InvalidData(format!("event log advances to iteration {iteration} out of order")));
                }
                run_iteration(&mut run, domain, *budget, &|_| {})?;
            }
            RunEvent::Select { iteration, classes } => select_classes(&mut run, *iteration, classes)?,
        }
    }
    Ok(run)
}

/// The event log implied by a run's history.
pub fn events_of(run: &IdeationRun) -> Vec<RunEvent> {
    let mut out = Vec::new();
    for it in &run.iterations {
        out.push(RunEvent::Advance {
            iteration: it.index,
            budget: it.sample_budget,
        });
        if !it.selection.is_empty() {
            out.push(RunEvent::Select {
                iteration: it.index,
                classes: it.selection.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub iteration: usize,
    pub elites: usize,
    /// Distance of each elite to the reference in normalised parameter space.
    pub distance: Summary,
    /// Population standard deviation of each normalised parameter.
    pub spread: Vec<f64>,
    pub mean_spread: f64,
    pub predicted_fitness: Summary,
    /// Re-evaluated fitness of the elites, for analytic domains only.
    pub true_fitness: Option<Summary>,
    pub invalid_on_reevaluation: usize,
}

/// Similarity of a prediction map's elites to a reference prototype.
pub fn similarity_report(
    map: &FeatureMap,
    iteration: usize,
    reference: &[f64],
    bounds: &crate::Bounds,
    reevaluate: Option<&dyn Domain>,
) -> Result<SimilarityReport> {
    let elites: Vec<(Genome, f64)> = map.elites().map(|(_, e)| (e.genome.clone(), e.fitness)).collect();
    if elites.is_empty() {
        return Err(Error::EmptyMap);
    }
    if reference.len() != bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dim(),
            found: reference.len(),
        });
    }
    let r = bounds.normalize(reference);
    let unit: Vec<Vec<f64>> = elites.iter().map(|(g, _)| bounds.normalize(g)).collect();
    let distances: Vec<f64> = unit.iter().map(|u| euclidean(u, &r)).collect();
    let spread: Vec<f64> = (0..bounds.dim())
        .map(|k| std_dev(&unit.iter().map(|u| u[k]).collect::<Vec<_>>()))
        .collect();
    let mean_spread = spread.iter().sum::<f64>() / spread.len() as f64;
    let predicted: Vec<f64> = elites.iter().map(|(_, f)| *f).collect();
    let (true_fitness, invalid) = match reevaluate {
        Some(domain) if domain.is_analytic() => {
            let genomes: Vec<Genome> = elites.iter().map(|(g, _)| g.clone()).collect();
            let outcomes = domain.evaluate_batch(&genomes);
            let ok: Vec<f64> = outcomes.iter().filter_map(|o| o.as_ref().ok()).map(|e| e.fitness).collect();
            (Summary::of(&ok), outcomes.len() - ok.len())
        }
        _ => (None, 0),
    };
    Ok(SimilarityReport {
        iteration,
        elites: elites.len(),
        distance: Summary::of(&distances).expect("non-empty"),
        spread,
        mean_spread,
        predicted_fitness: Summary::of(&predicted).expect("non-empty"),
        true_fitness,
        invalid_on_reevaluation: invalid,
    })
}
