//! Generation-by-generation simulation of the branching process.
//!
//! Trial `i` of a batch draws from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `i`, so outcomes do not depend on how trials are scheduled.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Model, PhaseSet, TypeId};

/// Censored fraction above which an estimate is not certified.
pub const MAX_CENSORED_FRACTION: f64 = 0.01;
pub const MIN_TRIALS: usize = 100;
/// Counts above this are split with a normal approximation.
const EXACT_BINOMIAL_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone)]
pub enum MonteCarloError {
    #[error("need at least {MIN_TRIALS} trials, got {0}")]
    TooFewTrials(usize),
    #[error("{censored} of {trials} trials censored")]
    TooCensored {
        censored: usize,
        trials: usize,
        estimate: Box<Estimate>,
    },
    #[error("invalid trial configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialConfig {
    pub root: TypeId,
    pub max_generations: usize,
    /// Size of the `A` subpopulation at which a trial counts as surviving in `A`.
    pub max_population: f64,
    /// Length of each of the two `A`-free windows required for extinction in `A`.
    pub quiet_generations: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            root: TypeId::new(0, 1),
            max_generations: 2000,
            max_population: 1e6,
            quiet_generations: 200,
            seed: 0,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), MonteCarloError> {
        if self.max_generations == 0 || self.quiet_generations == 0 || !(self.max_population > 0.0)
        {
            return Err(MonteCarloError::InvalidConfig(
                "caps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    ExtinctGlobal,
    ExtinctInA,
    SurvivedInA,
    Censored,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExtinctGlobal => "extinct_global",
            Self::ExtinctInA => "extinct_in_a",
            Self::SurvivedInA => "survived_in_a",
            Self::Censored => "censored",
        }
    }

    /// Counts towards extinction in `A`.
    pub fn is_extinct_in_a(self) -> bool {
        matches!(self, Self::ExtinctGlobal | Self::ExtinctInA)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial_id: u64,
    pub classification: Classification,
    pub generations_run: usize,
    pub peak_population: f64,
}

fn rng_for(seed: u64, trial_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id);
    rng
}

fn binomial(n: f64, p: f64, rng: &mut ChaCha8Rng) -> f64 {
    if n <= 0.0 || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return n;
    }
    if n <= EXACT_BINOMIAL_LIMIT {
        Binomial::new(n as u64, p)
            .expect("valid binomial")
            .sample(rng) as f64
    } else {
        let mean = n * p;
        let sd = (n * p * (1.0 - p)).sqrt();
        Normal::new(mean, sd)
            .expect("valid normal")
            .sample(rng)
            .round()
            .clamp(0.0, n)
    }
}

/// Atoms as `(probability, [(dense child index, count)])`.
struct CompiledLaw {
    atoms: Vec<(f64, Vec<(usize, f64)>)>,
    in_target: bool,
}

/// Laws compiled on first use, indexed by [`TypeId::index`].
struct LawTable<'a> {
    model: &'a Model,
    target: &'a PhaseSet,
    laws: Vec<Option<CompiledLaw>>,
}

impl<'a> LawTable<'a> {
    fn new(model: &'a Model, target: &'a PhaseSet) -> Self {
        Self {
            model,
            target,
            laws: Vec::new(),
        }
    }

    fn get(&mut self, idx: usize) -> &CompiledLaw {
        if idx >= self.laws.len() {
            self.laws.resize_with(idx + 1, || None);
        }
        let (model, target) = (self.model, self.target);
        self.laws[idx].get_or_insert_with(|| {
            let d = model.d();
            let t = TypeId::from_index(idx, d);
            let atoms = model
                .law(t)
                .atoms()
                .iter()
                .map(|a| {
                    let children = a
                        .children
                        .iter()
                        .map(|&(c, n)| (c.index(d), f64::from(n)))
                        .collect();
                    (a.prob, children)
                })
                .collect();
            CompiledLaw {
                atoms,
                in_target: target.contains(t),
            }
        })
    }
}

/// Counts by dense type index, with the occupied range tracked.
#[derive(Default)]
struct Population {
    counts: Vec<f64>,
    lo: usize,
    hi: usize,
}

impl Population {
    fn single(idx: usize) -> Self {
        let mut counts = vec![0.0; idx + 1];
        counts[idx] = 1.0;
        Self {
            counts,
            lo: idx,
            hi: idx + 1,
        }
    }

    fn clear(&mut self) {
        if self.lo < self.hi {
            self.counts[self.lo..self.hi]
                .iter_mut()
                .for_each(|c| *c = 0.0);
        }
        self.lo = usize::MAX;
        self.hi = 0;
    }

    fn add(&mut self, idx: usize, n: f64) {
        if idx >= self.counts.len() {
            self.counts.resize(idx + 1, 0.0);
        }
        self.counts[idx] += n;
        self.lo = self.lo.min(idx);
        self.hi = self.hi.max(idx + 1);
    }

    fn occupied(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.lo..self.hi)
            .map(|i| (i, self.counts[i]))
            .filter(|&(_, n)| n > 0.0)
    }

    fn total(&self) -> f64 {
        self.occupied().map(|(_, n)| n).sum()
    }
}

/// Replaces `next` with the offspring of `pop`.
fn step(laws: &mut LawTable, pop: &Population, next: &mut Population, rng: &mut ChaCha8Rng) {
    next.clear();
    for (idx, count) in pop.occupied() {
        let law = laws.get(idx);
        let mut left = count;
        let mut mass = 1.0;
        for (prob, children) in &law.atoms {
            if left <= 0.0 {
                break;
            }
            let drawn = if mass <= *prob {
                left
            } else {
                binomial(left, prob / mass, rng)
            };
            left -= drawn;
            mass -= prob;
            if drawn > 0.0 {
                for &(child, n) in children {
                    next.add(child, drawn * n);
                }
            }
        }
    }
}

/// Runs one trial of the process started from `cfg.root`.
///
/// Extinction in `A` is declared after `2 * quiet_generations` consecutive
/// generations without an `A` type; the second window is the taboo check of
/// the current population. Survival in `A` is declared once the `A`
/// subpopulation reaches `max_population`.
pub fn simulate_trial(
    model: &Model,
    target: &PhaseSet,
    cfg: &TrialConfig,
    trial_id: u64,
) -> TrialOutcome {
    simulate_with(&mut LawTable::new(model, target), cfg, trial_id)
}

fn simulate_with(laws: &mut LawTable, cfg: &TrialConfig, trial_id: u64) -> TrialOutcome {
    let mut rng = rng_for(cfg.seed, trial_id);
    let root = cfg.root.index(laws.model.d());
    let mut pop = Population::single(root);
    let mut next = Population::default();
    let mut quiet = if laws.get(root).in_target { 0 } else { 1 };
    let mut peak = 1.0f64;
    for generation in 1..=cfg.max_generations {
        step(laws, &pop, &mut next, &mut rng);
        std::mem::swap(&mut pop, &mut next);
        let mut total = 0.0;
        let mut in_a = 0.0;
        for (idx, n) in pop.occupied() {
            total += n;
            if laws.get(idx).in_target {
                in_a += n;
            }
        }
        peak = peak.max(total);
        let outcome = |classification| TrialOutcome {
            trial_id,
            classification,
            generations_run: generation,
            peak_population: peak,
        };
        if total == 0.0 {
            return outcome(Classification::ExtinctGlobal);
        }
        if in_a >= cfg.max_population {
            return outcome(Classification::SurvivedInA);
        }
        if in_a > 0.0 {
            quiet = 0;
        } else {
            quiet += 1;
            if quiet >= 2 * cfg.quiet_generations {
                return outcome(Classification::ExtinctInA);
            }
        }
    }
    TrialOutcome {
        trial_id,
        classification: Classification::Censored,
        generations_run: cfg.max_generations,
        peak_population: peak,
    }
}

/// Runs trials `0..n_trials` in parallel; the result is ordered by trial id.
pub fn run_trials(
    model: &Model,
    target: &PhaseSet,
    cfg: &TrialConfig,
    n_trials: usize,
) -> Vec<TrialOutcome> {
    (0..n_trials as u64)
        .into_par_iter()
        .map_init(
            || LawTable::new(model, target),
            |laws, id| simulate_with(laws, cfg, id),
        )
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub censored_fraction: f64,
    pub trials: usize,
    pub counts: BTreeMap<Classification, usize>,
}

impl Estimate {
    pub fn from_outcomes(outcomes: &[TrialOutcome]) -> Self {
        let mut counts = BTreeMap::new();
        for o in outcomes {
            *counts.entry(o.classification).or_insert(0) += 1;
        }
        let censored = counts.get(&Classification::Censored).copied().unwrap_or(0);
        let decided = outcomes.len() - censored;
        let extinct = outcomes
            .iter()
            .filter(|o| o.classification.is_extinct_in_a())
            .count();
        let (estimate, standard_error) = if decided == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let p = extinct as f64 / decided as f64;
            (p, (p * (1.0 - p) / decided as f64).sqrt())
        };
        Self {
            estimate,
            standard_error,
            censored_fraction: censored as f64 / outcomes.len().max(1) as f64,
            trials: outcomes.len(),
            counts,
        }
    }

    pub fn count(&self, c: Classification) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }
}

/// Binomial estimate of extinction in `A` among non-censored trials.
pub fn estimate_q(
    model: &Model,
    target: &PhaseSet,
    cfg: &TrialConfig,
    n_trials: usize,
) -> Result<Estimate, MonteCarloError> {
    if n_trials < MIN_TRIALS {
        return Err(MonteCarloError::TooFewTrials(n_trials));
    }
    cfg.validate()?;
    let est = Estimate::from_outcomes(&run_trials(model, target, cfg, n_trials));
    let censored = est.count(Classification::Censored);
    if est.censored_fraction >= MAX_CENSORED_FRACTION {
        return Err(MonteCarloError::TooCensored {
            censored,
            trials: n_trials,
            estimate: Box::new(est),
        });
    }
    Ok(est)
}

/// Sample means of the number of level-`k+1` individuals, by phase, produced
/// by the process that reproduces only on levels `0..=k`.
#[derive(Clone, Debug, Serialize)]
pub struct FirstPassageEstimate {
    pub level: usize,
    pub mean: DMatrix<f64>,
    pub standard_error: DMatrix<f64>,
    pub censored: usize,
    pub trials_per_phase: usize,
}

/// Counts of level-`k+1` arrivals by phase, or `None` when the trial hit a cap.
fn first_passage_trial(
    laws: &mut LawTable,
    start: TypeId,
    cfg: &TrialConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let d = laws.model.d();
    let top = (start.level + 1) * d;
    let mut counts = vec![0.0; d];
    let mut pop = Population::single(start.index(d));
    let mut next = Population::default();
    for _ in 0..cfg.max_generations {
        step(laws, &pop, &mut next, rng);
        std::mem::swap(&mut pop, &mut next);
        for idx in top.max(pop.lo)..pop.hi.max(top) {
            counts[idx % d] += pop.counts[idx];
            pop.counts[idx] = 0.0;
        }
        pop.hi = pop.hi.min(top);
        let total = if pop.lo < pop.hi { pop.total() } else { 0.0 };
        if total == 0.0 {
            return Some(counts);
        }
        if total >= cfg.max_population {
            return None;
        }
    }
    None
}

pub fn estimate_first_passage_means(
    model: &Model,
    k: usize,
    n_trials: usize,
    cfg: &TrialConfig,
) -> Result<FirstPassageEstimate, MonteCarloError> {
    if n_trials < MIN_TRIALS {
        return Err(MonteCarloError::TooFewTrials(n_trials));
    }
    cfg.validate()?;
    let d = model.d();
    let everything = PhaseSet::all(d);
    let mut mean = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    let mut censored = 0;
    for i in 1..=d {
        let start = TypeId::new(k, i);
        let stream_base = (i as u64 - 1) * n_trials as u64;
        let samples: Vec<Option<Vec<f64>>> = (0..n_trials as u64)
            .into_par_iter()
            .map_init(
                || LawTable::new(model, &everything),
                |laws, id| {
                    let mut rng = rng_for(cfg.seed, stream_base + id);
                    first_passage_trial(laws, start, cfg, &mut rng)
                },
            )
            .collect();
        let done: Vec<&Vec<f64>> = samples.iter().flatten().collect();
        censored += samples.len() - done.len();
        let m = done.len().max(1) as f64;
        for j in 0..d {
            let mu = done.iter().map(|c| c[j]).sum::<f64>() / m;
            let var = done.iter().map(|c| (c[j] - mu).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            mean[(i - 1, j)] = mu;
            se[(i - 1, j)] = (var / m).sqrt();
        }
    }
    if censored as f64 >= MAX_CENSORED_FRACTION * (d * n_trials) as f64 {
        return Err(MonteCarloError::TooCensored {
            censored,
            trials: d * n_trials,
            estimate: Box::new(Estimate {
                estimate: f64::NAN,
                standard_error: f64::NAN,
                censored_fraction: censored as f64 / (d * n_trials) as f64,
                trials: d * n_trials,
                counts: BTreeMap::new(),
            }),
        });
    }
    Ok(FirstPassageEstimate {
        level: k,
        mean,
        standard_error: se,
        censored,
        trials_per_phase: n_trials,
    })
}
