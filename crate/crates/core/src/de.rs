//! Bounded differential evolution, DE/rand/1/bin.
//!
//! Generations are synchronous: every trial of generation `g` is built from
//! the population of generation `g`, and selection fills generation `g + 1`.
//! Parent fitness is cached, so each generation costs one evaluation per
//! trial. The stop predicate and the evaluation budget are checked after
//! every single evaluation.

use rand::distributions::OpenClosed01;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DeError {
    #[error("population size {0} is below the minimum of 4")]
    PopulationTooSmall(usize),
    #[error("evaluation budget {budget} cannot cover the initial population of {np}")]
    BudgetTooSmall { budget: usize, np: usize },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("vector length {got} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Box constraints `lower[j] <= r[j] <= upper[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DeError> {
        if lower.len() != upper.len() {
            return Err(DeError::InvalidBounds(format!("{} lower vs {} upper", lower.len(), upper.len())));
        }
        if lower.is_empty() {
            return Err(DeError::InvalidBounds("zero dimensions".into()));
        }
        for (j, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(DeError::InvalidBounds(format!("component {j}: [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval in every one of `dim` components.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self, DeError> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, r: &[f64]) -> bool {
        r.len() == self.dim() && r.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| l <= v && v <= u)
    }

    pub fn clamp(&self, r: &mut [f64]) {
        for ((v, &l), &u) in r.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }

    /// Concatenates two bound sets.
    pub fn concat(&self, other: &Bounds) -> Bounds {
        let mut lower = self.lower.clone();
        lower.extend_from_slice(&other.lower);
        let mut upper = self.upper.clone();
        upper.extend_from_slice(&other.upper);
        Bounds { lower, upper }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub np: usize,
    pub cr: f64,
    pub f: f64,
    pub max_evals: usize,
    pub seed: u64,
    /// Draw the three mutation indices distinct from the target index as
    /// well as from each other.
    pub exclude_target: bool,
    /// Evaluate the trials of a generation in parallel.
    pub concurrent: bool,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self { np: 100, cr: 0.8, f: 0.5, max_evals: 3000, seed: 0, exclude_target: true, concurrent: false }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<(), DeError> {
        if self.np < 4 {
            return Err(DeError::PopulationTooSmall(self.np));
        }
        if !(0.0..=1.0).contains(&self.cr) {
            return Err(DeError::InvalidParameter(format!("cr = {} outside [0, 1]", self.cr)));
        }
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(DeError::InvalidParameter(format!("f = {} must be positive", self.f)));
        }
        if self.max_evals < self.np {
            return Err(DeError::BudgetTooSmall { budget: self.max_evals, np: self.np });
        }
        Ok(())
    }
}

/// A fitness value plus whatever the objective wants to report alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<A> {
    pub fitness: f64,
    pub aux: A,
}

impl Scored<()> {
    pub fn plain(fitness: f64) -> Self {
        Self { fitness, aux: () }
    }
}

/// An evaluated vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<A> {
    pub vector: Vec<f64>,
    pub fitness: f64,
    pub aux: A,
}

/// What the stop predicate sees after each evaluation.
#[derive(Debug)]
pub struct EvalInfo<'a, A> {
    /// 1-based evaluation count, including this one.
    pub evaluations: usize,
    pub generation: usize,
    pub candidate: &'a Candidate<A>,
    pub best_fitness: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult<A> {
    /// Lowest-fitness evaluation seen.
    pub best: Candidate<A>,
    /// The evaluation on which the stop predicate fired.
    pub stopped_on: Option<Candidate<A>>,
    pub evaluations: usize,
    /// Fully completed mutation/crossover/selection rounds.
    pub generations: usize,
    /// Best-so-far fitness after initialization and after each generation.
    pub history: Vec<f64>,
}

impl<A> RunResult<A> {
    pub fn success(&self) -> bool {
        self.stopped_on.is_some()
    }
}

/// `np` vectors with `r_j = L_j + U[0,1) (U_j - L_j)`.
pub fn initialize<R: Rng + ?Sized>(bounds: &Bounds, np: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, DeError> {
    if np < 4 {
        return Err(DeError::PopulationTooSmall(np));
    }
    Ok((0..np)
        .map(|_| {
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(&l, &u)| l + rng.gen::<f64>() * (u - l))
                .collect()
        })
        .collect())
}

/// `v = r_x1 + f (r_x2 - r_x3)` clamped to `bounds`, with `x1, x2, x3`
/// mutually distinct and, if `exclude_target`, distinct from `i`.
pub fn mutate<R: Rng + ?Sized>(
    population: &[Vec<f64>],
    i: usize,
    f: f64,
    bounds: &Bounds,
    exclude_target: bool,
    rng: &mut R,
) -> Result<Vec<f64>, DeError> {
    let np = population.len();
    let needed = if exclude_target { 4 } else { 3 };
    if np < needed || i >= np {
        return Err(DeError::PopulationTooSmall(np));
    }
    let picks: Vec<usize> = if exclude_target {
        index::sample(rng, np - 1, 3).into_iter().map(|x| if x >= i { x + 1 } else { x }).collect()
    } else {
        index::sample(rng, np, 3).into_vec()
    };
    let (a, b, c) = (&population[picks[0]], &population[picks[1]], &population[picks[2]]);
    if a.len() != bounds.dim() {
        return Err(DeError::DimensionMismatch { expected: bounds.dim(), got: a.len() });
    }
    let mut v: Vec<f64> = a.iter().zip(b).zip(c).map(|((a, b), c)| a + f * (b - c)).collect();
    bounds.clamp(&mut v);
    Ok(v)
}

/// Binomial crossover without a forced mutant component: `u_j = v_j` when a
/// draw from `(0, 1]` is `<= cr`, else `r_j`.
pub fn crossover<R: Rng + ?Sized>(r: &[f64], v: &[f64], cr: f64, rng: &mut R) -> Result<Vec<f64>, DeError> {
    if r.len() != v.len() {
        return Err(DeError::DimensionMismatch { expected: r.len(), got: v.len() });
    }
    Ok(r.iter()
        .zip(v)
        .map(|(&rj, &vj)| {
            let draw: f64 = rng.sample(OpenClosed01);
            if draw <= cr {
                vj
            } else {
                rj
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Survivor {
    Parent,
    Trial,
}

/// Greedy selection; ties go to the trial. NaN counts as `+inf`.
pub fn select(parent_fitness: f64, trial_fitness: f64) -> Survivor {
    if sanitize(trial_fitness) <= sanitize(parent_fitness) {
        Survivor::Trial
    } else {
        Survivor::Parent
    }
}

fn sanitize(fitness: f64) -> f64 {
    if fitness.is_nan() {
        log::warn!("fitness returned NaN; treating it as +inf");
        f64::INFINITY
    } else {
        fitness
    }
}

/// Book-keeping shared by the sequential and concurrent drivers.
struct Tracker<A, S> {
    budget: usize,
    evaluations: usize,
    generation: usize,
    best: Option<Candidate<A>>,
    stopped_on: Option<Candidate<A>>,
    stop: S,
}

impl<A: Clone, S: FnMut(&EvalInfo<'_, A>) -> bool> Tracker<A, S> {
    /// Records one evaluation; returns true when the run must end.
    fn record(&mut self, vector: Vec<f64>, scored: Scored<A>) -> (Candidate<A>, bool) {
        self.evaluations += 1;
        let candidate = Candidate { vector, fitness: sanitize(scored.fitness), aux: scored.aux };
        if self.best.as_ref().map_or(true, |b| candidate.fitness < b.fitness) {
            self.best = Some(candidate.clone());
        }
        let info = EvalInfo {
            evaluations: self.evaluations,
            generation: self.generation,
            candidate: &candidate,
            best_fitness: self.best.as_ref().map_or(f64::INFINITY, |b| b.fitness),
        };
        let stop = self.stopped_on.is_none() && (self.stop)(&info);
        if stop {
            self.stopped_on = Some(candidate.clone());
        }
        let done = self.stopped_on.is_some() || self.evaluations >= self.budget;
        (candidate, done)
    }

    fn best_fitness(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.fitness)
    }
}

/// Batch evaluation strategy: sequential evaluation can stop after any
/// single call; concurrent evaluation runs a whole batch first.
trait Evaluator<A> {
    fn evaluate(&mut self, vectors: &[Vec<f64>]) -> Vec<Scored<A>>;
    fn batch_limit(&self) -> usize;
}

struct Sequential<F>(F);

impl<A, F: FnMut(&[f64]) -> Scored<A>> Evaluator<A> for Sequential<F> {
    fn evaluate(&mut self, vectors: &[Vec<f64>]) -> Vec<Scored<A>> {
        vectors.iter().map(|v| (self.0)(v)).collect()
    }

    fn batch_limit(&self) -> usize {
        1
    }
}

struct Concurrent<F>(F);

impl<A: Send, F: Fn(&[f64]) -> Scored<A> + Sync> Evaluator<A> for Concurrent<F> {
    fn evaluate(&mut self, vectors: &[Vec<f64>]) -> Vec<Scored<A>> {
        vectors.par_iter().map(|v| (self.0)(v)).collect()
    }

    fn batch_limit(&self) -> usize {
        usize::MAX
    }
}

/// Minimizes `fitness` over `bounds`, calling it sequentially. `stop` is
/// consulted after every evaluation, including those of the initial
/// population.
pub fn run<A: Clone>(
    fitness: impl FnMut(&[f64]) -> Scored<A>,
    bounds: &Bounds,
    cfg: &DeConfig,
    stop: impl FnMut(&EvalInfo<'_, A>) -> bool,
) -> Result<RunResult<A>, DeError> {
    drive(Sequential(fitness), bounds, cfg, stop)
}

/// As [`run`], evaluating each generation's trials in parallel. Results are
/// processed in index order, so with a stop predicate that never fires the
/// outcome equals the sequential one. When the predicate fires, the rest of
/// that batch has already been evaluated and is counted.
pub fn run_concurrent<A: Clone + Send>(
    fitness: impl Fn(&[f64]) -> Scored<A> + Sync,
    bounds: &Bounds,
    cfg: &DeConfig,
    stop: impl FnMut(&EvalInfo<'_, A>) -> bool,
) -> Result<RunResult<A>, DeError> {
    drive(Concurrent(fitness), bounds, cfg, stop)
}

fn drive<A: Clone, E: Evaluator<A>>(
    mut eval: E,
    bounds: &Bounds,
    cfg: &DeConfig,
    stop: impl FnMut(&EvalInfo<'_, A>) -> bool,
) -> Result<RunResult<A>, DeError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = Tracker { budget: cfg.max_evals, evaluations: 0, generation: 0, best: None, stopped_on: None, stop };
    let mut history = Vec::new();

    let population = initialize(bounds, cfg.np, &mut rng)?;
    let mut scored: Vec<Candidate<A>> = Vec::with_capacity(cfg.np);
    let mut done = false;
    let mut start = 0;
    while start < cfg.np && !done {
        let end = start.saturating_add(eval.batch_limit()).min(cfg.np);
        // Record every result of the batch.
        for (v, s) in population[start..end].iter().zip(eval.evaluate(&population[start..end])) {
            let (c, d) = t.record(v.clone(), s);
            scored.push(c);
            done |= d;
        }
        start = end;
    }
    history.push(t.best_fitness());

    let mut completed = 0;
    while !done {
        t.generation += 1;
        let vectors: Vec<Vec<f64>> = scored.iter().map(|c| c.vector.clone()).collect();
        let trials = (0..cfg.np)
            .map(|i| {
                let v = mutate(&vectors, i, cfg.f, bounds, cfg.exclude_target, &mut rng)?;
                crossover(&vectors[i], &v, cfg.cr, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut next = scored.clone();
        let mut start = 0;
        while start < cfg.np && !done {
            let remaining = cfg.max_evals - t.evaluations;
            let end = (start + eval.batch_limit().min(remaining)).min(cfg.np);
            for (k, s) in (start..end).zip(eval.evaluate(&trials[start..end])) {
                let (c, d) = t.record(trials[k].clone(), s);
                if select(scored[k].fitness, c.fitness) == Survivor::Trial {
                    next[k] = c;
                }
                done |= d;
            }
            start = end;
        }
        if start == cfg.np {
            completed += 1;
        }
        scored = next;
        history.push(t.best_fitness());
    }
    let best = t.best.expect("at least one evaluation");
    Ok(RunResult { best, stopped_on: t.stopped_on, evaluations: t.evaluations, generations: completed, history })
}
