//! Simulated-annealing exploration over the knob space, scored by the
//! ranking cost model, and the measure/fit/search tuning loop around it.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::ConvConfig;
use crate::cost_model::{featurize_unchecked, FeatureVector, FitConfig, RankingCostModel};
use crate::error::{Error, Result};
use crate::schedule::{mutate, KnobSpace, MachineModel, ScheduleConfig};
use crate::sim::{measure, Measurement};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    #[default]
    Diversity,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "diversity" => Ok(Variant::Diversity),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Diversity => "diversity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorerConfig {
    pub variant: Variant,
    pub sa_iters: u32,
    /// SA stops once the best candidate set is unchanged for this many
    /// iterations.
    pub early_stop_rounds: u32,
    pub population: usize,
    pub batch: usize,
    pub elite: usize,
    pub random_per_batch: usize,
    pub temp_start: f64,
    pub temp_cool: f64,
    pub temp_floor: f64,
    pub trial_budget: usize,
    pub init_random_measurements: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Diversity,
            sa_iters: 500,
            early_stop_rounds: 50,
            population: 128,
            batch: 32,
            elite: 31,
            random_per_batch: 1,
            temp_start: 1.0,
            temp_cool: 0.002,
            temp_floor: 1e-3,
            trial_budget: 500,
            init_random_measurements: 32,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

impl ExplorerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.population == 0 || self.batch == 0 {
            return bad("population and batch must be positive");
        }
        if self.elite + self.random_per_batch > self.batch {
            return bad("elite + random_per_batch exceeds batch");
        }
        if !(self.temp_start.is_finite() && self.temp_start > 0.0) {
            return bad("temp_start must be positive");
        }
        if !(self.temp_cool.is_finite() && self.temp_cool >= 0.0) {
            return bad("temp_cool must be non-negative");
        }
        if !(self.temp_floor.is_finite() && self.temp_floor > 0.0) {
            return bad("temp_floor must be positive");
        }
        self.fit.validate()
    }

    /// Temperature at SA iteration `iter` (0-based).
    pub fn temperature(&self, iter: u32) -> f64 {
        (self.temp_start - self.temp_cool * iter as f64).max(self.temp_floor)
    }
}

/// Energy of a schedule, higher is better; `None` marks an invalid one.
pub type Energy<'a> = dyn Fn(&ScheduleConfig) -> Option<f64> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub members: Vec<ScheduleConfig>,
    pub scores: Vec<f64>,
}

impl CandidatePool {
    /// Scores `members`, all of which must be valid.
    pub fn new(members: Vec<ScheduleConfig>, energy: &Energy) -> Result<Self> {
        let scores = members
            .iter()
            .map(|s| {
                energy(s).ok_or_else(|| Error::Argument(format!("pool member {s} is invalid")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members, scores })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn distinct(&self) -> usize {
        self.members.iter().collect::<HashSet<_>>().len()
    }
}

/// Metropolis rule: non-worse mutants are always taken, worse ones with
/// probability `exp(delta / temp)`.
pub fn accept<R: Rng + ?Sized>(parent: f64, mutant: f64, temp: f64, rng: &mut R) -> bool {
    let delta = mutant - parent;
    if delta >= 0.0 {
        return true;
    }
    rng.random::<f64>() < (delta / temp).exp()
}

/// Every candidate proposes one mutant and competes with it.
pub fn sa_step_baseline<R: Rng + ?Sized>(
    pool: &CandidatePool,
    space: &KnobSpace,
    energy: &Energy,
    temp: f64,
    rng: &mut R,
) -> CandidatePool {
    let mut out = pool.clone();
    for i in 0..pool.len() {
        let Ok(m) = mutate(&pool.members[i], space, rng) else {
            continue;
        };
        let Some(s) = energy(&m) else {
            continue;
        };
        if accept(pool.scores[i], s, temp, rng) {
            out.members[i] = m;
            out.scores[i] = s;
        }
    }
    out
}

/// Greedy farthest-point selection of `k` mutants under Hamming distance
/// over knob vectors. Starts from the best-scoring mutant; ties go to the
/// higher score, then the lower index. Returns indices into `mutants`.
pub fn diversity_select(
    mutants: &[ScheduleConfig],
    scores: &[f64],
    k: usize,
) -> Result<Vec<usize>> {
    if mutants.len() != scores.len() {
        return Err(Error::Argument("one score per mutant is required".into()));
    }
    if k > mutants.len() {
        return Err(Error::Argument(format!(
            "cannot select {k} of {} mutants",
            mutants.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let better = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut first = 0;
    for i in 1..mutants.len() {
        if better(i, first) {
            first = i;
        }
    }
    let mut chosen = vec![false; mutants.len()];
    let mut min_dist = vec![u32::MAX; mutants.len()];
    let mut out = Vec::with_capacity(k);
    let mut next = first;
    loop {
        chosen[next] = true;
        out.push(next);
        if out.len() == k {
            return Ok(out);
        }
        let picked = mutants[next];
        let mut best: Option<usize> = None;
        for i in 0..mutants.len() {
            if chosen[i] {
                continue;
            }
            min_dist[i] = min_dist[i].min(mutants[i].hamming(&picked));
            best = match best {
                None => Some(i),
                Some(b)
                    if min_dist[i] > min_dist[b]
                        || (min_dist[i] == min_dist[b] && better(i, b)) =>
                {
                    Some(i)
                }
                keep => keep,
            };
        }
        next = best.expect("k <= mutants");
    }
}

/// Every candidate proposes two mutants; the most diverse half of the
/// valid mutants is kept, and each survivor then competes with the current
/// occupant of its parent's slot.
pub fn sa_step_diverse<R: Rng + ?Sized>(
    pool: &CandidatePool,
    space: &KnobSpace,
    energy: &Energy,
    temp: f64,
    rng: &mut R,
) -> CandidatePool {
    let mut mutants = Vec::with_capacity(2 * pool.len());
    let mut scores = Vec::with_capacity(2 * pool.len());
    let mut parent = Vec::with_capacity(2 * pool.len());
    for i in 0..pool.len() {
        for _ in 0..2 {
            let Ok(m) = mutate(&pool.members[i], space, rng) else {
                continue;
            };
            if let Some(s) = energy(&m) {
                mutants.push(m);
                scores.push(s);
                parent.push(i);
            }
        }
    }
    let k = pool.len().min(mutants.len());
    let mut keep =
        diversity_select(&mutants, &scores, k).expect("k is bounded by the mutant count");
    keep.sort_unstable();
    let mut out = pool.clone();
    for j in keep {
        let i = parent[j];
        if accept(out.scores[i], scores[j], temp, rng) {
            out.members[i] = mutants[j];
            out.scores[i] = scores[j];
        }
    }
    out
}

pub fn sa_step<R: Rng + ?Sized>(
    variant: Variant,
    pool: &CandidatePool,
    space: &KnobSpace,
    energy: &Energy,
    temp: f64,
    rng: &mut R,
) -> CandidatePool {
    match variant {
        Variant::Baseline => sa_step_baseline(pool, space, energy, temp, rng),
        Variant::Diversity => sa_step_diverse(pool, space, energy, temp, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaOutcome {
    pub pool: CandidatePool,
    /// Best distinct unmeasured schedules seen during the run, best first;
    /// the stopping rule watches this set.
    pub best: Vec<(ScheduleConfig, f64)>,
    pub iterations: u32,
}

fn ranks_before(a: &(ScheduleConfig, f64), b: &(ScheduleConfig, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Runs SA from `pool`, tracking the `keep` best distinct schedules outside
/// `measured`; stops after `cfg.sa_iters` or once that set is stable for
/// `cfg.early_stop_rounds` iterations.
pub fn run_sa<R: Rng + ?Sized>(
    mut pool: CandidatePool,
    space: &KnobSpace,
    energy: &Energy,
    measured: &HashSet<ScheduleConfig>,
    keep: usize,
    cfg: &ExplorerConfig,
    rng: &mut R,
) -> SaOutcome {
    let mut best: Vec<(ScheduleConfig, f64)> = Vec::with_capacity(keep + 1);
    let mut stable = 0;
    let mut iterations = 0;
    let offer = |best: &mut Vec<(ScheduleConfig, f64)>, pool: &CandidatePool| {
        let mut changed = false;
        for (m, s) in pool.members.iter().zip(&pool.scores) {
            let cand = (*m, *s);
            if measured.contains(m) || best.iter().any(|b| b.0 == *m) {
                continue;
            }
            let pos = best
                .iter()
                .position(|b| ranks_before(&cand, b))
                .unwrap_or(best.len());
            if pos < keep {
                best.insert(pos, cand);
                best.truncate(keep);
                changed = true;
            }
        }
        changed
    };
    offer(&mut best, &pool);
    while iterations < cfg.sa_iters {
        let temp = cfg.temperature(iterations);
        pool = sa_step(cfg.variant, &pool, space, energy, temp, rng);
        iterations += 1;
        if offer(&mut best, &pool) {
            stable = 0;
        } else {
            stable += 1;
            if stable >= cfg.early_stop_rounds {
                break;
            }
        }
    }
    SaOutcome {
        pool,
        best,
        iterations,
    }
}

/// Up to `limit` distinct unmeasured schedules: the `elite` best-scored
/// candidates, then uniformly random unmeasured valid schedules.
pub fn propose_batch<R: Rng + ?Sized>(
    candidates: &[(ScheduleConfig, f64)],
    measured: &HashSet<ScheduleConfig>,
    valid: &[ScheduleConfig],
    elite: usize,
    limit: usize,
    rng: &mut R,
) -> Result<Vec<ScheduleConfig>> {
    let mut ranked: Vec<(ScheduleConfig, f64)> = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut batch: Vec<ScheduleConfig> = Vec::with_capacity(limit);
    let mut taken: HashSet<ScheduleConfig> = HashSet::new();
    for (s, _) in ranked {
        if batch.len() >= elite.min(limit) {
            break;
        }
        if !measured.contains(&s) && taken.insert(s) {
            batch.push(s);
        }
    }
    let rest: Vec<ScheduleConfig> = valid
        .iter()
        .filter(|s| !measured.contains(*s) && !taken.contains(*s))
        .copied()
        .collect();
    let fill = limit - batch.len();
    batch.extend(rest.choose_multiple(rng, fill).copied());
    if batch.is_empty() && limit > 0 {
        return Err(Error::Exhausted);
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Start {
        conv: ConvConfig,
        machine: MachineModel,
        space: KnobSpace,
        config: ExplorerConfig,
        noise_sigma: f64,
        valid_configs: usize,
    },
    Round {
        round: usize,
        trials_before: usize,
        sa_iterations: u32,
        /// Distinct schedules in the final SA population.
        pool_distinct: usize,
        /// Batch members taken from that population rather than drawn at
        /// random.
        batch_from_pool: usize,
        batch: usize,
        model: Option<RankingCostModel>,
    },
    Trial {
        trial: usize,
        round: usize,
        measurement: Measurement,
    },
    End {
        trials: usize,
        exhausted: bool,
        best_runtime: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub events: Vec<TraceEvent>,
}

impl TuneTrace {
    pub fn trials(&self) -> impl Iterator<Item = &Measurement> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Trial { measurement, .. } => Some(measurement),
            _ => None,
        })
    }

    pub fn len(&self) -> usize {
        self.trials().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Best runtime after each trial.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trials()
            .map(|m| {
                best = best.min(m.runtime);
                best
            })
            .collect()
    }

    /// Best runtime after `n` trials (or all of them, if fewer).
    pub fn best_at(&self, n: usize) -> Option<f64> {
        let curve = self.best_so_far();
        curve.get(n.min(curve.len()).checked_sub(1)?).copied()
    }

    pub fn best(&self) -> Option<&Measurement> {
        self.trials().min_by(|a, b| a.runtime.total_cmp(&b.runtime))
    }

    /// Distinct-pool sizes of the SA rounds.
    pub fn pool_distinct(&self) -> Vec<usize> {
        self.rounds().map(|(d, _)| d).collect()
    }

    /// Per SA round, how many batch members came from the SA population.
    pub fn batch_from_pool(&self) -> Vec<usize> {
        self.rounds().map(|(_, b)| b).collect()
    }

    fn rounds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Round {
                round,
                pool_distinct,
                batch_from_pool,
                ..
            } if *round > 0 => Some((*pool_distinct, *batch_from_pool)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).map_err(|e| Error::Json {
                path: "<trace>".into(),
                source: e,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let f = std::fs::File::open(path).map_err(|e| Error::Io {
            path: name.clone(),
            source: e,
        })?;
        let mut events = Vec::new();
        for (no, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::Io {
                path: name.clone(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| Error::Json {
                path: format!("{name}:{}", no + 1),
                source: e,
            })?);
        }
        Ok(Self { events })
    }
}

/// Per-trial noise stream, independent of scheduling and thread count.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(trial as u64 + 1);
    r
}

fn measure_batch(
    workload: &Workload,
    batch: &[ScheduleConfig],
    first_trial: usize,
    seed: u64,
    noise_sigma: f64,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Measurement>> {
    pool.install(|| {
        batch
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                measure(
                    workload,
                    s,
                    noise_sigma,
                    &mut trial_rng(seed, first_trial + k),
                )
            })
            .collect()
    })
}

/// The full tuning loop: random initial measurements, then rounds of
/// fit, SA and batch measurement until the budget or the space runs out.
///
/// `jobs` sets the measurement thread count (0 lets rayon decide); the
/// trace does not depend on it.
pub fn tune(
    workload: &Workload,
    space: &KnobSpace,
    cfg: &ExplorerConfig,
    noise_sigma: f64,
    jobs: usize,
) -> Result<TuneTrace> {
    cfg.validate()?;
    let valid = workload.enumerate(space)?;
    if valid.is_empty() {
        return Err(Error::Config(
            "the knob space has no valid schedule for this convolution".into(),
        ));
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let features: HashMap<ScheduleConfig, FeatureVector> = valid
        .iter()
        .map(|s| (*s, featurize_unchecked(workload, s)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TuneTrace::default();
    trace.events.push(TraceEvent::Start {
        conv: *workload.conv(),
        machine: *workload.machine(),
        space: space.clone(),
        config: cfg.clone(),
        noise_sigma,
        valid_configs: valid.len(),
    });
    let mut measured: HashSet<ScheduleConfig> = HashSet::new();
    let mut records: Vec<Measurement> = Vec::new();
    fn record(
        trace: &mut TuneTrace,
        measured: &mut HashSet<ScheduleConfig>,
        records: &mut Vec<Measurement>,
        round: usize,
        batch: Vec<Measurement>,
    ) {
        for m in batch {
            measured.insert(m.schedule);
            trace.events.push(TraceEvent::Trial {
                trial: records.len(),
                round,
                measurement: m.clone(),
            });
            records.push(m);
        }
    }

    let init = cfg
        .init_random_measurements
        .min(cfg.trial_budget)
        .min(valid.len());
    let first: Vec<ScheduleConfig> = valid.choose_multiple(&mut rng, init).copied().collect();
    trace.events.push(TraceEvent::Round {
        round: 0,
        trials_before: 0,
        sa_iterations: 0,
        pool_distinct: 0,
        batch_from_pool: 0,
        batch: first.len(),
        model: None,
    });
    let ms = measure_batch(workload, &first, 0, cfg.seed, noise_sigma, &threads)?;
    record(&mut trace, &mut measured, &mut records, 0, ms);

    let mut model = RankingCostModel::new(cfg.fit);
    let mut exhausted = false;
    let mut round = 0;
    while records.len() < cfg.trial_budget {
        round += 1;
        match model.fit(workload, &records, &mut rng) {
            Ok(m) => model = m,
            Err(Error::DegenerateData(_)) => {}
            Err(e) => return Err(e),
        }
        let scores: HashMap<ScheduleConfig, f64> =
            features.iter().map(|(s, x)| (*s, model.score(x))).collect();
        let energy = |s: &ScheduleConfig| scores.get(s).copied();

        let mut by_runtime: Vec<&Measurement> = records.iter().collect();
        by_runtime.sort_by(|a, b| {
            a.runtime
                .total_cmp(&b.runtime)
                .then(a.schedule.cmp(&b.schedule))
        });
        let mut members: Vec<ScheduleConfig> = by_runtime
            .iter()
            .take(cfg.population / 2)
            .map(|m| m.schedule)
            .collect();
        while members.len() < cfg.population {
            members.push(*valid.choose(&mut rng).expect("valid is non-empty"));
        }
        let pool = CandidatePool::new(members, &energy)?;
        let sa = run_sa(pool, space, &energy, &measured, cfg.elite, cfg, &mut rng);

        let candidates: Vec<(ScheduleConfig, f64)> = sa
            .pool
            .members
            .iter()
            .copied()
            .zip(sa.pool.scores.iter().copied())
            .collect();
        let limit = cfg.batch.min(cfg.trial_budget - records.len());
        let batch = match propose_batch(&candidates, &measured, &valid, cfg.elite, limit, &mut rng)
        {
            Ok(b) => b,
            Err(Error::Exhausted) => {
                exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let from_pool = batch.iter().filter(|s| sa.pool.members.contains(s)).count();
        trace.events.push(TraceEvent::Round {
            round,
            trials_before: records.len(),
            sa_iterations: sa.iterations,
            pool_distinct: sa.pool.distinct(),
            batch_from_pool: from_pool,
            batch: batch.len(),
            model: Some(model.clone()),
        });
        let ms = measure_batch(
            workload,
            &batch,
            records.len(),
            cfg.seed,
            noise_sigma,
            &threads,
        )?;
        record(&mut trace, &mut measured, &mut records, round, ms);
        if records.len() == valid.len() {
            exhausted = records.len() < cfg.trial_budget;
            break;
        }
    }
    trace.events.push(TraceEvent::End {
        trials: records.len(),
        exhausted,
        best_runtime: records
            .iter()
            .map(|m| m.runtime)
            .fold(f64::INFINITY, f64::min),
    });
    Ok(trace)
}

/// Exhaustive optimum of the noise-free estimate over `space`.
pub fn exhaustive_best(workload: &Workload, space: &KnobSpace) -> Result<Measurement> {
    let valid = workload.enumerate(space)?;
    let all = valid
        .par_iter()
        .map(|s| measure(workload, s, 0.0, &mut ChaCha8Rng::seed_from_u64(0)))
        .collect::<Result<Vec<_>>>()?;
    all.into_iter()
        .min_by(|a, b| {
            a.runtime
                .total_cmp(&b.runtime)
                .then(a.schedule.cmp(&b.schedule))
        })
        .ok_or_else(|| {
            Error::Config("the knob space has no valid schedule for this convolution".into())
        })
}
