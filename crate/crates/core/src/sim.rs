//! Monte-Carlo harness: repeated selection runs, matching with optimized
//! weights, and multi-day churn timelines.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clients::{apply_churn, population_at_shares, sample_clients, ClientPopulation, CountryCensus, DEFAULT_GUARD_LIFETIME_DAYS};
use crate::discount::{Balance, DiscountParams, SelectionState, DEFAULT_MAX_RETRIES};
use crate::error::{Error, Result};
use crate::matching::{expected_matched_rate, is_matched, optimize_weights, CategoryShares, GuardProfile, LpConfig, WeightMatrix};

//------------ Seeds ---------------------------------------------------------

pub const STREAM_RUN: u64 = 1;
pub const STREAM_POPULATION: u64 = 2;
pub const STREAM_CHURN: u64 = 3;
pub const STREAM_SELECT: u64 = 4;
pub const STREAM_SELECT_NEW: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of random stream `stream` under `master`.
///
/// Each input is folded in through a splitmix64 finalizer, so seeds for
/// different runs or days are independent of evaluation order.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

//------------ Config --------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Algorithm {
    /// Consensus-weight selection under load balancing at load `load`.
    Vanilla { load: f64 },
    Discount(DiscountParams),
    Matching(LpConfig),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Vanilla { .. } => "vanilla",
            Algorithm::Discount(_) => "discount",
            Algorithm::Matching(_) => "matching",
        }
    }

    pub fn load(&self) -> f64 {
        match self {
            Algorithm::Vanilla { load } => *load,
            Algorithm::Discount(p) => p.load,
            Algorithm::Matching(cfg) => cfg.load,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgorithmKind {
    Vanilla,
    Discount,
    Matching,
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(AlgorithmKind::Vanilla),
            "discount" => Ok(AlgorithmKind::Discount),
            "matching" => Ok(AlgorithmKind::Matching),
            _ => Err(Error::Param(format!("unknown algorithm {s:?}"))),
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgorithmKind::Vanilla => "vanilla",
            AlgorithmKind::Discount => "discount",
            AlgorithmKind::Matching => "matching",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub runs: usize,
    pub seed: u64,
    pub max_retries: u32,
}

impl SimConfig {
    pub fn new(algorithm: Algorithm, clients: usize, runs: usize, seed: u64) -> Self {
        SimConfig { algorithm, clients, runs, seed, max_retries: DEFAULT_MAX_RETRIES }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Param("client count must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::Param("run count must be at least 1".into()));
        }
        match &self.algorithm {
            Algorithm::Vanilla { load } => DiscountParams::new(1.0, *load).map(|_| ()),
            Algorithm::Discount(p) => p.validate(),
            Algorithm::Matching(cfg) => cfg.validate(),
        }
    }

    fn balance(&self, expected_clients: usize) -> Balance {
        Balance::new(self.algorithm.load(), expected_clients as u64).with_max_retries(self.max_retries)
    }
}

/// Immutable inputs shared by all runs of one simulation.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub guards: Vec<GuardProfile>,
    pub census: CountryCensus,
    /// Optimized weights, present for the matching algorithm.
    pub weights: Option<WeightMatrix>,
}

impl Scenario {
    /// Prepares a scenario; for matching, weights are optimized against the
    /// census's overall category distribution.
    pub fn new(guards: Vec<GuardProfile>, census: CountryCensus, algorithm: &Algorithm) -> Result<Self> {
        census.validate()?;
        if guards.is_empty() {
            return Err(Error::NoEligibleGuard);
        }
        let weights = match algorithm {
            Algorithm::Matching(cfg) => {
                let cfg = LpConfig { clients: census.overall(), ..*cfg };
                Some(optimize_weights(&guards, &cfg)?)
            }
            _ => None,
        };
        Ok(Scenario { guards, census, weights })
    }

    pub fn expected_matched_rate(&self) -> Option<f64> {
        self.weights.as_ref().map(|w| expected_matched_rate(w, &self.census.overall()))
    }
}

//------------ Runs ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub client_roa_rate: f64,
    pub matched_rate: f64,
    /// Clients per guard, in guard order.
    pub histogram: Vec<u64>,
    /// Clients accepted past saturation.
    pub overloads: u64,
    pub reductions: u64,
    pub wall_time: Duration,
}

fn selection_state(cfg: &SimConfig, scenario: &Scenario, expected_clients: usize) -> Result<SelectionState> {
    let balance = cfg.balance(expected_clients);
    Ok(match &cfg.algorithm {
        Algorithm::Vanilla { .. } => SelectionState::discount(&scenario.guards, 1.0, balance),
        Algorithm::Discount(p) => SelectionState::discount(&scenario.guards, p.discount, balance),
        Algorithm::Matching(_) => {
            let weights = scenario
                .weights
                .as_ref()
                .ok_or_else(|| Error::Param("matching run without optimized weights".into()))?;
            SelectionState::matching(&scenario.guards, weights, balance)
        }
    })
}

/// One run: samples `cfg.clients` clients from the census, then every client
/// selects a guard in turn.
pub fn run_once<R: Rng + ?Sized>(cfg: &SimConfig, scenario: &Scenario, rng: &mut R) -> Result<RunMetrics> {
    let start = Instant::now();
    let pop = sample_clients(&scenario.census, cfg.clients, rng)?;
    run_population(cfg, scenario, &pop, rng).map(|mut m| {
        m.wall_time = start.elapsed();
        m
    })
}

/// One run over a fixed population.
pub fn run_population<R: Rng + ?Sized>(
    cfg: &SimConfig,
    scenario: &Scenario,
    pop: &ClientPopulation,
    rng: &mut R,
) -> Result<RunMetrics> {
    let start = Instant::now();
    let mut state = selection_state(cfg, scenario, pop.len())?;
    let by_category = matches!(cfg.algorithm, Algorithm::Matching(_));
    let mut roa = 0u64;
    let mut matched = 0u64;
    let mut overloads = 0u64;
    for client in pop.clients() {
        let column = if by_category { client.category.index() } else { 0 };
        let sel = state.select(column, rng)?;
        let relay = scenario.guards[sel.relay].category;
        roa += relay.has_roa() as u64;
        matched += is_matched(client.category, relay) as u64;
        overloads += sel.overloaded as u64;
    }
    let n = pop.len().max(1) as f64;
    Ok(RunMetrics {
        seed: 0,
        client_roa_rate: roa as f64 / n,
        matched_rate: matched as f64 / n,
        histogram: state.assigned().to_vec(),
        overloads,
        reductions: state.reductions(),
        wall_time: start.elapsed(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; zero deviation for one value.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd::default();
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub runs: Vec<RunMetrics>,
    pub client_roa_rate: MeanStd,
    pub matched_rate: MeanStd,
    pub overloads: MeanStd,
}

impl Aggregate {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        Aggregate {
            client_roa_rate: MeanStd::of(runs.iter().map(|r| r.client_roa_rate)),
            matched_rate: MeanStd::of(runs.iter().map(|r| r.matched_rate)),
            overloads: MeanStd::of(runs.iter().map(|r| r.overloads as f64)),
            runs,
        }
    }
}

/// Runs `cfg.runs` independent runs in parallel. Run `i` uses the seed
/// derived from the master seed and `i`, so results do not depend on
/// scheduling.
pub fn run_many(cfg: &SimConfig, scenario: &Scenario) -> Result<Aggregate> {
    cfg.validate()?;
    let runs = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, STREAM_RUN, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_once(cfg, scenario, &mut rng).map(|m| RunMetrics { seed, ..m })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregate::from_runs(runs))
}

pub const RUN_CSV_COLUMNS: [&str; 6] = ["run", "seed", "client_roa_rate", "matched_rate", "overloads", "reductions"];

/// Writes one row per run followed by `mean` and `std` rows.
pub fn write_runs_csv<W: Write>(out: W, agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUN_CSV_COLUMNS)?;
    for (i, r) in agg.runs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.seed.to_string(),
            r.client_roa_rate.to_string(),
            r.matched_rate.to_string(),
            r.overloads.to_string(),
            r.reductions.to_string(),
        ])?;
    }
    let reductions = MeanStd::of(agg.runs.iter().map(|r| r.reductions as f64));
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let f = |m: MeanStd| if pick == 0 { m.mean } else { m.std }.to_string();
        w.write_record([
            label.to_string(),
            String::new(),
            f(agg.client_roa_rate),
            f(agg.matched_rate),
            f(agg.overloads),
            f(reductions),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-guard client counts of every run, one row per guard.
pub fn write_histogram_csv<W: Write>(out: W, ids: &[Arc<str>], agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["relay_id".to_string()];
    header.extend((0..agg.runs.len()).map(|i| format!("run{i}")));
    w.write_record(&header)?;
    for (r, id) in ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(agg.runs.iter().map(|m| m.histogram.get(r).copied().unwrap_or(0).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

//------------ Churn ---------------------------------------------------------

/// Inputs for one day of a churn timeline. A day without guards or without
/// a client distribution is skipped.
#[derive(Clone, Debug)]
pub struct DayInput {
    pub date: String,
    pub guard_ids: Vec<Arc<str>>,
    pub guards: Vec<GuardProfile>,
    pub clients: Option<CategoryShares>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DayMetrics {
    pub date: String,
    pub population: usize,
    pub added: usize,
    pub removed: usize,
    /// Retained clients that had to reselect because their guard left the
    /// guard set or aged out.
    pub reselected: usize,
    pub matched_with_churn: f64,
    pub matched_without_churn: f64,
    pub expected_matched_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    pub days: Vec<DayMetrics>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChurnConfig {
    pub lp: LpConfig,
    pub clients: usize,
    pub seed: u64,
    pub max_retries: u32,
    pub guard_lifetime_days: u32,
}

impl ChurnConfig {
    pub fn new(lp: LpConfig, clients: usize, seed: u64) -> Self {
        ChurnConfig {
            lp,
            clients,
            seed,
            max_retries: DEFAULT_MAX_RETRIES,
            guard_lifetime_days: DEFAULT_GUARD_LIFETIME_DAYS,
        }
    }
}

fn matched_fraction(pop: &ClientPopulation, categories: &HashMap<Arc<str>, crate::matching::Category>) -> f64 {
    let matched = pop
        .clients()
        .iter()
        .filter(|c| {
            c.assigned_guard
                .as_ref()
                .and_then(|g| categories.get(g))
                .is_some_and(|&rc| is_matched(c.category, rc))
        })
        .count();
    matched as f64 / pop.len().max(1) as f64
}

/// Day-by-day client population under churn.
///
/// The first usable day builds a population at exactly that day's category
/// counts and lets everyone select. On later days the population churns
/// toward that day's distribution, weights are recomputed from that day's
/// guards, and only new clients (plus clients whose guard vanished or aged
/// out) select. The comparator lets the whole current population reselect
/// every day from the same selection seed.
#[derive(Clone, Debug)]
pub struct ChurnTimeline {
    cfg: ChurnConfig,
    balance: Balance,
    pop: Option<ClientPopulation>,
    timeline: Timeline,
}

impl ChurnTimeline {
    pub fn new(cfg: ChurnConfig) -> Result<Self> {
        if cfg.clients == 0 {
            return Err(Error::Param("client count must be at least 1".into()));
        }
        cfg.lp.validate()?;
        let balance = Balance::new(cfg.lp.load, cfg.clients as u64).with_max_retries(cfg.max_retries);
        Ok(ChurnTimeline { cfg, balance, pop: None, timeline: Timeline::default() })
    }

    pub fn population(&self) -> Option<&ClientPopulation> {
        self.pop.as_ref()
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn into_timeline(self) -> Timeline {
        self.timeline
    }

    /// Advances to day `day_index`. Returns `None` when the day is skipped.
    pub fn step(&mut self, day_index: usize, day: &DayInput) -> Result<Option<&DayMetrics>> {
        let cfg = &self.cfg;
        let shares = match (&day.clients, day.guards.is_empty()) {
            (Some(s), false) if day.guards.len() == day.guard_ids.len() => s,
            _ => {
                let msg = format!("{}: missing guards or client distribution; day skipped", day.date);
                warn!("{msg}");
                self.timeline.warnings.push(msg);
                return Ok(None);
            }
        };
        let day_no = day_index as u32;
        let lp = LpConfig { clients: shares.normalized().unwrap_or_else(CategoryShares::uniform), ..cfg.lp };
        let weights = optimize_weights(&day.guards, &lp)?;
        let index: HashMap<Arc<str>, usize> =
            day.guard_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let categories: HashMap<Arc<str>, _> =
            day.guard_ids.iter().cloned().zip(day.guards.iter().map(|g| g.category)).collect();

        let first = self.pop.is_none();
        let (added, removed) = match self.pop.as_mut() {
            None => {
                let mut rng = rng_for(cfg.seed, STREAM_POPULATION, 0);
                self.pop = Some(population_at_shares(&lp.clients, cfg.clients, "??", &mut rng)?);
                (cfg.clients, 0)
            }
            Some(p) => {
                let mut rng = rng_for(cfg.seed, STREAM_CHURN, day_index as u64);
                let o = apply_churn(p, &lp.clients, &mut rng)?;
                (o.added.len(), o.removed.len())
            }
        };
        let pop = self.pop.as_mut().expect("population initialized");

        // With churn: keep valid assignments, select for the rest.
        let mut state = SelectionState::matching(&day.guards, &weights, self.balance);
        let mut pending = Vec::new();
        let mut reselected = 0;
        for (i, c) in pop.clients().iter().enumerate() {
            let kept = match (&c.assigned_guard, c.selected_on) {
                (Some(g), Some(on)) => index
                    .get(g)
                    .filter(|_| day_no.saturating_sub(on) < cfg.guard_lifetime_days)
                    .copied(),
                _ => None,
            };
            match kept {
                Some(r) => state.preassign(r),
                None => {
                    if c.assigned_guard.is_some() {
                        reselected += 1;
                    }
                    pending.push(i);
                }
            }
        }
        let mut rng = if first {
            rng_for(cfg.seed, STREAM_SELECT, 0)
        } else {
            rng_for(cfg.seed, STREAM_SELECT_NEW, day_index as u64)
        };
        for i in pending {
            let column = pop.clients()[i].category.index();
            let sel = state.select(column, &mut rng)?;
            let c = &mut pop.clients_mut()[i];
            c.assigned_guard = Some(day.guard_ids[sel.relay].clone());
            c.selected_on = Some(day_no);
        }
        let matched_with_churn = matched_fraction(pop, &categories);

        // Without churn: everyone reselects.
        let mut state = SelectionState::matching(&day.guards, &weights, self.balance);
        let mut rng = rng_for(cfg.seed, STREAM_SELECT, 0);
        let mut matched = 0usize;
        for c in pop.clients() {
            let sel = state.select(c.category.index(), &mut rng)?;
            matched += is_matched(c.category, day.guards[sel.relay].category) as usize;
        }

        self.timeline.days.push(DayMetrics {
            date: day.date.clone(),
            population: pop.len(),
            added,
            removed,
            reselected,
            matched_with_churn,
            matched_without_churn: matched as f64 / pop.len() as f64,
            expected_matched_rate: expected_matched_rate(&weights, &lp.clients),
        });
        Ok(self.timeline.days.last())
    }
}

/// Runs a [`ChurnTimeline`] over `days`; day indices are positions in the
/// slice, so skipped days still count toward guard age.
pub fn run_churn_timeline(days: &[DayInput], cfg: &ChurnConfig) -> Result<Timeline> {
    let mut timeline = ChurnTimeline::new(cfg.clone())?;
    for (i, day) in days.iter().enumerate() {
        timeline.step(i, day)?;
    }
    Ok(timeline.into_timeline())
}

pub const TIMELINE_CSV_COLUMNS: [&str; 8] = [
    "date",
    "population",
    "added",
    "removed",
    "reselected",
    "matched_with_churn",
    "matched_without_churn",
    "expected_matched_rate",
];

pub fn write_timeline_csv<W: Write>(out: W, timeline: &Timeline) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TIMELINE_CSV_COLUMNS)?;
    for d in &timeline.days {
        w.write_record([
            d.date.clone(),
            d.population.to_string(),
            d.added.to_string(),
            d.removed.to_string(),
            d.reselected.to_string(),
            d.matched_with_churn.to_string(),
            d.matched_without_churn.to_string(),
            d.expected_matched_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
