use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use roaguard::clients::CountryCensus;
use roaguard::consensus::GuardTable;
use roaguard::coverage::{self, coverage_timeseries, DatedInputs};
use roaguard::discount::{self, expected_utilization};
use roaguard::matching::{expected_matched_rate, optimize_weights, vanilla_matched_rate};
use roaguard::sim::{self, run_churn_timeline, run_many, ChurnConfig, DayInput, Scenario};
use roaguard::{
    Algorithm, Category, CategoryShares, ConsensusSnapshot, DiscountParams, GuardProfile, LpConfig, ObjectiveMode,
    RewardParams, RoaStore, SimConfig,
};

use crate::inputs::{self, input_error, require, Rpki};
use crate::{
    ChurnSimArgs, ClientArgs, CoverageArgs, DiscountSimArgs, GuardArgs, LpArgs, MatchingSimArgs, OptimalDiscountArgs,
    OptimizeArgs, RpkiArgs, SweepArgs, UtilizationArgs,
};

//------------ Shared loading ------------------------------------------------

fn load_rpki(args: &RpkiArgs, context: &str) -> Result<Rpki> {
    let roa = require(&args.roa, "--roa", context)?;
    let routes = require(&args.routes, "--routes", context)?;
    Ok(Rpki {
        roas: inputs::read_roas(roa)?,
        routes: inputs::read_routes(routes)?,
        rov: inputs::read_rov(&args.rov, &args.rov_source, args.rov_threshold)?,
    })
}

fn load_guards(guards: &GuardArgs, rpki_args: &RpkiArgs) -> Result<(GuardTable, Option<Rpki>)> {
    if let Some(path) = &guards.guards {
        let table = inputs::read_guard_table(path)?;
        if table.is_empty() {
            return Err(input_error(format!("{}: no guards", path.display())));
        }
        return Ok((table, None));
    }
    let path = require(&guards.consensus, "--consensus", "or pass --guards")?;
    let rpki = load_rpki(rpki_args, "needed to resolve --consensus")?;
    let snapshot = rpki.resolve(&inputs::read_consensus(path)?);
    let table = GuardTable::from_snapshot(&snapshot);
    if table.is_empty() {
        return Err(input_error(format!("{}: no relay has both Guard and Running flags", path.display())));
    }
    info!("{}: {} guards", path.display(), table.len());
    Ok((table, Some(rpki)))
}

fn load_census(args: &ClientArgs, rpki: Option<&Rpki>, rpki_args: &RpkiArgs) -> Result<CountryCensus> {
    if let Some(mix) = &args.client_mix {
        return Ok(CountryCensus::single(inputs::parse_mix(mix)?));
    }
    match (&args.country_users, &args.country_asns) {
        (Some(users), Some(asns)) => {
            let loaded;
            let rpki = match rpki {
                Some(r) => r,
                None => {
                    loaded = load_rpki(rpki_args, "needed to classify --country-asns prefixes")?;
                    &loaded
                }
            };
            inputs::census_from_files(users, asns, rpki)
        }
        _ => {
            info!("no client census given; using a uniform category mix");
            Ok(CountryCensus::single(CategoryShares::uniform()))
        }
    }
}

fn objective_mode(text: &str) -> Result<ObjectiveMode> {
    text.parse()
        .map_err(|_| input_error(format!("--objective-mode must be weighted or literal, got {text:?}")))
}

fn lp_config(args: &LpArgs, clients: CategoryShares) -> Result<LpConfig> {
    let cfg = LpConfig {
        load: args.load,
        theta: args.theta,
        reward: RewardParams::new(args.d1, args.d2, args.bonus)?,
        clients,
        mode: objective_mode(&args.objective_mode)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn roa_fraction(guards: &[GuardProfile]) -> Result<f64> {
    let total: f64 = guards.iter().map(|g| g.bandwidth).sum();
    if !(total > 0.0) {
        return Err(roaguard::Error::ZeroBandwidth.into());
    }
    let roa: f64 = guards.iter().filter(|g| g.category.has_roa()).map(|g| g.bandwidth).sum();
    Ok(roa / total)
}

fn finish(mut out: Box<dyn Write>) -> Result<()> {
    out.flush().context("writing output")
}

//------------ coverage ------------------------------------------------------

fn cached<T>(
    cache: &mut HashMap<PathBuf, Option<Arc<T>>>,
    path: PathBuf,
    load: impl Fn(&Path) -> Result<T>,
) -> Option<Arc<T>> {
    cache
        .entry(path)
        .or_insert_with_key(|p| {
            if !p.exists() {
                warn!("{}: not found", p.display());
                return None;
            }
            match load(p) {
                Ok(v) => Some(Arc::new(v)),
                Err(e) => {
                    warn!("{e:#}");
                    None
                }
            }
        })
        .clone()
}

struct DatedOwned {
    date: String,
    snapshot: Option<Arc<ConsensusSnapshot>>,
    roas: Option<Arc<RoaStore>>,
    routes: Option<Arc<roaguard::PrefixTable<roaguard::Asn>>>,
}

fn load_manifest(path: &Path) -> Result<Vec<DatedOwned>> {
    let rows = inputs::read_manifest(path, &["date", "consensus", "roa", "routes"])?;
    let mut snapshots = HashMap::new();
    let mut roas = HashMap::new();
    let mut routes = HashMap::new();
    let mut out = Vec::new();
    for row in &rows {
        let date = row.get("date").unwrap_or("").to_string();
        let file = |col: &str| row.get(col).map(|v| inputs::relative_to(path, v));
        out.push(DatedOwned {
            snapshot: file("consensus").and_then(|p| cached(&mut snapshots, p, inputs::read_consensus)),
            roas: file("roa").and_then(|p| cached(&mut roas, p, inputs::read_roas)),
            routes: file("routes").and_then(|p| cached(&mut routes, p, inputs::read_routes)),
            date,
        });
    }
    Ok(out)
}

fn dated_refs(owned: &[DatedOwned]) -> Vec<DatedInputs<'_>> {
    owned
        .iter()
        .map(|d| DatedInputs {
            date: d.date.clone(),
            snapshot: d.snapshot.as_deref(),
            roas: d.roas.as_deref(),
            routes: d.routes.as_deref(),
        })
        .collect()
}

pub fn coverage(args: CoverageArgs) -> Result<()> {
    let single = match &args.manifest {
        Some(_) => None,
        None => Some((
            require(&args.consensus, "--consensus", "or pass --manifest")?,
            require(&args.rpki.roa, "--roa", "ROA export")?,
            require(&args.rpki.routes, "--routes", "route table")?,
        )),
    };
    let rov = inputs::read_rov(&args.rpki.rov, &args.rpki.rov_source, args.rpki.rov_threshold)?;
    let owned = match (single, &args.manifest) {
        (Some((consensus, roa, routes)), _) => {
            let snapshot = inputs::read_consensus(consensus)?;
            vec![DatedOwned {
                date: snapshot.valid_after.clone().unwrap_or_else(|| "snapshot".into()),
                snapshot: Some(Arc::new(snapshot)),
                roas: Some(Arc::new(inputs::read_roas(roa)?)),
                routes: Some(Arc::new(inputs::read_routes(routes)?)),
            }]
        }
        (None, Some(manifest)) => load_manifest(manifest)?,
        (None, None) => unreachable!("checked above"),
    };
    let series = coverage_timeseries(&dated_refs(&owned), &rov);
    let mut out = inputs::output(args.output.as_deref())?;
    if series.rows.is_empty() {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(coverage::CSV_COLUMNS)?;
        w.flush()?;
    } else {
        coverage::write_csv(&mut out, &series.rows)?;
    }
    finish(out)
}

//------------ simulations ---------------------------------------------------

fn simulate(
    guards: GuardTable,
    census: CountryCensus,
    algorithm: Algorithm,
    run: &crate::RunArgs,
) -> Result<()> {
    let seed = seed_or_random(run.seed);
    let cfg = SimConfig { max_retries: run.max_retries, ..SimConfig::new(algorithm, run.clients, run.runs, seed) };
    cfg.validate()?;
    let scenario = Scenario::new(guards.guards.clone(), census, &cfg.algorithm)?;
    if let Some(p) = scenario.expected_matched_rate() {
        info!("expected matched rate {p:.6}");
    }
    let agg = run_many(&cfg, &scenario)?;
    info!(
        "{}: client ROA rate {:.6} (sd {:.6}), matched rate {:.6} (sd {:.6})",
        cfg.algorithm.name(),
        agg.client_roa_rate.mean,
        agg.client_roa_rate.std,
        agg.matched_rate.mean,
        agg.matched_rate.std
    );
    let out = inputs::output(run.output.as_deref())?;
    sim::write_runs_csv(out, &agg)?;
    if let Some(path) = &run.histogram {
        let out = inputs::output(Some(path))?;
        sim::write_histogram_csv(out, &guards.ids, &agg)?;
    }
    Ok(())
}

pub fn discount_sim(args: DiscountSimArgs) -> Result<()> {
    let params = DiscountParams::new(args.discount, args.load)?;
    let (guards, rpki) = load_guards(&args.guards, &args.rpki)?;
    let census = load_census(&args.clients, rpki.as_ref(), &args.rpki)?;
    simulate(guards, census, Algorithm::Discount(params), &args.run)
}

pub fn matching_sim(args: MatchingSimArgs) -> Result<()> {
    let lp = lp_config(&args.lp, CategoryShares::uniform())?;
    let (guards, rpki) = load_guards(&args.guards, &args.rpki)?;
    let census = load_census(&args.clients, rpki.as_ref(), &args.rpki)?;
    simulate(guards, census, Algorithm::Matching(lp), &args.run)
}

pub fn churn_sim(args: ChurnSimArgs) -> Result<()> {
    let series = require(&args.series, "--series", "daily guards and client mix")?;
    let lp = lp_config(&args.lp, CategoryShares::uniform())?;
    let rows = inputs::read_manifest(series, &["date", "guards", "roa", "rov", "both", "neither"])?;
    let mut rpki: Option<Rpki> = None;
    let mut days = Vec::new();
    for row in &rows {
        let date = row.get("date").unwrap_or("").to_string();
        let shares = match ["roa", "rov", "both", "neither"].map(|c| row.get(c)) {
            [Some(a), Some(b), Some(c), Some(d)] => Some(inputs::parse_mix(&format!("{a},{b},{c},{d}"))?),
            _ => None,
        };
        let table = match row.get("guards").map(|g| inputs::relative_to(series, g)) {
            Some(path) if path.exists() => {
                if path.extension().is_some_and(|e| e == "csv") {
                    inputs::read_guard_table(&path)?
                } else {
                    if rpki.is_none() {
                        rpki = Some(load_rpki(&args.rpki, "needed to resolve consensus entries in --series")?);
                    }
                    let resolved = rpki.as_ref().expect("loaded").resolve(&inputs::read_consensus(&path)?);
                    GuardTable::from_snapshot(&resolved)
                }
            }
            Some(path) => {
                warn!("{}: not found", path.display());
                GuardTable::default()
            }
            None => GuardTable::default(),
        };
        days.push(DayInput { date, guard_ids: table.ids, guards: table.guards, clients: shares });
    }
    let seed = seed_or_random(args.seed);
    let cfg = ChurnConfig {
        max_retries: args.max_retries,
        guard_lifetime_days: args.guard_lifetime,
        ..ChurnConfig::new(lp, args.clients, seed)
    };
    let timeline = run_churn_timeline(&days, &cfg)?;
    let out = inputs::output(args.output.as_deref())?;
    sim::write_timeline_csv(out, &timeline)?;
    Ok(())
}

//------------ weights and grids ---------------------------------------------

pub fn optimize(args: OptimizeArgs) -> Result<()> {
    let (guards, rpki) = load_guards(&args.guards, &args.rpki)?;
    let census = load_census(&args.clients, rpki.as_ref(), &args.rpki)?;
    let cfg = lp_config(&args.lp, census.overall())?;
    let weights = optimize_weights(&guards.guards, &cfg)?;
    info!(
        "objective {:.6}, matched rate {:.6} (vanilla {:.6})",
        weights.objective(&cfg),
        expected_matched_rate(&weights, &cfg.clients),
        vanilla_matched_rate(&weights, &cfg.clients)
    );
    let mut w = csv::Writer::from_writer(inputs::output(args.output.as_deref())?);
    w.write_record(["relay_id", "relay_category", "client_category", "weight"])?;
    for (r, id) in guards.ids.iter().enumerate() {
        let relay = guards.guards[r].category.label();
        for c in Category::ALL {
            w.write_record([id.as_ref(), relay, c.label(), &weights.weight(r, c).to_string()])?;
        }
        w.write_record([id.as_ref(), relay, "vanilla", &weights.vanilla_weights()[r].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let grid_path = require(&args.grid, "--grid", "parameter grid with columns l,d1,d2,B")?;
    let mode = objective_mode(&args.objective_mode)?;
    let (guards, rpki) = load_guards(&args.guards, &args.rpki)?;
    let census = load_census(&args.clients, rpki.as_ref(), &args.rpki)?;
    let clients = census.overall();

    let rows = inputs::read_manifest(grid_path, &["l", "d1", "d2", "B"])?;
    let mut configs = Vec::new();
    for row in &rows {
        let vals = ["l", "d1", "d2", "B"].map(|c| inputs::parse_field::<f64>(grid_path, row, c));
        let [l, d1, d2, b] = vals;
        let (l, d1, d2, b) = (l?, d1?, d2?, b?);
        let cfg = RewardParams::new(d1, d2, b)
            .map(|reward| LpConfig { load: l, theta: args.theta, reward, clients, mode })
            .and_then(|cfg| cfg.validate().map(|_| cfg))
            .map_err(|e| input_error(format!("{}: line {}: {e}", grid_path.display(), row.line)))?;
        configs.push(((l, d1, d2, b), cfg));
    }
    let results = configs
        .par_iter()
        .map(|(key, cfg)| {
            let weights = optimize_weights(&guards.guards, cfg)?;
            let matched = expected_matched_rate(&weights, &cfg.clients);
            Ok((*key, matched, matched - vanilla_matched_rate(&weights, &cfg.clients)))
        })
        .collect::<roaguard::Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(inputs::output(args.output.as_deref())?);
    w.write_record(["l", "d1", "d2", "B", "matched_rate", "delta_matched_rate"])?;
    for ((l, d1, d2, b), matched, delta) in results {
        w.write_record([l, d1, d2, b, matched, delta].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn grid(steps: usize, flag: &str) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(input_error(format!("{flag} must be at least 2")));
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

fn check_fractions(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(input_error(format!("--coverage values must be in [0, 1], got {v}"))),
        None => Ok(()),
    }
}

pub fn utilization_grid(args: UtilizationArgs) -> Result<()> {
    check_fractions(&args.coverage)?;
    let coverages = if args.coverage.is_empty() {
        vec![roa_fraction(&load_guards(&args.guards, &args.rpki)?.0.guards)?]
    } else {
        args.coverage.clone()
    };
    let loads = grid(args.load_steps, "--load-steps")?;
    let discounts = grid(args.discount_steps, "--discount-steps")?;
    let mut w = csv::Writer::from_writer(inputs::output(args.output.as_deref())?);
    w.write_record(["roa_fraction", "l", "d", "utilization"])?;
    for &c in &coverages {
        for &l in &loads {
            for &d in &discounts {
                let u = expected_utilization(l, d, c, 1.0)?;
                w.write_record([c, l, d, u].map(|v| v.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn optimal_discount(args: OptimalDiscountArgs) -> Result<()> {
    check_fractions(&args.coverage)?;
    if let Some(l) = args.loads.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(input_error(format!("--loads values must be in [0, 1], got {l}")));
    }
    let mut points: Vec<(String, f64)> = args.coverage.iter().map(|&c| (String::new(), c)).collect();
    if let Some(manifest) = &args.manifest {
        let rov = inputs::read_rov(&args.rpki.rov, &args.rpki.rov_source, args.rpki.rov_threshold)?;
        for d in load_manifest(manifest)? {
            match (&d.snapshot, &d.roas, &d.routes) {
                (Some(s), Some(roas), Some(routes)) => {
                    let resolved = roaguard::consensus::resolve_rpki(s, routes, roas, &rov);
                    match roa_fraction(&GuardTable::from_snapshot(&resolved).guards) {
                        Ok(f) => points.push((d.date, f)),
                        Err(e) => warn!("{}: {e}; skipped", d.date),
                    }
                }
                _ => warn!("{}: missing inputs; skipped", d.date),
            }
        }
    } else if args.coverage.is_empty() {
        let (table, rpki) = load_guards(&args.guards, &args.rpki)?;
        let date = match (&args.guards.consensus, rpki) {
            (Some(p), Some(_)) => inputs::read_consensus(p)?.valid_after.unwrap_or_default(),
            _ => String::new(),
        };
        points.push((date, roa_fraction(&table.guards)?));
    }
    let mut w = csv::Writer::from_writer(inputs::output(args.output.as_deref())?);
    w.write_record(["date", "roa_fraction", "l", "optimal_discount"])?;
    for (date, c) in &points {
        for &l in &args.loads {
            let d = discount::optimal_discount(l, *c, 1.0)?;
            w.write_record([date.clone(), c.to_string(), l.to_string(), d.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
