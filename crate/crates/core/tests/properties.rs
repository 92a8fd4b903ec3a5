//! Cross-module invariants checked on randomized inputs.

use std::net::{Ipv4Addr, Ipv6Addr};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roaguard::clients::{apply_churn, churn_targets, population_at_shares};
use roaguard::consensus::resolve_rpki;
use roaguard::coverage::{coverage_report, write_csv, Scope};
use roaguard::discount::{client_roa_rate, expected_utilization, optimal_discount};
use roaguard::lp::solve_lp;
use roaguard::matching::{build_lp, category_of, optimize_weights, pair_reward};
use roaguard::rpki::RovSource;
use roaguard::{
    Asn, Balance, Category, CategoryShares, ConsensusSnapshot, Family, GuardProfile, IpPrefix, LpConfig,
    ObjectiveMode, PrefixTable, Relay, RewardParams, RoaRecord, RoaStore, RovRegistry, SelectionState,
    WeightMatrix,
};

//------------ Fixtures ------------------------------------------------------

struct World {
    snapshot: ConsensusSnapshot,
    routes: PrefixTable<Asn>,
    roas: RoaStore,
    rov: RovRegistry,
}

fn world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut routes = PrefixTable::new();
    let mut roas = RoaStore::new();
    for block in 0..4u8 {
        let asn = Asn(rng.random_range(64500..64506));
        let p16 = IpPrefix::new(Ipv4Addr::new(10, block, 0, 0).into(), 16).unwrap();
        routes.insert(p16, asn);
        if rng.random_bool(0.6) {
            let roa_asn = if rng.random_bool(0.8) { asn } else { Asn(64999) };
            roas.insert(RoaRecord::new(roa_asn, p16, rng.random_range(16..=24)).unwrap());
        }
        let p24 = IpPrefix::new(Ipv4Addr::new(10, block, 7, 0).into(), 24).unwrap();
        if rng.random_bool(0.5) {
            routes.insert(p24, Asn(rng.random_range(64500..64506)));
        }
        let v6 = IpPrefix::new(Ipv6Addr::new(0x2001, 0xdb8, block as u16, 0, 0, 0, 0, 0).into(), 48).unwrap();
        routes.insert(v6, asn);
        if rng.random_bool(0.5) {
            roas.insert(RoaRecord::new(asn, v6, 48).unwrap());
        }
    }
    let mut rov = RovRegistry::new(0.5);
    for asn in 64500..64506 {
        if rng.random_bool(0.4) {
            rov.insert(Asn(asn), rng.random_range(0.0..1.0), RovSource::Custom);
        }
    }
    let flags: [&[&str]; 4] = [&["Guard", "Running", "Fast"], &["Running"], &["Guard"], &["Exit", "Running", "Guard"]];
    let relays = (0..rng.random_range(1..40))
        .map(|i| {
            let ip = Ipv4Addr::new(10, rng.random_range(0..5), rng.random_range(0..10), rng.random());
            let mut relay = Relay::new(&format!("R{i:03}"), &format!("n{i}"), ip, rng.random_range(0..10_000))
                .with_flags(flags[rng.random_range(0..flags.len())]);
            if rng.random_bool(0.4) {
                relay.ipv6 = Some(Ipv6Addr::new(0x2001, 0xdb8, rng.random_range(0..5), 0, 0, 0, 0, rng.random()));
            }
            relay
        })
        .collect();
    World { snapshot: ConsensusSnapshot::from_relays(Some("2024-05-01 00:00:00".into()), relays), routes, roas, rov }
}

fn random_guards(rng: &mut ChaCha8Rng, n: usize) -> Vec<GuardProfile> {
    (0..n)
        .map(|_| {
            let bw = (rng.random_range(0.0f64..1.0).powi(3) * 1e4).max(1.0).round();
            GuardProfile::new(Category::ALL[rng.random_range(0..4)], bw)
        })
        .collect()
}

fn random_config(rng: &mut ChaCha8Rng) -> LpConfig {
    let d1 = rng.random_range(0.5..0.99);
    let bonus = rng.random_range(1.1..3.0);
    let floor = d1 * d1 / bonus;
    let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    LpConfig {
        load: rng.random_range(0.5..=1.0),
        theta: rng.random_range(1.0..6.0),
        reward: RewardParams { d1, d2: floor + rng.random_range(0.01..0.99) * (d1 - floor), bonus },
        clients: CategoryShares(raw).normalized().unwrap_or_else(CategoryShares::uniform),
        mode: ObjectiveMode::Weighted,
    }
}

fn stats_close(a: &roaguard::coverage::FamilyStats, b: &roaguard::coverage::FamilyStats) -> bool {
    let pcts = |s: &roaguard::coverage::FamilyStats| {
        [
            s.pct_relays_valid_roa,
            s.pct_bandwidth_valid_roa,
            s.pct_relays_exact_maxlen,
            s.pct_announcements_valid,
            s.pct_invalid_asn_only,
            s.pct_invalid_length_only,
            s.pct_invalid_both,
            s.pct_relays_rov,
            s.pct_bandwidth_rov,
        ]
    };
    a.relays == b.relays && pcts(a).iter().zip(pcts(b)).all(|(x, y)| (x - y).abs() <= 1e-9)
}

//------------ Resolution and coverage ---------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolution_is_idempotent_and_categorical(seed in any::<u64>()) {
        let w = world(seed);
        let once = resolve_rpki(&w.snapshot, &w.routes, &w.roas, &w.rov);
        let twice = resolve_rpki(&once, &w.routes, &w.roas, &w.rov);
        prop_assert_eq!(&once, &twice);
        for r in &once.relays {
            let c = category_of(r.v4.roa.is_valid(), r.v4.rov_enforcing);
            prop_assert_eq!(r.category, c);
            prop_assert_eq!(r.category.has_roa(), r.roa_covered());
        }
    }

    #[test]
    fn coverage_is_deterministic(seed in any::<u64>()) {
        let w = world(seed);
        let resolved = resolve_rpki(&w.snapshot, &w.routes, &w.roas, &w.rov);
        let render = |s: &ConsensusSnapshot| {
            let mut out = Vec::new();
            write_csv(&mut out, &[("2024-05-01".to_string(), coverage_report(s))]).unwrap();
            out
        };
        prop_assert_eq!(render(&resolved), render(&resolved.clone()));
    }

    #[test]
    fn coverage_ignores_bandwidth_scale(seed in any::<u64>(), k in 2u64..1000) {
        let w = world(seed);
        let resolved = resolve_rpki(&w.snapshot, &w.routes, &w.roas, &w.rov);
        let mut scaled = resolved.clone();
        for r in &mut scaled.relays {
            r.bandwidth *= k;
        }
        let (a, b) = (coverage_report(&resolved), coverage_report(&scaled));
        for (key, sa) in &a.entries {
            prop_assert!(stats_close(sa, &b.entries[key]), "{:?}", key);
        }
    }

    #[test]
    fn non_guards_do_not_move_guard_stats(seed in any::<u64>()) {
        let w = world(seed);
        let resolved = resolve_rpki(&w.snapshot, &w.routes, &w.roas, &w.rov);
        let Some(pos) = resolved.relays.iter().position(|r| !r.is_guard()) else { return Ok(()) };
        let mut fewer = resolved.relays.clone();
        fewer.remove(pos);
        let fewer = ConsensusSnapshot::from_relays(resolved.valid_after.clone(), fewer);
        let (a, b) = (coverage_report(&resolved), coverage_report(&fewer));
        for family in [Family::V4, Family::V6] {
            prop_assert_eq!(a.get(Scope::Guards, family), b.get(Scope::Guards, family));
        }
    }
}

//------------ Discount closed forms -----------------------------------------

proptest! {
    #[test]
    fn utilization_is_monotone(
        c in 0.0f64..=1.0,
        l in (0.0f64..=1.0, 0.0f64..=1.0),
        d in (0.0f64..=1.0, 0.0f64..=1.0),
        w_total in 0.1f64..1e6,
    ) {
        let (l1, l2) = (l.0.min(l.1), l.0.max(l.1));
        let (d1, d2) = (d.0.min(d.1), d.0.max(d.1));
        let w_roa = c * w_total;
        let u = |l, d| expected_utilization(l, d, w_roa, w_total).unwrap();
        prop_assert!(u(l1, d1) <= u(l1, d2) + 1e-12);
        prop_assert!(u(l1, d1) <= u(l2, d1) + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&u(l2, d2)));
    }

    #[test]
    fn optimal_discount_reaches_full_utilization(c in 0.0f64..=1.0, l in 0.0f64..=1.0) {
        let d = optimal_discount(l, c, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((expected_utilization(l, d, c, 1.0).unwrap() - l).abs() <= 1e-9);
    }
}

#[test]
fn roa_rate_does_not_grow_with_discount() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for fixture in 0..6 {
        let guards = random_guards(&mut rng, 25);
        if !guards.iter().any(|g| g.category.has_roa()) {
            continue;
        }
        let mut prev = f64::INFINITY;
        for step in 0..=8 {
            let d = step as f64 / 8.0;
            let draws = 20_000;
            let mut state = SelectionState::discount(&guards, d, Balance::new(0.8, draws));
            let mut run = ChaCha8Rng::seed_from_u64(1000 + fixture);
            let picks: Vec<usize> = (0..draws).map(|_| state.select(0, &mut run).unwrap().relay).collect();
            let rate = client_roa_rate(&picks, &guards);
            assert!(rate <= prev + 0.01, "fixture {fixture}: rate {rate} at d={d} after {prev}");
            prev = rate;
        }
    }
}

//------------ Rewards and optimization --------------------------------------

proptest! {
    #[test]
    fn reward_chain_is_strict(d1 in 0.05f64..0.999, u in 0.001f64..0.999, bonus in 1.001f64..4.0) {
        let floor = d1 * d1 / bonus;
        let p = RewardParams::new(d1, floor + u * (d1 - floor), bonus).unwrap();
        let r = |c, rel| pair_reward(c, rel, &p);
        use Category::*;
        prop_assert!(r(Both, Both) > r(Roa, Both));
        prop_assert!(r(Roa, Both) > r(Rov, Both));
        prop_assert!(r(Rov, Both) > r(Roa, Roa));
        prop_assert!(r(Roa, Roa) > r(Roa, Neither));
        prop_assert!(r(Roa, Roa) > r(Both, Neither));
        prop_assert!(r(Both, Neither) > r(Rov, Rov));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimized_weights_are_feasible_and_never_worse(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..200);
        let guards = random_guards(&mut rng, n);
        let cfg = random_config(&mut rng);
        let w = optimize_weights(&guards, &cfg).unwrap();
        let v = w.violations(&cfg);
        prop_assert!(v.normalization <= 1e-6, "{:?}", v);
        prop_assert!(v.capacity <= 1e-9 && v.placement <= 1e-9 && v.negative <= 1e-12, "{:?}", v);
        let vanilla = WeightMatrix::vanilla(&guards).unwrap();
        prop_assert!(w.objective(&cfg) >= vanilla.objective(&cfg) - 1e-9);
    }

    #[test]
    fn full_program_matches_aggregate(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let guards = random_guards(&mut rng, n);
        let cfg = random_config(&mut rng);
        let lp = build_lp(&guards, &cfg).unwrap();
        let sol = solve_lp(&lp).unwrap();
        let res = lp.residuals(&sol.x);
        prop_assert!(res.eq <= 1e-6 && res.le <= 1e-9 && res.bounds <= 1e-9, "{:?}", res);
        let agg = optimize_weights(&guards, &cfg).unwrap().objective(&cfg);
        prop_assert!((agg - sol.objective).abs() <= 1e-7, "{} vs {}", agg, sol.objective);
    }

    #[test]
    fn bandwidth_scale_leaves_weights_unchanged(seed in any::<u64>(), k in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..100);
        let guards = random_guards(&mut rng, n);
        let cfg = random_config(&mut rng);
        let scaled: Vec<GuardProfile> = guards.iter().map(|g| GuardProfile::new(g.category, g.bandwidth * k)).collect();
        let (a, b) = (optimize_weights(&guards, &cfg).unwrap(), optimize_weights(&scaled, &cfg).unwrap());
        for (x, y) in a.to_vector().iter().zip(b.to_vector()) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }
}

//------------ Clients and load balancing ------------------------------------

fn shares_strategy() -> impl Strategy<Value = CategoryShares> {
    proptest::array::uniform4(0.0f64..1.0)
        .prop_filter("positive mass", |v| v.iter().sum::<f64>() > 0.01)
        .prop_map(|v| CategoryShares(v).normalized().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn churn_conserves_size_and_keeps_guards(
        start in shares_strategy(),
        steps in proptest::collection::vec(shares_strategy(), 1..6),
        n in 1usize..3000,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pop = population_at_shares(&start, n, "XX", &mut rng).unwrap();
        for (day, shares) in steps.iter().enumerate() {
            for c in pop.clients_mut() {
                if c.assigned_guard.is_none() {
                    c.assigned_guard = Some(Arc::from(format!("G{}", c.id % 17)));
                    c.selected_on = Some(day as u32);
                }
            }
            let before = pop.clone();
            let outcome = apply_churn(&mut pop, shares, &mut rng).unwrap();
            prop_assert_eq!(pop.len(), n);
            prop_assert_eq!(pop.category_counts(), churn_targets(shares, n));
            prop_assert_eq!(outcome.added.len(), outcome.removed.len());
            for c in &pop.clients()[outcome.added.clone()] {
                prop_assert!(c.assigned_guard.is_none());
            }
            for old in before.clients() {
                let now = pop.clients().iter().find(|c| c.id == old.id);
                match now {
                    Some(c) => prop_assert_eq!(c, old),
                    None => prop_assert!(outcome.removed.contains(&old.id)),
                }
            }
        }
    }

    #[test]
    fn unflagged_assignments_respect_capacity(seed in any::<u64>(), d in 0.0f64..=1.0, load in 0.3f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..30);
        let guards = random_guards(&mut rng, n);
        let clients = 5_000u64;
        let mut state = SelectionState::discount(&guards, d, Balance::new(load, clients));
        for _ in 0..clients {
            if state.select(0, &mut rng).is_err() {
                // Every relay with weight was ROA-free and d = 0.
                prop_assert!(d == 0.0);
                return Ok(());
            }
        }
        let total: f64 = guards.iter().map(|g| g.bandwidth).sum();
        for (r, g) in guards.iter().enumerate() {
            let capacity = clients as f64 * g.bandwidth / (load * total);
            let clean = state.assigned()[r] - state.overloads()[r];
            prop_assert!(clean as f64 <= capacity + 1e-9, "relay {}: {} > {}", r, clean, capacity);
        }
    }
}
