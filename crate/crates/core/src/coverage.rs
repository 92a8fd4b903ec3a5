//! ROA and ROV coverage of relays, by relay count and by bandwidth.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use log::warn;
use serde::Serialize;

use crate::consensus::{resolve_rpki, ConsensusSnapshot, Relay, Resolution};
use crate::error::Error;
use crate::netprefix::{Family, PrefixTable};
use crate::rpki::{Asn, InvalidReason, RoaStore, RovRegistry, ValidationResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    All,
    Guards,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::Guards => "guards",
        })
    }
}

/// Coverage figures for one (scope, family) population. Percentages are in
/// `[0, 100]`; an empty population reports zeros with `empty` set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FamilyStats {
    pub relays: usize,
    pub bandwidth: u64,
    pub empty: bool,
    pub pct_relays_valid_roa: f64,
    pub pct_bandwidth_valid_roa: f64,
    pub pct_relays_exact_maxlen: f64,
    /// Relays whose announcement has at least one covering ROA.
    pub roa_covered_relays: usize,
    pub pct_announcements_valid: f64,
    pub pct_invalid_asn_only: f64,
    pub pct_invalid_length_only: f64,
    pub pct_invalid_both: f64,
    pub pct_relays_rov: f64,
    pub pct_bandwidth_rov: f64,
}

fn pct(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

impl FamilyStats {
    fn from_population<'a>(rows: impl Iterator<Item = (&'a Relay, &'a Resolution)>) -> Self {
        let mut relays = 0usize;
        let mut bandwidth = 0u64;
        let (mut valid, mut valid_bw, mut exact) = (0usize, 0u64, 0usize);
        let (mut covered, mut asn_only, mut len_only, mut both) = (0usize, 0usize, 0usize, 0usize);
        let (mut rov, mut rov_bw) = (0usize, 0u64);
        for (relay, res) in rows {
            relays += 1;
            bandwidth += relay.bandwidth;
            if res.roa.is_valid() {
                valid += 1;
                valid_bw += relay.bandwidth;
            }
            if res.roa.exact_match() {
                exact += 1;
            }
            if res.roa.has_roa() {
                covered += 1;
            }
            match res.roa {
                ValidationResult::Invalid(InvalidReason::Asn) => asn_only += 1,
                ValidationResult::Invalid(InvalidReason::Length) => len_only += 1,
                ValidationResult::Invalid(InvalidReason::AsnAndLength) => both += 1,
                _ => {}
            }
            if res.rov_enforcing {
                rov += 1;
                rov_bw += relay.bandwidth;
            }
        }
        let n = relays as f64;
        let bw = bandwidth as f64;
        let c = covered as f64;
        FamilyStats {
            relays,
            bandwidth,
            empty: relays == 0,
            pct_relays_valid_roa: pct(valid as f64, n),
            pct_bandwidth_valid_roa: pct(valid_bw as f64, bw),
            pct_relays_exact_maxlen: pct(exact as f64, n),
            roa_covered_relays: covered,
            pct_announcements_valid: pct(valid as f64, c),
            pct_invalid_asn_only: pct(asn_only as f64, c),
            pct_invalid_length_only: pct(len_only as f64, c),
            pct_invalid_both: pct(both as f64, c),
            pct_relays_rov: pct(rov as f64, n),
            pct_bandwidth_rov: pct(rov_bw as f64, bw),
        }
    }
}

/// Statistics for every (scope, family) combination.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoverageStats {
    pub entries: BTreeMap<(Scope, Family), FamilyStats>,
}

impl CoverageStats {
    pub fn get(&self, scope: Scope, family: Family) -> &FamilyStats {
        &self.entries[&(scope, family)]
    }
}

/// Coverage of a snapshot already passed through `resolve_rpki`.
///
/// The IPv4 population is every relay in scope; the IPv6 population is the
/// relays in scope that list an IPv6 address.
pub fn coverage_report(snapshot: &ConsensusSnapshot) -> CoverageStats {
    let mut entries = BTreeMap::new();
    for scope in [Scope::All, Scope::Guards] {
        let in_scope = |r: &&Relay| scope == Scope::All || r.is_guard();
        let v4 = FamilyStats::from_population(snapshot.relays.iter().filter(in_scope).map(|r| (r, &r.v4)));
        let v6 = FamilyStats::from_population(
            snapshot.relays.iter().filter(in_scope).filter_map(|r| r.v6.as_ref().map(|res| (r, res))),
        );
        entries.insert((scope, Family::V4), v4);
        entries.insert((scope, Family::V6), v6);
    }
    CoverageStats { entries }
}

/// Inputs for one date of a coverage time series.
pub struct DatedInputs<'a> {
    pub date: String,
    pub snapshot: Option<&'a ConsensusSnapshot>,
    pub roas: Option<&'a RoaStore>,
    pub routes: Option<&'a PrefixTable<Asn>>,
}

#[derive(Debug, Default)]
pub struct TimeSeries {
    pub rows: Vec<(String, CoverageStats)>,
    pub warnings: Vec<String>,
}

/// Coverage per date. Dates missing any dataset are skipped with a warning.
pub fn coverage_timeseries(inputs: &[DatedInputs<'_>], rov: &RovRegistry) -> TimeSeries {
    use rayon::prelude::*;

    let results: Vec<Result<(String, CoverageStats), String>> = inputs
        .par_iter()
        .map(|d| match (d.snapshot, d.roas, d.routes) {
            (Some(snap), Some(roas), Some(routes)) => {
                Ok((d.date.clone(), coverage_report(&resolve_rpki(snap, routes, roas, rov))))
            }
            _ => {
                let missing: Vec<&str> = [
                    (d.snapshot.is_none(), "consensus"),
                    (d.roas.is_none(), "roa"),
                    (d.routes.is_none(), "routes"),
                ]
                .iter()
                .filter(|(m, _)| *m)
                .map(|(_, n)| *n)
                .collect();
                Err(format!("{}: missing {}; skipped", d.date, missing.join(", ")))
            }
        })
        .collect();
    let mut series = TimeSeries::default();
    for r in results {
        match r {
            Ok(row) => series.rows.push(row),
            Err(w) => {
                warn!("{w}");
                series.warnings.push(w);
            }
        }
    }
    series
}

/// One exported CSV row; field order is the column order.
#[derive(Serialize)]
struct CsvRow<'a> {
    date: &'a str,
    scope: String,
    family: String,
    relays: usize,
    bandwidth: u64,
    empty: bool,
    pct_relays_valid_roa: f64,
    pct_bandwidth_valid_roa: f64,
    pct_relays_exact_maxlen: f64,
    roa_covered_relays: usize,
    pct_announcements_valid: f64,
    pct_invalid_asn_only: f64,
    pct_invalid_length_only: f64,
    pct_invalid_both: f64,
    pct_relays_rov: f64,
    pct_bandwidth_rov: f64,
}

/// Column names of [`write_csv`] output, in order.
pub const CSV_COLUMNS: [&str; 16] = [
    "date",
    "scope",
    "family",
    "relays",
    "bandwidth",
    "empty",
    "pct_relays_valid_roa",
    "pct_bandwidth_valid_roa",
    "pct_relays_exact_maxlen",
    "roa_covered_relays",
    "pct_announcements_valid",
    "pct_invalid_asn_only",
    "pct_invalid_length_only",
    "pct_invalid_both",
    "pct_relays_rov",
    "pct_bandwidth_rov",
];

/// Writes one row per (date, scope, family).
pub fn write_csv<W: Write>(out: W, rows: &[(String, CoverageStats)]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    for (date, stats) in rows {
        for (&(scope, family), s) in &stats.entries {
            w.serialize(CsvRow {
                date,
                scope: scope.to_string(),
                family: family.to_string(),
                relays: s.relays,
                bandwidth: s.bandwidth,
                empty: s.empty,
                pct_relays_valid_roa: s.pct_relays_valid_roa,
                pct_bandwidth_valid_roa: s.pct_bandwidth_valid_roa,
                pct_relays_exact_maxlen: s.pct_relays_exact_maxlen,
                roa_covered_relays: s.roa_covered_relays,
                pct_announcements_valid: s.pct_announcements_valid,
                pct_invalid_asn_only: s.pct_invalid_asn_only,
                pct_invalid_length_only: s.pct_invalid_length_only,
                pct_invalid_both: s.pct_invalid_both,
                pct_relays_rov: s.pct_relays_rov,
                pct_bandwidth_rov: s.pct_bandwidth_rov,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn guard(id: &str, bw: u64, roa: ValidationResult, rov: bool) -> Relay {
        let mut r = Relay::new(id, id, Ipv4Addr::new(192, 0, 2, 1), bw).with_flags(&["Guard", "Running"]);
        r.v4.roa = roa;
        r.v4.rov_enforcing = rov;
        r
    }

    const VALID: ValidationResult = ValidationResult::Valid { exact_match: false };
    const EXACT: ValidationResult = ValidationResult::Valid { exact_match: true };

    #[test]
    fn hand_arithmetic_fixture() {
        let relays = vec![
            guard("a", 10, VALID, true),
            guard("b", 10, VALID, false),
            guard("c", 10, EXACT, false),
            guard("d", 70, ValidationResult::Invalid(InvalidReason::Asn), false),
        ];
        let stats = coverage_report(&ConsensusSnapshot::from_relays(None, relays));
        let g = stats.get(Scope::Guards, Family::V4);
        assert_eq!(g.pct_relays_valid_roa, 75.0);
        assert_eq!(g.pct_bandwidth_valid_roa, 30.0);
        assert_eq!(g.pct_relays_exact_maxlen, 25.0);
        assert_eq!(g.pct_announcements_valid, 75.0);
        assert_eq!(g.pct_invalid_asn_only, 25.0);
        assert_eq!(g.pct_relays_rov, 25.0);
        assert_eq!(g.pct_bandwidth_rov, 10.0);
        let v6 = stats.get(Scope::Guards, Family::V6);
        assert!(v6.empty);
        assert_eq!(v6.pct_relays_valid_roa, 0.0);
    }

    #[test]
    fn not_found_everywhere_is_zero() {
        let relays = vec![guard("a", 5, ValidationResult::NotFound, false)];
        let s = *coverage_report(&ConsensusSnapshot::from_relays(None, relays)).get(Scope::All, Family::V4);
        assert_eq!(s.pct_relays_valid_roa, 0.0);
        assert_eq!(s.pct_announcements_valid, 0.0);
        assert_eq!(s.roa_covered_relays, 0);
        assert!(!s.empty);
    }

    #[test]
    fn single_exact_relay() {
        let relays = vec![guard("a", 5, EXACT, false)];
        let s = *coverage_report(&ConsensusSnapshot::from_relays(None, relays)).get(Scope::Guards, Family::V4);
        assert_eq!(s.pct_relays_exact_maxlen, 100.0);
    }

    #[test]
    fn non_guards_do_not_affect_guard_scope() {
        let mut relays = vec![guard("a", 10, VALID, false), guard("b", 30, ValidationResult::NotFound, true)];
        let before = coverage_report(&ConsensusSnapshot::from_relays(None, relays.clone()));
        relays.push(Relay::new("x", "x", Ipv4Addr::LOCALHOST, 99));
        let after = coverage_report(&ConsensusSnapshot::from_relays(None, relays));
        assert_eq!(before.get(Scope::Guards, Family::V4), after.get(Scope::Guards, Family::V4));
        assert_ne!(before.get(Scope::All, Family::V4), after.get(Scope::All, Family::V4));
    }

    #[test]
    fn csv_header_order() {
        let relays = vec![guard("a", 10, VALID, false)];
        let stats = coverage_report(&ConsensusSnapshot::from_relays(None, relays));
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("2024-05-01".into(), stats)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), 4);
    }
}
