//! Tor network-status consensus rows and their RPKI resolution.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::sync::Arc;

use crate::error::{Error, RowError};
use crate::matching::{category_of, Category, GuardProfile};
use crate::netprefix::{IpPrefix, PrefixTable};
use crate::rpki::{Asn, Loaded, RoaStore, RovRegistry, ValidationResult};

/// Origin, validation and ROV state for one relay address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub origin_asn: Option<Asn>,
    pub covering_prefix: Option<IpPrefix>,
    pub roa: ValidationResult,
    pub rov_enforcing: bool,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution {
            origin_asn: None,
            covering_prefix: None,
            roa: ValidationResult::NotFound,
            rov_enforcing: false,
        }
    }
}

/// One consensus router entry.
///
/// Selection keys off the IPv4 resolution; the IPv6 one feeds coverage
/// reports only.
#[derive(Clone, Debug, PartialEq)]
pub struct Relay {
    pub identity: Arc<str>,
    pub nickname: String,
    pub ipv4: Ipv4Addr,
    pub ipv6: Option<Ipv6Addr>,
    pub flags: BTreeSet<String>,
    pub bandwidth: u64,
    pub v4: Resolution,
    pub v6: Option<Resolution>,
    pub category: Category,
}

impl Relay {
    pub fn new(identity: &str, nickname: &str, ipv4: Ipv4Addr, bandwidth: u64) -> Self {
        Relay {
            identity: identity.into(),
            nickname: nickname.to_string(),
            ipv4,
            ipv6: None,
            flags: BTreeSet::new(),
            bandwidth,
            v4: Resolution::default(),
            v6: None,
            category: Category::Neither,
        }
    }

    pub fn with_flags(mut self, flags: &[&str]) -> Self {
        self.flags = flags.iter().map(|f| f.to_string()).collect();
        self
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.contains(flag)
    }

    pub fn is_guard(&self) -> bool {
        self.has_flag("Guard") && self.has_flag("Running")
    }

    /// Valid ROA on the IPv4 announcement.
    pub fn roa_covered(&self) -> bool {
        self.v4.roa.is_valid()
    }

    pub fn origin_asn(&self) -> Option<Asn> {
        self.v4.origin_asn
    }

    pub fn profile(&self) -> GuardProfile {
        GuardProfile::new(self.category, self.bandwidth as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsensusSnapshot {
    pub valid_after: Option<String>,
    pub relays: Vec<Relay>,
    pub total_guard_weight: u64,
    /// Router blocks dropped because their `r` line was malformed.
    pub warnings: usize,
}

impl ConsensusSnapshot {
    pub fn from_relays(valid_after: Option<String>, relays: Vec<Relay>) -> Self {
        let mut snapshot = ConsensusSnapshot { valid_after, relays, total_guard_weight: 0, warnings: 0 };
        snapshot.recompute_total();
        snapshot
    }

    fn recompute_total(&mut self) {
        self.total_guard_weight = self.relays.iter().filter(|r| r.is_guard()).map(|r| r.bandwidth).sum();
    }

    /// Guard-eligible relays (`Guard` and `Running`), sorted by identity.
    pub fn guard_set(&self) -> Vec<Relay> {
        guard_set(self)
    }
}

fn parse_r_line(fields: &[&str]) -> Option<Relay> {
    // r nickname identity [digest] date time address orport dirport
    if fields.len() < 8 {
        return None;
    }
    let address: Ipv4Addr = fields[fields.len() - 3].parse().ok()?;
    fields[fields.len() - 2].parse::<u16>().ok()?;
    fields[fields.len() - 1].parse::<u16>().ok()?;
    Some(Relay::new(fields[2], fields[1], address, 0))
}

fn parse_a_line(rest: &str) -> Option<Ipv6Addr> {
    let rest = rest.trim();
    let inner = rest.strip_prefix('[')?;
    let (addr, _) = inner.split_once(']')?;
    addr.parse().ok()
}

fn parse_w_line(rest: &str) -> Option<u64> {
    rest.split_whitespace()
        .find_map(|kv| kv.strip_prefix("Bandwidth="))
        .and_then(|v| v.parse().ok())
}

/// Parses the consensus lines this crate needs: `valid-after`, `r`, `a`,
/// `s` and `w`. Everything else is skipped.
pub fn parse_consensus<R: Read>(reader: R) -> Result<ConsensusSnapshot, Error> {
    let mut valid_after = None;
    let mut relays = Vec::new();
    let mut current: Option<Relay> = None;
    let mut skipping = false;
    let mut warnings = 0;
    for line in BufReader::new(reader).lines() {
        let line = line?;
        let line = line.trim_end();
        let (keyword, rest) = line.split_once(' ').unwrap_or((line, ""));
        match keyword {
            "valid-after" => valid_after = Some(rest.trim().to_string()),
            "r" => {
                relays.extend(current.take());
                let fields: Vec<&str> = line.split_whitespace().collect();
                match parse_r_line(&fields) {
                    Some(relay) => {
                        current = Some(relay);
                        skipping = false;
                    }
                    None => {
                        warnings += 1;
                        skipping = true;
                    }
                }
            }
            "a" if !skipping => {
                if let (Some(relay), Some(addr)) = (current.as_mut(), parse_a_line(rest)) {
                    relay.ipv6.get_or_insert(addr);
                }
            }
            "s" if !skipping => {
                if let Some(relay) = current.as_mut() {
                    relay.flags = rest.split_whitespace().map(str::to_string).collect();
                }
            }
            "w" if !skipping => {
                if let (Some(relay), Some(bw)) = (current.as_mut(), parse_w_line(rest)) {
                    relay.bandwidth = bw;
                }
            }
            "directory-footer" => {
                relays.extend(current.take());
                skipping = false;
            }
            _ => {}
        }
    }
    relays.extend(current.take());
    let mut snapshot = ConsensusSnapshot::from_relays(valid_after, relays);
    snapshot.warnings = warnings;
    Ok(snapshot)
}

/// Loads a `prefix,origin_asn` route table.
pub fn load_routes<R: Read>(reader: R) -> Result<Loaded<PrefixTable<Asn>>, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut table = PrefixTable::new();
    let mut rejected = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(idx as u64 + 1, |p| p.line());
        if row.iter().all(str::is_empty) {
            continue;
        }
        let prefix = row.get(0).unwrap_or("").parse::<IpPrefix>();
        if idx == 0 && prefix.is_err() {
            continue;
        }
        let asn = row.get(1).unwrap_or("").parse::<Asn>();
        match (prefix, asn) {
            (Ok(p), Ok(a)) => table.insert(p, a),
            (Err(e), _) => rejected.push(RowError { line, message: e.to_string() }),
            (_, Err(e)) => rejected.push(RowError { line, message: e.to_string() }),
        }
    }
    Ok(Loaded { value: table, rejected })
}

/// A guard set without addresses: identity, category and bandwidth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuardTable {
    pub ids: Vec<Arc<str>>,
    pub guards: Vec<GuardProfile>,
}

impl GuardTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: &str, guard: GuardProfile) {
        self.ids.push(Arc::from(id));
        self.guards.push(guard);
    }

    /// The resolved guard set of a snapshot, in identity order.
    pub fn from_snapshot(snapshot: &ConsensusSnapshot) -> Self {
        let mut table = GuardTable::default();
        for relay in guard_set(snapshot) {
            table.guards.push(relay.profile());
            table.ids.push(relay.identity);
        }
        table
    }
}

/// Loads a `relay_id,category,bandwidth` guard table. Unlike the RPKI
/// loaders, any bad row is an error, since a partial guard set would skew
/// every weight.
pub fn load_guard_table<R: Read>(reader: R) -> Result<GuardTable, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut table = GuardTable::default();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(idx as u64 + 1, |p| p.line());
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row.len() < 3 {
            return Err(Error::Input { line, message: format!("expected 3 fields, found {}", row.len()) });
        }
        let category = row[1].parse::<Category>();
        if idx == 0 && category.is_err() {
            continue;
        }
        let category = category.map_err(|e| Error::Input { line, message: e.to_string() })?;
        let bandwidth = match row[2].parse::<f64>() {
            Ok(b) if b.is_finite() && b >= 0.0 => b,
            _ => return Err(Error::Input { line, message: format!("invalid bandwidth {:?}", &row[2]) }),
        };
        table.push(&row[0], GuardProfile::new(category, bandwidth));
    }
    Ok(table)
}

pub fn write_guard_table<W: std::io::Write>(out: W, table: &GuardTable) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["relay_id", "category", "bandwidth"])?;
    for (id, g) in table.ids.iter().zip(&table.guards) {
        w.write_record([id.as_ref(), g.category.label(), &g.bandwidth.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn resolve_address(addr: IpAddr, routes: &PrefixTable<Asn>, roas: &RoaStore, rov: &RovRegistry) -> Resolution {
    let Some((prefix, origins)) = routes.longest_match(addr) else {
        return Resolution::default();
    };
    // With several origins for the winning prefix, report the best outcome
    // (valid, then invalid, then not found), lowest ASN first.
    let rank = |r: &ValidationResult| r.status() as u8;
    let (asn, roa) = origins
        .iter()
        .map(|&asn| (asn, roas.validate_origin(prefix, asn)))
        .min_by(|a, b| rank(&a.1).cmp(&rank(&b.1)).then(a.0.cmp(&b.0)))
        .expect("prefix table entries are never empty");
    Resolution {
        origin_asn: Some(asn),
        covering_prefix: Some(*prefix),
        roa,
        rov_enforcing: rov.is_enforcing(asn),
    }
}

/// Resolves origin AS, ROA validity, ROV status and category per relay.
pub fn resolve_rpki(
    snapshot: &ConsensusSnapshot,
    routes: &PrefixTable<Asn>,
    roas: &RoaStore,
    rov: &RovRegistry,
) -> ConsensusSnapshot {
    let mut out = snapshot.clone();
    for relay in &mut out.relays {
        relay.v4 = resolve_address(relay.ipv4.into(), routes, roas, rov);
        relay.v6 = relay.ipv6.map(|a| resolve_address(a.into(), routes, roas, rov));
        relay.category = category_of(relay.v4.roa.is_valid(), relay.v4.rov_enforcing);
    }
    out.recompute_total();
    out
}

pub fn guard_set(snapshot: &ConsensusSnapshot) -> Vec<Relay> {
    let mut guards: Vec<Relay> = snapshot.relays.iter().filter(|r| r.is_guard()).cloned().collect();
    guards.sort_by(|a, b| a.identity.cmp(&b.identity));
    guards
}
