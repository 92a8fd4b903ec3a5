//! File loading shared by the subcommands.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use roaguard::clients::{build_census, CountryCensus};
use roaguard::consensus::{load_guard_table, load_routes, parse_consensus, resolve_rpki, GuardTable};
use roaguard::error::RowError;
use roaguard::rpki::{load_roas, RovSource, DEFAULT_ROV_THRESHOLD};
use roaguard::{Asn, CategoryShares, ConsensusSnapshot, PrefixTable, RoaStore, RovRegistry};

/// Bad invocation or unusable input. Maps to exit code 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

pub fn require<'a, T>(value: &'a Option<T>, flag: &str, context: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| input_error(format!("missing required flag {flag} ({context})")))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

/// Opens `path` for writing, or stdout when absent.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| input_error(format!("{}: {e}", p.display())))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn report_rejected(path: &Path, rejected: &[RowError]) {
    for r in rejected {
        warn!("{}: {r}; row skipped", path.display());
    }
}

fn with_path<T>(path: &Path, r: roaguard::Result<T>) -> Result<T> {
    r.with_context(|| path.display().to_string())
}

pub fn read_roas(path: &Path) -> Result<RoaStore> {
    let loaded = with_path(path, load_roas(open(path)?))?;
    report_rejected(path, &loaded.rejected);
    info!("{}: {} ROAs", path.display(), loaded.value.len());
    Ok(loaded.value)
}

pub fn read_routes(path: &Path) -> Result<PrefixTable<Asn>> {
    let loaded = with_path(path, load_routes(open(path)?))?;
    report_rejected(path, &loaded.rejected);
    Ok(loaded.value)
}

pub fn read_consensus(path: &Path) -> Result<ConsensusSnapshot> {
    let snapshot = with_path(path, parse_consensus(open(path)?))?;
    if snapshot.warnings > 0 {
        warn!("{}: {} malformed router entries skipped", path.display(), snapshot.warnings);
    }
    Ok(snapshot)
}

pub fn read_guard_table(path: &Path) -> Result<GuardTable> {
    with_path(path, load_guard_table(open(path)?))
}

/// ROV lists paired with their sources by position; missing sources
/// default to `custom`.
pub fn read_rov(paths: &[PathBuf], sources: &[String], threshold: Option<f64>) -> Result<RovRegistry> {
    if sources.len() > paths.len() {
        return Err(input_error("more --rov-source values than --rov files"));
    }
    let threshold = threshold.unwrap_or(DEFAULT_ROV_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(input_error(format!("--rov-threshold must be in [0, 1], got {threshold}")));
    }
    let mut registry = RovRegistry::new(threshold);
    for (i, path) in paths.iter().enumerate() {
        let source = match sources.get(i) {
            Some(s) => s.parse::<RovSource>().map_err(|e| input_error(format!("--rov-source: {e}")))?,
            None => RovSource::Custom,
        };
        let rejected = with_path(path, registry.load_list(open(path)?, source))?;
        report_rejected(path, &rejected);
    }
    Ok(registry)
}

/// The three RPKI-side datasets.
pub struct Rpki {
    pub roas: RoaStore,
    pub routes: PrefixTable<Asn>,
    pub rov: RovRegistry,
}

impl Rpki {
    pub fn resolve(&self, snapshot: &ConsensusSnapshot) -> ConsensusSnapshot {
        resolve_rpki(snapshot, &self.routes, &self.roas, &self.rov)
    }
}

/// Parses `roa,rov,both,neither` fractions; they are normalized.
pub fn parse_mix(text: &str) -> Result<CategoryShares> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| input_error(format!("client mix {text:?}: expected four numbers roa,rov,both,neither")))?;
    let arr: [f64; 4] = values
        .try_into()
        .map_err(|_| input_error(format!("client mix {text:?}: expected four numbers roa,rov,both,neither")))?;
    if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(input_error(format!("client mix {text:?}: fractions must be nonnegative")));
    }
    CategoryShares(arr)
        .normalized()
        .ok_or_else(|| input_error(format!("client mix {text:?} has no mass")))
}

pub fn census_from_files(users: &Path, asns: &Path, rpki: &Rpki) -> Result<CountryCensus> {
    let built = build_census(open(users)?, open(asns)?, &rpki.routes, &rpki.roas, &rpki.rov)
        .with_context(|| format!("{} / {}", users.display(), asns.display()))?;
    report_rejected(Path::new("country files"), &built.rejected);
    for w in &built.warnings {
        warn!("{w}");
    }
    Ok(built.census)
}

/// Resolves `path` relative to the directory holding `base`.
pub fn relative_to(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// One row of a dated manifest: field values by column name.
pub struct ManifestRow {
    pub line: u64,
    pub fields: Vec<(String, String)>,
}

impl ManifestRow {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .filter(|v| !v.is_empty())
    }
}

/// Reads a headed CSV, checking that `required` columns exist.
pub fn read_manifest(path: &Path, required: &[&str]) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    for col in required {
        if !headers.iter().any(|h| h == col) {
            return Err(input_error(format!("{}: missing column {col:?}", path.display())));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields = headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect();
        rows.push(ManifestRow { line, fields });
    }
    Ok(rows)
}

pub fn parse_field<T: std::str::FromStr>(path: &Path, row: &ManifestRow, name: &str) -> Result<T> {
    let raw = row
        .get(name)
        .ok_or_else(|| input_error(format!("{}: line {}: empty {name}", path.display(), row.line)))?;
    raw.parse()
        .map_err(|_| input_error(format!("{}: line {}: invalid {name} {raw:?}", path.display(), row.line)))
}
