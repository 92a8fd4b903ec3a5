//! Synthetic client populations: per-country ROA/ROV census, sampling, and
//! daily churn.
//!
//! Clients carry only a country and a category. Their AS and address are
//! never generated.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::ops::Range;
use std::sync::Arc;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result, RowError};
use crate::matching::{category_of, Category, CategoryShares};
use crate::netprefix::{Family, PrefixTable};
use crate::rpki::{Asn, RoaStore, RovRegistry};

/// Default guard lifetime before a client re-selects, in days.
pub const DEFAULT_GUARD_LIFETIME_DAYS: u32 = 120;

#[derive(Clone, Debug, PartialEq)]
pub struct CountryEntry {
    pub user_fraction: f64,
    pub categories: CategoryShares,
}

/// Tor user share and client category distribution per country.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CountryCensus {
    pub countries: BTreeMap<String, CountryEntry>,
}

impl CountryCensus {
    /// Category distribution over all clients.
    pub fn overall(&self) -> CategoryShares {
        let mut total = [0.0; 4];
        for entry in self.countries.values() {
            for (c, v) in entry.categories.iter() {
                total[c.index()] += entry.user_fraction * v;
            }
        }
        CategoryShares(total)
    }

    /// A census with one pseudo-country holding `shares`.
    pub fn single(shares: CategoryShares) -> Self {
        let mut countries = BTreeMap::new();
        countries.insert("??".to_string(), CountryEntry { user_fraction: 1.0, categories: shares });
        CountryCensus { countries }
    }

    pub fn validate(&self) -> Result<()> {
        let users: f64 = self.countries.values().map(|e| e.user_fraction).sum();
        if self.countries.is_empty() || (users - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("country user fractions sum to {users}, not 1")));
        }
        for (code, entry) in &self.countries {
            if !entry.categories.is_distribution() {
                return Err(Error::Param(format!("category distribution of {code} does not sum to 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct CensusBuild {
    pub census: CountryCensus,
    pub warnings: Vec<String>,
    pub rejected: Vec<RowError>,
}

/// `(line, first, second)` per usable row.
type Pairs = Vec<(u64, String, String)>;

fn csv_pairs<R: Read>(reader: R) -> Result<(Pairs, Vec<RowError>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        match (rec.get(0), rec.get(1)) {
            (Some(a), Some(b)) => rows.push((line, a.to_string(), b.to_string())),
            _ => rejected.push(RowError { line, message: "expected 2 fields".into() }),
        }
    }
    Ok((rows, rejected))
}

/// Builds a census from Tor user shares by country, the ASes located in each
/// country, and the prefixes each AS announces.
///
/// Each announced IPv4 prefix contributes its address count to the category
/// given by its ROA validity and its origin's ROV status. User shares are
/// normalized to sum to one.
pub fn build_census<R1: Read, R2: Read>(
    country_users: R1,
    country_asns: R2,
    routes: &PrefixTable<Asn>,
    roas: &RoaStore,
    rov: &RovRegistry,
) -> Result<CensusBuild> {
    let mut out = CensusBuild::default();

    let (rows, rejected) = csv_pairs(country_users)?;
    out.rejected.extend(rejected);
    let mut users: BTreeMap<String, f64> = BTreeMap::new();
    for (i, (line, country, value)) in rows.into_iter().enumerate() {
        match value.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => *users.entry(country).or_default() += v,
            _ if i == 0 => {}
            _ => out.rejected.push(RowError { line, message: format!("invalid user share {value:?}") }),
        }
    }
    let total_users: f64 = users.values().sum();
    if !(total_users > 0.0) {
        return Err(Error::Param("country user shares sum to zero".into()));
    }

    let (rows, rejected) = csv_pairs(country_asns)?;
    out.rejected.extend(rejected);
    let mut asns_by_country: HashMap<String, Vec<Asn>> = HashMap::new();
    for (i, (line, country, asn)) in rows.into_iter().enumerate() {
        match asn.parse::<Asn>() {
            Ok(a) => asns_by_country.entry(country).or_default().push(a),
            Err(_) if i == 0 => {}
            Err(e) => out.rejected.push(RowError { line, message: e.to_string() }),
        }
    }

    let mut prefixes_by_asn: HashMap<Asn, Vec<_>> = HashMap::new();
    for (prefix, origins) in routes.iter() {
        if prefix.family() != Family::V4 {
            continue;
        }
        for &asn in origins {
            prefixes_by_asn.entry(asn).or_default().push(*prefix);
        }
    }

    for (country, share) in users {
        let mut tally = [0.0f64; 4];
        let mut asns = asns_by_country.get(&country).cloned().unwrap_or_default();
        asns.sort();
        asns.dedup();
        for asn in asns {
            let enforcing = rov.is_enforcing(asn);
            for prefix in prefixes_by_asn.get(&asn).map(Vec::as_slice).unwrap_or(&[]) {
                let valid = roas.validate_origin(prefix, asn).is_valid();
                tally[category_of(valid, enforcing).index()] += prefix.address_count();
            }
        }
        let categories = match CategoryShares(tally).normalized() {
            Some(c) => c,
            None => {
                let msg = format!("{country}: no known addresses; using a uniform category distribution");
                warn!("{msg}");
                out.warnings.push(msg);
                CategoryShares::uniform()
            }
        };
        out.census
            .countries
            .insert(country, CountryEntry { user_fraction: share / total_users, categories });
    }
    Ok(out)
}

//------------ Clients -------------------------------------------------------

pub type ClientId = u64;

#[derive(Clone, Debug, PartialEq)]
pub struct Client {
    pub id: ClientId,
    pub country: Arc<str>,
    pub category: Category,
    /// Identity of the selected guard.
    pub assigned_guard: Option<Arc<str>>,
    pub selected_on: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientPopulation {
    clients: Vec<Client>,
    category_counts: [usize; 4],
    next_id: ClientId,
}

impl ClientPopulation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [Client] {
        &mut self.clients
    }

    pub fn category_counts(&self) -> [usize; 4] {
        self.category_counts
    }

    pub fn category_count(&self, category: Category) -> usize {
        self.category_counts[category.index()]
    }

    /// Category fractions of the current population.
    pub fn shares(&self) -> CategoryShares {
        let n = self.len().max(1) as f64;
        CategoryShares(self.category_counts.map(|c| c as f64 / n))
    }

    /// Clients per guard identity.
    pub fn assignment_counts(&self) -> HashMap<Arc<str>, usize> {
        let mut counts = HashMap::new();
        for c in &self.clients {
            if let Some(g) = &c.assigned_guard {
                *counts.entry(g.clone()).or_default() += 1;
            }
        }
        counts
    }

    pub fn push(&mut self, country: Arc<str>, category: Category) -> ClientId {
        let id = self.next_id;
        self.next_id += 1;
        self.category_counts[category.index()] += 1;
        self.clients.push(Client { id, country, category, assigned_guard: None, selected_on: None });
        id
    }
}

/// Draws `n` clients: country by user share, then category by that
/// country's distribution.
pub fn sample_clients<R: Rng + ?Sized>(census: &CountryCensus, n: usize, rng: &mut R) -> Result<ClientPopulation> {
    if n == 0 {
        return Err(Error::Param("client count must be at least 1".into()));
    }
    census.validate()?;
    let countries: Vec<(Arc<str>, &CountryEntry)> =
        census.countries.iter().map(|(k, v)| (Arc::from(k.as_str()), v)).collect();
    let country_dist = WeightedIndex::new(countries.iter().map(|(_, e)| e.user_fraction))
        .map_err(|e| Error::Param(e.to_string()))?;
    let category_dists: Vec<Option<WeightedIndex<f64>>> =
        countries.iter().map(|(_, e)| WeightedIndex::new(e.categories.0).ok()).collect();
    let mut pop = ClientPopulation::new();
    for _ in 0..n {
        let ci = country_dist.sample(rng);
        let dist = category_dists[ci]
            .as_ref()
            .ok_or_else(|| Error::Param(format!("country {} has no category mass", countries[ci].0)))?;
        let category = Category::ALL[dist.sample(rng)];
        pop.push(countries[ci].0.clone(), category);
    }
    Ok(pop)
}

/// `n` clients whose category counts are exactly the largest-remainder
/// targets for `shares`, in random order.
pub fn population_at_shares<R: Rng + ?Sized>(shares: &CategoryShares, n: usize, country: &str, rng: &mut R) -> Result<ClientPopulation> {
    let shares = shares
        .normalized()
        .filter(|s| s.0.iter().all(|v| *v >= 0.0))
        .ok_or_else(|| Error::Param("category distribution must be nonnegative with positive mass".into()))?;
    let targets = churn_targets(&shares, n);
    let mut categories: Vec<Category> =
        Category::ALL.iter().flat_map(|&c| std::iter::repeat_n(c, targets[c.index()])).collect();
    categories.shuffle(rng);
    let country: Arc<str> = Arc::from(country);
    let mut pop = ClientPopulation::new();
    for c in categories {
        pop.push(country.clone(), c);
    }
    Ok(pop)
}

/// Per-category signed change in client counts for one day.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChurnDelta(pub [i64; 4]);

impl ChurnDelta {
    pub fn get(&self, category: Category) -> i64 {
        self.0[category.index()]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&d| d == 0)
    }
}

/// Integer targets `round(fraction * n)` summing exactly to `n`, by largest
/// remainder.
pub fn churn_targets(shares: &CategoryShares, n: usize) -> [usize; 4] {
    let raw = shares.0.map(|f| f * n as f64);
    let mut targets = raw.map(|v| v.floor() as usize);
    let assigned: usize = targets.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        targets[i] += 1;
    }
    targets
}

pub fn churn_delta(pop: &ClientPopulation, shares: &CategoryShares) -> ChurnDelta {
    let targets = churn_targets(shares, pop.len());
    let counts = pop.category_counts();
    ChurnDelta(std::array::from_fn(|i| targets[i] as i64 - counts[i] as i64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChurnOutcome {
    pub delta: ChurnDelta,
    pub removed: Vec<ClientId>,
    /// Index range in the population of the newly added, unassigned clients.
    pub added: Range<usize>,
}

/// Moves the population to `shares` while keeping its size.
///
/// Categories over target lose uniformly random members; categories under
/// target gain fresh clients without a guard. Every other client keeps its
/// guard and selection day.
pub fn apply_churn<R: Rng + ?Sized>(pop: &mut ClientPopulation, shares: &CategoryShares, rng: &mut R) -> Result<ChurnOutcome> {
    let shares = shares
        .normalized()
        .filter(|s| s.0.iter().all(|v| *v >= 0.0))
        .ok_or_else(|| Error::Param("churn distribution must be nonnegative with positive mass".into()))?;
    let delta = churn_delta(pop, &shares);

    let mut remove = vec![false; pop.len()];
    let mut removed = Vec::new();
    for c in Category::ALL {
        let surplus = -delta.get(c);
        if surplus <= 0 {
            continue;
        }
        let members: Vec<usize> = pop
            .clients
            .iter()
            .enumerate()
            .filter(|(_, cl)| cl.category == c)
            .map(|(i, _)| i)
            .collect();
        for k in sample(rng, members.len(), surplus as usize) {
            remove[members[k]] = true;
        }
    }
    let mut kept = Vec::with_capacity(pop.len());
    for (client, gone) in pop.clients.drain(..).zip(&remove) {
        if *gone {
            pop.category_counts[client.category.index()] -= 1;
            removed.push(client.id);
        } else {
            kept.push(client);
        }
    }
    pop.clients = kept;

    // New clients borrow a country from the category's remaining members;
    // `??` when none remain.
    let start = pop.len();
    for c in Category::ALL {
        let deficit = delta.get(c);
        if deficit <= 0 {
            continue;
        }
        let country: Arc<str> = pop
            .clients
            .iter()
            .find(|cl| cl.category == c)
            .map(|cl| cl.country.clone())
            .unwrap_or_else(|| Arc::from("??"));
        for _ in 0..deficit {
            pop.push(country.clone(), c);
        }
    }
    let end = pop.len();
    Ok(ChurnOutcome { delta, removed, added: start..end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpki::{RoaRecord, RovSource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn census_inputs() -> (PrefixTable<Asn>, RoaStore, RovRegistry) {
        let routes: PrefixTable<Asn> = [
            ("10.0.0.0/24".parse().unwrap(), Asn(1)),
            ("10.0.2.0/23".parse().unwrap(), Asn(1)),
            ("10.1.0.0/24".parse().unwrap(), Asn(2)),
            ("2001:db8::/32".parse().unwrap(), Asn(2)),
        ]
        .into_iter()
        .collect();
        let roas: RoaStore = [
            RoaRecord::new(Asn(1), "10.0.0.0/24".parse().unwrap(), 24).unwrap(),
            RoaRecord::new(Asn(1), "10.0.2.0/23".parse().unwrap(), 23).unwrap(),
        ]
        .into_iter()
        .collect();
        let mut rov = RovRegistry::default();
        rov.insert(Asn(1), 1.0, RovSource::Custom);
        (routes, roas, rov)
    }

    #[test]
    fn census_weights_by_address_count() {
        let (routes, roas, rov) = census_inputs();
        // AA: AS1's /24 and /23 are Both. BB: AS1 and AS2 -> Both 768, Neither 256.
        let users = "country,share\nAA,30\nBB,10\nCC,0\n";
        let asns = "AA,1\nBB,1\nBB,2\n";
        let built = build_census(users.as_bytes(), asns.as_bytes(), &routes, &roas, &rov).unwrap();
        let aa = &built.census.countries["AA"];
        assert!((aa.user_fraction - 0.75).abs() < 1e-12);
        assert_eq!(aa.categories.get(Category::Both), 1.0);
        let bb = &built.census.countries["BB"];
        assert!((bb.categories.get(Category::Both) - 0.75).abs() < 1e-12);
        assert!((bb.categories.get(Category::Neither) - 0.25).abs() < 1e-12);
        assert_eq!(built.census.countries["CC"].categories, CategoryShares::uniform());
        assert_eq!(built.warnings.len(), 1);
        built.census.validate().unwrap();
    }

    #[test]
    fn census_half_and_thirds() {
        let routes: PrefixTable<Asn> = [
            ("10.0.0.0/24".parse().unwrap(), Asn(1)),
            ("10.9.0.0/24".parse().unwrap(), Asn(2)),
            ("10.8.0.0/23".parse().unwrap(), Asn(3)),
        ]
        .into_iter()
        .collect();
        let roas: RoaStore = [
            RoaRecord::new(Asn(1), "10.0.0.0/24".parse().unwrap(), 24).unwrap(),
            RoaRecord::new(Asn(3), "10.8.0.0/23".parse().unwrap(), 23).unwrap(),
        ]
        .into_iter()
        .collect();
        let mut rov = RovRegistry::default();
        rov.insert(Asn(1), 1.0, RovSource::Custom);
        rov.insert(Asn(3), 1.0, RovSource::Custom);
        let half = build_census("X,1\n".as_bytes(), "X,1\nX,2\n".as_bytes(), &routes, &roas, &rov).unwrap();
        let x = &half.census.countries["X"].categories;
        assert!((x.get(Category::Both) - 0.5).abs() < 1e-12);
        assert!((x.get(Category::Neither) - 0.5).abs() < 1e-12);
        let thirds = build_census("X,1\n".as_bytes(), "X,3\nX,2\n".as_bytes(), &routes, &roas, &rov).unwrap();
        let x = &thirds.census.countries["X"].categories;
        assert!((x.get(Category::Both) - 2.0 / 3.0).abs() < 1e-12);
        assert!((x.get(Category::Neither) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_single_client() {
        let census = CountryCensus::single(CategoryShares::only(Category::Rov));
        let pop = sample_clients(&census, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pop.len(), 1);
        assert_eq!(pop.clients()[0].category, Category::Rov);
        assert!(sample_clients(&census, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let census = CountryCensus::single(CategoryShares([0.1, 0.2, 0.3, 0.4]));
        let a = sample_clients(&census, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_clients(&census, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_marginals_converge() {
        // Overall Both share: 0.5 * 0.8 + 0.5 * 0.4 = 0.6.
        let mut countries = BTreeMap::new();
        countries.insert(
            "AA".into(),
            CountryEntry { user_fraction: 0.5, categories: CategoryShares([0.1, 0.0, 0.8, 0.1]) },
        );
        countries.insert(
            "BB".into(),
            CountryEntry { user_fraction: 0.5, categories: CategoryShares([0.2, 0.2, 0.4, 0.2]) },
        );
        let census = CountryCensus { countries };
        assert!((census.overall().get(Category::Both) - 0.6).abs() < 1e-12);
        let pop = sample_clients(&census, 1_000_000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let both = pop.category_count(Category::Both) as f64 / 1e6;
        // 4 sigma of a binomial(1e6, 0.6) is about 0.002.
        assert!((both - 0.6).abs() < 0.002, "{both}");
    }

    fn population(counts: [usize; 4]) -> ClientPopulation {
        let mut pop = ClientPopulation::new();
        for c in Category::ALL {
            for _ in 0..counts[c.index()] {
                let id = pop.push("AA".into(), c);
                let last = pop.clients_mut().last_mut().unwrap();
                last.assigned_guard = Some(format!("g{}", id % 3).into());
                last.selected_on = Some(0);
            }
        }
        pop
    }

    #[test]
    fn targets_conserve_total() {
        assert_eq!(churn_targets(&CategoryShares([0.55, 0.25, 0.1, 0.1]), 100), [55, 25, 10, 10]);
        let t = churn_targets(&CategoryShares([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]), 100);
        assert_eq!(t.iter().sum::<usize>(), 100);
        assert_eq!(t, [34, 33, 33, 0]);
    }

    #[test]
    fn identical_distribution_means_no_churn() {
        let mut pop = population([30, 10, 50, 10]);
        let before = pop.clone();
        let out = apply_churn(&mut pop, &before.shares(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.delta.is_zero());
        assert!(out.added.is_empty());
        assert_eq!(pop, before);
    }

    #[test]
    fn churn_arithmetic() {
        // Counts {roa 30, rov 10, both 50, neither 10} move to {25, 10, 55, 10}.
        let mut pop = population([30, 10, 50, 10]);
        let before = pop.clone();
        let shares = CategoryShares::from_pairs(&[
            (Category::Both, 0.55),
            (Category::Roa, 0.25),
            (Category::Rov, 0.10),
            (Category::Neither, 0.10),
        ]);
        let out = apply_churn(&mut pop, &shares, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.delta, ChurnDelta([-5, 0, 5, 0]));
        assert_eq!(out.removed.len(), 5);
        assert_eq!(out.added.len(), 5);
        assert_eq!(pop.len(), 100);
        assert_eq!(pop.category_counts(), [25, 10, 55, 10]);
        for id in &out.removed {
            let old = before.clients().iter().find(|c| c.id == *id).unwrap();
            assert_eq!(old.category, Category::Roa);
        }
        for c in &pop.clients()[out.added.clone()] {
            assert_eq!(c.category, Category::Both);
            assert!(c.assigned_guard.is_none());
        }
        for c in &pop.clients()[..out.added.start] {
            let old = before.clients().iter().find(|o| o.id == c.id).unwrap();
            assert_eq!(old, c);
        }
    }
}
