//! Matching selection: ROA/ROV categories, the pair reward function, the
//! weight-allocation linear program and matched-rate metrics.
//!
//! The program has one weight `w[r][s]` per guard relay `r` and client
//! category `s`:
//!
//! * every client category's weights sum to one,
//! * a relay's client-share-weighted load stays within `b_r / l`,
//! * no weight exceeds `theta` times the relay's vanilla probability.
//!
//! Both bounds on relay `r` scale with its bandwidth share `b_r`, so relays
//! of the same category are interchangeable up to that scale. The optimizer
//! therefore solves the program over the (at most four) relay categories and
//! splits each category's weight across its relays in proportion to
//! bandwidth. Any solution of the full program aggregates to a feasible
//! solution of the small one with the same objective, and the proportional
//! split maps back feasibly, so both have the same optimum. [`build_lp`]
//! still produces the full per-relay program for independent checking.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem, Row};

//------------ Category ------------------------------------------------------

/// Joint ROA/ROV status of an AS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Roa,
    Rov,
    Both,
    Neither,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Roa, Category::Rov, Category::Both, Category::Neither];

    pub const fn index(self) -> usize {
        match self {
            Category::Roa => 0,
            Category::Rov => 1,
            Category::Both => 2,
            Category::Neither => 3,
        }
    }

    pub fn has_roa(self) -> bool {
        matches!(self, Category::Roa | Category::Both)
    }

    pub fn has_rov(self) -> bool {
        matches!(self, Category::Rov | Category::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Roa => "roa",
            Category::Rov => "rov",
            Category::Both => "both",
            Category::Neither => "neither",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "roa" => Category::Roa,
            "rov" => Category::Rov,
            "both" => Category::Both,
            "neither" => Category::Neither,
            _ => return Err(UnknownCategory(s.to_string())),
        })
    }
}

pub fn category_of(roa_valid: bool, rov_enforcing: bool) -> Category {
    match (roa_valid, rov_enforcing) {
        (true, true) => Category::Both,
        (true, false) => Category::Roa,
        (false, true) => Category::Rov,
        (false, false) => Category::Neither,
    }
}

/// A matched pair has ROA on one side complemented by ROV on the other.
pub fn is_matched(client: Category, relay: Category) -> bool {
    (client.has_roa() && relay.has_rov()) || (client.has_rov() && relay.has_roa())
}

//------------ CategoryShares ------------------------------------------------

/// A fraction per category, e.g. the client distribution `T`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CategoryShares(pub [f64; 4]);

impl CategoryShares {
    pub fn uniform() -> Self {
        CategoryShares([0.25; 4])
    }

    pub fn only(category: Category) -> Self {
        let mut s = [0.0; 4];
        s[category.index()] = 1.0;
        CategoryShares(s)
    }

    pub fn from_pairs(pairs: &[(Category, f64)]) -> Self {
        let mut s = [0.0; 4];
        for &(c, v) in pairs {
            s[c.index()] += v;
        }
        CategoryShares(s)
    }

    pub fn get(&self, category: Category) -> f64 {
        self.0[category.index()]
    }

    pub fn set(&mut self, category: Category, value: f64) {
        self.0[category.index()] = value;
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Scales to sum one; `None` if all entries are zero.
    pub fn normalized(&self) -> Option<Self> {
        let total = self.sum();
        (total > 0.0).then(|| CategoryShares(self.0.map(|v| v / total)))
    }

    pub fn is_distribution(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0) && (self.sum() - 1.0).abs() <= 1e-9
    }

    pub fn iter(&self) -> impl Iterator<Item = (Category, f64)> + '_ {
        Category::ALL.iter().map(move |&c| (c, self.get(c)))
    }
}

//------------ Rewards -------------------------------------------------------

/// Reward structure: `d1` discounts a missing ROV, `d2` a missing ROA, and
/// `bonus` multiplies the reward of matched pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardParams {
    pub d1: f64,
    pub d2: f64,
    pub bonus: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { d1: 0.9, d2: 0.7, bonus: 1.5 }
    }
}

impl RewardParams {
    pub fn new(d1: f64, d2: f64, bonus: f64) -> Result<Self> {
        let p = RewardParams { d1, d2, bonus };
        p.validate()?;
        Ok(p)
    }

    /// `0 <= d2 < d1 <= 1`, `B > 1` and `d1^2 < B d2`.
    pub fn validate(&self) -> Result<()> {
        let RewardParams { d1, d2, bonus } = *self;
        if !(0.0 <= d2 && d2 < d1 && d1 <= 1.0) {
            return Err(Error::Param(format!("need 0 <= d2 < d1 <= 1, got d1={d1}, d2={d2}")));
        }
        if !(bonus > 1.0) {
            return Err(Error::Param(format!("matching bonus must exceed 1, got {bonus}")));
        }
        if !(d1 * d1 < bonus * d2) {
            return Err(Error::Param(format!(
                "need d1*d1 < B*d2 for a strictly decreasing reward order, got {} >= {}",
                d1 * d1,
                bonus * d2
            )));
        }
        Ok(())
    }
}

/// Per-side reward factor for one AS.
pub fn unit_reward(category: Category, p: &RewardParams) -> f64 {
    match category {
        Category::Both => 1.0,
        Category::Roa => p.d1,
        Category::Rov => p.d2,
        Category::Neither => p.d1 * p.d2,
    }
}

/// Reward of a client/relay pair, including the matching bonus.
pub fn pair_reward(client: Category, relay: Category, p: &RewardParams) -> f64 {
    let base = unit_reward(client, p) * unit_reward(relay, p);
    if is_matched(client, relay) {
        p.bonus * base
    } else {
        base
    }
}

//------------ Configuration -------------------------------------------------

/// How client shares enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Coefficient `T_s * P`: the client-weighted expected reward.
    #[default]
    Weighted,
    /// Coefficient `P`: every client category counts equally.
    Literal,
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(ObjectiveMode::Weighted),
            "literal" => Ok(ObjectiveMode::Literal),
            _ => Err(Error::Param(format!("unknown objective mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpConfig {
    pub load: f64,
    pub theta: f64,
    pub reward: RewardParams,
    pub clients: CategoryShares,
    pub mode: ObjectiveMode,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            load: 0.8,
            theta: 5.0,
            reward: RewardParams::default(),
            clients: CategoryShares::uniform(),
            mode: ObjectiveMode::Weighted,
        }
    }
}

impl LpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.load > 0.0 && self.load <= 1.0) {
            return Err(Error::Param(format!("load factor must be in (0, 1], got {}", self.load)));
        }
        if !(self.theta >= 1.0) {
            return Err(Error::Param(format!("theta must be >= 1, got {}", self.theta)));
        }
        if !self.clients.is_distribution() {
            return Err(Error::Param(format!(
                "client distribution must be nonnegative and sum to 1, got {:?}",
                self.clients.0
            )));
        }
        self.reward.validate()
    }

    /// Objective coefficient of `w[r][s]` for a relay of `relay` category.
    pub fn coefficient(&self, client: Category, relay: Category) -> f64 {
        let p = pair_reward(client, relay, &self.reward);
        match self.mode {
            ObjectiveMode::Weighted => self.clients.get(client) * p,
            ObjectiveMode::Literal => p,
        }
    }
}

/// The two facts the optimizer needs about a guard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuardProfile {
    pub category: Category,
    pub bandwidth: f64,
}

impl GuardProfile {
    pub fn new(category: Category, bandwidth: f64) -> Self {
        GuardProfile { category, bandwidth }
    }
}

/// Bandwidth shares summing to one.
pub fn normalized_bandwidth(guards: &[GuardProfile]) -> Result<Vec<f64>> {
    let total: f64 = guards.iter().map(|g| g.bandwidth).sum();
    if guards.is_empty() || !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroBandwidth);
    }
    Ok(guards.iter().map(|g| g.bandwidth / total).collect())
}

/// Index of `w[relay][client]` in the flattened variable vector.
pub fn var_index(relay: usize, client: Category) -> usize {
    relay * 4 + client.index()
}

/// Builds the full weight-allocation program, four variables per relay.
pub fn build_lp(guards: &[GuardProfile], cfg: &LpConfig) -> Result<LpProblem> {
    cfg.validate()?;
    let share = normalized_bandwidth(guards)?;
    let mut lp = LpProblem::new(guards.len() * 4);
    for (r, g) in guards.iter().enumerate() {
        for s in Category::ALL {
            let j = var_index(r, s);
            lp.objective[j] = cfg.coefficient(s, g.category);
            lp.upper[j] = cfg.theta * share[r];
        }
    }
    for s in Category::ALL {
        let coeffs = (0..guards.len()).map(|r| (var_index(r, s), 1.0)).collect();
        lp.equalities.push(Row::new(coeffs, 1.0));
    }
    for (r, &b) in share.iter().enumerate() {
        let coeffs = Category::ALL
            .iter()
            .filter(|s| cfg.clients.get(**s) > 0.0)
            .map(|&s| (var_index(r, s), cfg.clients.get(s)))
            .collect();
        lp.inequalities.push(Row::new(coeffs, b / cfg.load));
    }
    Ok(lp)
}

//------------ WeightMatrix --------------------------------------------------

/// Optimized selection probabilities per relay and client category, plus
/// the vanilla (bandwidth-proportional) baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    columns: [Vec<f64>; 4],
    vanilla: Vec<f64>,
    relay_categories: Vec<Category>,
}

impl WeightMatrix {
    /// Vanilla weights in every column.
    pub fn vanilla(guards: &[GuardProfile]) -> Result<Self> {
        let share = normalized_bandwidth(guards)?;
        Ok(WeightMatrix {
            columns: [share.clone(), share.clone(), share.clone(), share.clone()],
            vanilla: share,
            relay_categories: guards.iter().map(|g| g.category).collect(),
        })
    }

    /// Rebuilds a matrix from a flattened LP solution vector.
    pub fn from_solution(guards: &[GuardProfile], x: &[f64]) -> Result<Self> {
        let mut m = WeightMatrix::vanilla(guards)?;
        for s in Category::ALL {
            m.columns[s.index()] = (0..guards.len()).map(|r| x[var_index(r, s)]).collect();
        }
        Ok(m)
    }

    pub fn relay_count(&self) -> usize {
        self.vanilla.len()
    }

    pub fn column(&self, client: Category) -> &[f64] {
        &self.columns[client.index()]
    }

    pub fn weight(&self, relay: usize, client: Category) -> f64 {
        self.columns[client.index()][relay]
    }

    pub fn vanilla_weights(&self) -> &[f64] {
        &self.vanilla
    }

    pub fn relay_categories(&self) -> &[Category] {
        &self.relay_categories
    }

    /// Flattened in [`var_index`] order.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.relay_count() * 4];
        for s in Category::ALL {
            for (r, &w) in self.column(s).iter().enumerate() {
                x[var_index(r, s)] = w;
            }
        }
        x
    }

    /// Value of the optimizer's objective at these weights.
    pub fn objective(&self, cfg: &LpConfig) -> f64 {
        Category::ALL
            .iter()
            .map(|&s| {
                self.column(s)
                    .iter()
                    .zip(&self.relay_categories)
                    .map(|(w, &rc)| w * cfg.coefficient(s, rc))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest violation of normalization, capacity and placement bounds.
    pub fn violations(&self, cfg: &LpConfig) -> ConstraintViolations {
        let normalization = Category::ALL
            .iter()
            .map(|&s| (self.column(s).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let mut capacity: f64 = 0.0;
        let mut placement: f64 = 0.0;
        let mut negative: f64 = 0.0;
        for (r, &b) in self.vanilla.iter().enumerate() {
            let load: f64 = Category::ALL
                .iter()
                .map(|&s| cfg.clients.get(s) * self.weight(r, s))
                .sum();
            capacity = capacity.max(load - b / cfg.load);
            for s in Category::ALL {
                let w = self.weight(r, s);
                placement = placement.max(w - cfg.theta * b);
                negative = negative.max(-w);
            }
        }
        ConstraintViolations { normalization, capacity, placement, negative }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintViolations {
    pub normalization: f64,
    pub capacity: f64,
    pub placement: f64,
    pub negative: f64,
}

/// Computes optimal weights for all client categories at once.
pub fn optimize_weights(guards: &[GuardProfile], cfg: &LpConfig) -> Result<WeightMatrix> {
    cfg.validate()?;
    let share = normalized_bandwidth(guards)?;

    let mut group_share = [0.0f64; 4];
    for (g, &b) in guards.iter().zip(&share) {
        group_share[g.category.index()] += b;
    }
    let groups: Vec<GuardProfile> = Category::ALL
        .iter()
        .filter(|c| group_share[c.index()] > 0.0)
        .map(|&c| GuardProfile::new(c, group_share[c.index()]))
        .collect();

    let lp = build_lp(&groups, cfg)?;
    let solution = solve_lp(&lp)?;
    let mut group_weights = WeightMatrix::from_solution(&groups, &solution.x)?;

    // Columns without clients carry no objective weight in weighted mode and
    // do not touch relay capacity; fill them greedily by reward so a later
    // client of that category still gets a useful distribution.
    if cfg.mode == ObjectiveMode::Weighted {
        for s in Category::ALL.into_iter().filter(|&s| cfg.clients.get(s) == 0.0) {
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.sort_by(|&a, &b| {
                let pa = pair_reward(s, groups[a].category, &cfg.reward);
                let pb = pair_reward(s, groups[b].category, &cfg.reward);
                pb.total_cmp(&pa).then(a.cmp(&b))
            });
            let mut column = vec![0.0; groups.len()];
            let mut remaining = 1.0f64;
            for g in order {
                let take = remaining.min(cfg.theta * groups[g].bandwidth);
                column[g] = take;
                remaining -= take;
                if remaining <= 0.0 {
                    break;
                }
            }
            group_weights.columns[s.index()] = column;
        }
    }

    let mut result = WeightMatrix::vanilla(guards)?;
    for s in Category::ALL {
        let column = &mut result.columns[s.index()];
        for (r, g) in guards.iter().enumerate() {
            let gi = groups.iter().position(|x| x.category == g.category);
            column[r] = match gi {
                Some(gi) => share[r] / groups[gi].bandwidth * group_weights.weight(gi, s),
                None => 0.0,
            };
        }
    }
    Ok(result)
}

/// Expected fraction of clients on matched pairs under `weights`.
pub fn expected_matched_rate(weights: &WeightMatrix, clients: &CategoryShares) -> f64 {
    Category::ALL
        .iter()
        .map(|&s| {
            let inner: f64 = weights
                .column(s)
                .iter()
                .zip(weights.relay_categories())
                .filter(|(_, &rc)| is_matched(s, rc))
                .map(|(w, _)| w)
                .sum();
            clients.get(s) * inner
        })
        .sum()
}

/// Matched rate if every client used vanilla weights.
pub fn vanilla_matched_rate(weights: &WeightMatrix, clients: &CategoryShares) -> f64 {
    Category::ALL
        .iter()
        .map(|&s| {
            let inner: f64 = weights
                .vanilla_weights()
                .iter()
                .zip(weights.relay_categories())
                .filter(|(_, &rc)| is_matched(s, rc))
                .map(|(w, _)| w)
                .sum();
            clients.get(s) * inner
        })
        .sum()
}
