//! Discount selection: non-ROA guards have their weight multiplied by a
//! discount factor, and clients pick guards under dynamic load balancing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::{Category, GuardProfile, WeightMatrix};

/// Discount factor `d` and load factor `l`, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscountParams {
    pub discount: f64,
    pub load: f64,
}

impl DiscountParams {
    pub fn new(discount: f64, load: f64) -> Result<Self> {
        let p = DiscountParams { discount, load };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Param(format!("discount factor must be in [0, 1], got {}", self.discount)));
        }
        if !(0.0..=1.0).contains(&self.load) {
            return Err(Error::Param(format!("load factor must be in [0, 1], got {}", self.load)));
        }
        Ok(())
    }
}

/// Consensus weight for ROA-covered guards, `d` times it otherwise.
pub fn discounted_weights(guards: &[GuardProfile], discount: f64) -> Vec<f64> {
    guards
        .iter()
        .map(|g| if g.category.has_roa() { g.bandwidth } else { discount * g.bandwidth })
        .collect()
}

//------------ WeightTree ----------------------------------------------------

/// Fenwick tree over nonnegative weights for proportional sampling with
/// point updates.
#[derive(Clone, Debug)]
struct WeightTree {
    tree: Vec<f64>,
    weights: Vec<f64>,
    top: usize,
    updates: usize,
    built_total: f64,
}

const REBUILD_EVERY: usize = 4096;

impl WeightTree {
    fn new(weights: Vec<f64>) -> Self {
        let n = weights.len();
        let top = if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
        let mut t = WeightTree { tree: vec![0.0; n + 1], weights, top, updates: 0, built_total: 0.0 };
        t.rebuild();
        t
    }

    fn rebuild(&mut self) {
        let n = self.weights.len();
        self.tree.iter_mut().for_each(|v| *v = 0.0);
        for i in 1..=n {
            self.tree[i] += self.weights[i - 1];
            let j = i + (i & i.wrapping_neg());
            if j <= n {
                self.tree[j] += self.tree[i];
            }
        }
        self.updates = 0;
        self.built_total = self.total();
    }

    fn total(&self) -> f64 {
        let mut i = self.weights.len();
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    fn set(&mut self, idx: usize, w: f64) {
        let delta = w - self.weights[idx];
        self.weights[idx] = w;
        if delta == 0.0 {
            return;
        }
        self.updates += 1;
        if self.updates >= REBUILD_EVERY {
            self.rebuild();
            return;
        }
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
        // Rounding residue from large past weights would swamp small ones.
        if self.total() < self.built_total * 1e-6 {
            self.rebuild();
        }
    }

    /// Index `i` whose cumulative interval contains `u`, for `u` in
    /// `[0, total)`. Never returns a zero-weight index when any weight is
    /// positive.
    fn find(&self, u: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut rem = u;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        let pos = pos.min(n - 1);
        if self.weights[pos] > 0.0 {
            return pos;
        }
        // Rounding landed on an empty slot; move to the nearest positive one.
        (pos..n)
            .chain((0..pos).rev())
            .find(|&i| self.weights[i] > 0.0)
            .unwrap_or(pos)
    }
}

//------------ SelectionState ------------------------------------------------

/// Outcome of one client's guard selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub relay: usize,
    /// Accepted only because the retry budget ran out.
    pub overloaded: bool,
    pub attempts: u32,
}

pub const DEFAULT_MAX_RETRIES: u32 = 100;

/// Load-balancing inputs: load factor, the number of clients expected to
/// select, and the retry budget per client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Balance {
    pub load: f64,
    pub expected_clients: u64,
    pub max_retries: u32,
}

impl Balance {
    pub fn new(load: f64, expected_clients: u64) -> Self {
        Balance { load, expected_clients: expected_clients.max(1), max_retries: DEFAULT_MAX_RETRIES }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }
}

/// Mutable state of one simulation run's load-balanced guard selection.
///
/// Each client is owed `l * B / N` bandwidth, with `B` the total guard
/// bandwidth and `N` the expected client count. A sampled relay whose
/// per-client bandwidth after accepting, `b_r / (n_r + 1)`, would fall below
/// that is saturated: its weight is multiplied by the ratio of the two and
/// the client draws again. Reductions compound and apply to every weight
/// column of the relay.
#[derive(Clone, Debug)]
pub struct SelectionState {
    bandwidth: Vec<f64>,
    total_bandwidth: f64,
    base: Vec<Vec<f64>>,
    trees: Vec<WeightTree>,
    multiplier: Vec<Vec<f64>>,
    assigned: Vec<u64>,
    overloads: Vec<u64>,
    total_clients: u64,
    balance: Balance,
    reductions: u64,
}

impl SelectionState {
    /// State with arbitrary base weight columns over `guards`.
    pub fn with_columns(guards: &[GuardProfile], columns: Vec<Vec<f64>>, balance: Balance) -> Self {
        let bandwidth: Vec<f64> = guards.iter().map(|g| g.bandwidth).collect();
        let total_bandwidth = bandwidth.iter().sum();
        let trees = columns.iter().map(|c| WeightTree::new(c.clone())).collect();
        SelectionState {
            total_bandwidth,
            multiplier: vec![vec![1.0; guards.len()]; columns.len()],
            assigned: vec![0; guards.len()],
            overloads: vec![0; guards.len()],
            bandwidth,
            base: columns,
            trees,
            total_clients: 0,
            balance,
            reductions: 0,
        }
    }

    /// Single-column state using discounted consensus weights.
    pub fn discount(guards: &[GuardProfile], discount: f64, balance: Balance) -> Self {
        Self::with_columns(guards, vec![discounted_weights(guards, discount)], balance)
    }

    /// Four-column state, one per client category, from optimized weights.
    pub fn matching(guards: &[GuardProfile], weights: &WeightMatrix, balance: Balance) -> Self {
        let columns = Category::ALL.iter().map(|&c| weights.column(c).to_vec()).collect();
        Self::with_columns(guards, columns, balance)
    }

    pub fn relay_count(&self) -> usize {
        self.bandwidth.len()
    }

    pub fn column_count(&self) -> usize {
        self.base.len()
    }

    pub fn effective_weight(&self, column: usize, relay: usize) -> f64 {
        self.trees[column].weights[relay]
    }

    pub fn base_weight(&self, column: usize, relay: usize) -> f64 {
        self.base[column][relay]
    }

    pub fn assigned(&self) -> &[u64] {
        &self.assigned
    }

    /// Per relay, how many clients were accepted past saturation.
    pub fn overloads(&self) -> &[u64] {
        &self.overloads
    }

    pub fn total_clients(&self) -> u64 {
        self.total_clients
    }

    /// Number of weight reductions applied so far.
    pub fn reductions(&self) -> u64 {
        self.reductions
    }

    /// Bandwidth owed to each client.
    pub fn demand_per_client(&self) -> f64 {
        self.balance.load * self.total_bandwidth / self.balance.expected_clients as f64
    }

    /// Records a client already attached to `relay` (e.g. kept across churn).
    pub fn preassign(&mut self, relay: usize) {
        self.assigned[relay] += 1;
        self.total_clients += 1;
    }

    fn reduce(&mut self, relay: usize, factor: f64) {
        self.reductions += 1;
        for c in 0..self.trees.len() {
            self.multiplier[c][relay] *= factor;
            let b = self.base[c][relay];
            if b > 0.0 {
                self.trees[c].set(relay, b * self.multiplier[c][relay]);
            }
            // Keep the column clear of underflow; only proportions matter.
            if self.trees[c].total() < 1e-200 {
                let max = self.base[c]
                    .iter()
                    .zip(&self.multiplier[c])
                    .filter(|(b, _)| **b > 0.0)
                    .map(|(_, m)| *m)
                    .fold(0.0, f64::max);
                if max == 0.0 {
                    continue;
                }
                for (m, b) in self.multiplier[c].iter_mut().zip(&self.base[c]) {
                    if *b > 0.0 {
                        *m /= max;
                    }
                }
                let tree = &mut self.trees[c];
                tree.weights = self.base[c].iter().zip(&self.multiplier[c]).map(|(b, m)| b * m).collect();
                tree.rebuild();
            }
        }
    }

    /// Selects a guard for one client drawing from weight `column`.
    pub fn select<R: Rng + ?Sized>(&mut self, column: usize, rng: &mut R) -> Result<Selection> {
        let mut attempts = 0;
        loop {
            let total = self.trees[column].total();
            if !(total > 0.0) {
                return Err(Error::NoEligibleGuard);
            }
            let u = rng.random::<f64>() * total;
            let relay = self.trees[column].find(u);
            attempts += 1;

            let share = self.bandwidth[relay] / (self.assigned[relay] as f64 + 1.0);
            let demand = self.demand_per_client();
            let saturated = share < demand;
            if saturated {
                self.reduce(relay, share / demand);
            }
            if !saturated || attempts > self.balance.max_retries {
                self.assigned[relay] += 1;
                self.total_clients += 1;
                if saturated {
                    self.overloads[relay] += 1;
                }
                return Ok(Selection { relay, overloaded: saturated, attempts });
            }
        }
    }
}

/// Fraction of selections that landed on a ROA-covered guard.
pub fn client_roa_rate(assignments: &[usize], guards: &[GuardProfile]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let covered = assignments.iter().filter(|&&r| guards[r].category.has_roa()).count();
    covered as f64 / assignments.len() as f64
}

fn check_capacity(w_roa: f64, w_total: f64) -> Result<()> {
    if !(w_total > 0.0) || !w_total.is_finite() {
        return Err(Error::ZeroBandwidth);
    }
    if !(0.0..=w_total).contains(&w_roa) {
        return Err(Error::Param(format!("ROA bandwidth {w_roa} outside [0, {w_total}]")));
    }
    Ok(())
}

/// Expected fraction of total guard bandwidth in use when demand `l * W` is
/// split between ROA and non-ROA guards by discounted weight. Demand above a
/// group's capacity is not served.
pub fn expected_utilization(load: f64, discount: f64, w_roa: f64, w_total: f64) -> Result<f64> {
    check_capacity(w_roa, w_total)?;
    let w_non = w_total - w_roa;
    let denom = w_roa + discount * w_non;
    let roa_share = if denom > 0.0 { w_roa / denom } else { 1.0 };
    let demand = load * w_total;
    let served = (demand * roa_share).min(w_roa) + (demand * (1.0 - roa_share)).min(w_non);
    Ok(served / w_total)
}

/// Smallest discount factor that keeps utilization at the full load `l`.
pub fn optimal_discount(load: f64, w_roa: f64, w_total: f64) -> Result<f64> {
    check_capacity(w_roa, w_total)?;
    let w_non = w_total - w_roa;
    if w_non <= 0.0 {
        return Ok(0.0);
    }
    Ok(((load * w_total - w_roa) / w_non).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(cat: Category, bw: f64) -> GuardProfile {
        GuardProfile::new(cat, bw)
    }

    #[test]
    fn weights_follow_discount() {
        let guards = [g(Category::Roa, 100.0), g(Category::Neither, 100.0), g(Category::Rov, 50.0)];
        assert_eq!(discounted_weights(&guards, 1.0), [100.0, 100.0, 50.0]);
        assert_eq!(discounted_weights(&guards, 0.0), [100.0, 0.0, 0.0]);
        let w = discounted_weights(&guards[..2], 0.5);
        assert!((w[0] / (w[0] + w[1]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(DiscountParams::new(0.5, 0.8).is_ok());
        assert!(DiscountParams::new(1.5, 0.8).is_err());
        assert!(DiscountParams::new(0.5, -0.1).is_err());
    }

    #[test]
    fn tree_sampling_matches_prefix_sums() {
        let w = vec![1.0, 0.0, 2.0, 3.0, 0.0];
        let t = WeightTree::new(w);
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(2.999), 2);
        assert_eq!(t.find(3.0), 3);
        assert_eq!(t.find(5.999), 3);
    }

    #[test]
    fn tree_updates() {
        let mut t = WeightTree::new(vec![1.0; 7]);
        t.set(3, 0.0);
        t.set(6, 4.0);
        assert!((t.total() - 9.0).abs() < 1e-12);
        assert_eq!(t.find(3.5), 4);
        assert_eq!(t.find(8.5), 6);
    }

    #[test]
    fn single_relay_always_chosen() {
        let guards = [g(Category::Neither, 10.0)];
        let mut st = SelectionState::discount(&guards, 0.3, Balance::new(0.8, 1000));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(st.select(0, &mut rng).unwrap().relay, 0);
        }
    }

    #[test]
    fn zero_weights_are_an_error() {
        let guards = [g(Category::Neither, 10.0)];
        let mut st = SelectionState::discount(&guards, 0.0, Balance::new(0.8, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(st.select(0, &mut rng), Err(Error::NoEligibleGuard)));
    }

    #[test]
    fn equal_relays_split_evenly() {
        let guards = [g(Category::Roa, 1.0), g(Category::Roa, 1.0)];
        let mut st = SelectionState::discount(&guards, 1.0, Balance::new(0.5, 100_000));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            st.select(0, &mut rng).unwrap();
        }
        let f = st.assigned()[0] as f64 / 100_000.0;
        assert!((f - 0.5).abs() < 0.01, "{f}");
        assert_eq!(st.overloads().iter().sum::<u64>(), 0);
    }

    #[test]
    fn saturated_relay_weight_decreases() {
        // Relay 0 has 10% of bandwidth but almost all the weight.
        let guards = [g(Category::Roa, 1.0), g(Category::Neither, 9.0)];
        let mut st = SelectionState::discount(&guards, 0.001, Balance::new(1.0, 100));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let before = st.effective_weight(0, 0);
        let mut reduced = false;
        for _ in 0..50 {
            let w = st.effective_weight(0, 0);
            st.select(0, &mut rng).unwrap();
            if st.effective_weight(0, 0) < w {
                reduced = true;
                break;
            }
        }
        assert!(reduced);
        assert!(st.effective_weight(0, 0) < before);
        assert!(st.effective_weight(0, 0) <= st.base_weight(0, 0));
    }

    #[test]
    fn forced_roa_at_zero_discount() {
        let guards = [g(Category::Roa, 1.0), g(Category::Neither, 9.0), g(Category::Both, 2.0)];
        let mut st = SelectionState::discount(&guards, 0.0, Balance::new(0.9, 20_000));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let picks: Vec<usize> = (0..20_000).map(|_| st.select(0, &mut rng).unwrap().relay).collect();
        assert_eq!(client_roa_rate(&picks, &guards), 1.0);
        // Far above ROA capacity, so the retry budget must have run out.
        assert!(st.overloads().iter().sum::<u64>() > 0);
    }

    #[test]
    fn utilization_examples() {
        for l in [0.0, 0.3, 0.8, 1.0] {
            assert!((expected_utilization(l, 1.0, 0.8, 1.0).unwrap() - l).abs() < 1e-12);
        }
        assert!((expected_utilization(0.5, 0.0, 0.8, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let u = expected_utilization(0.9, 0.25, 0.8, 1.0).unwrap();
        assert!((u - (0.8 + 0.9 * 0.05 / 0.85)).abs() < 1e-12);
        assert!((u - 0.853).abs() < 1e-3);
        assert!(expected_utilization(0.5, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn optimal_discount_examples() {
        assert_eq!(optimal_discount(0.7, 0.8, 1.0).unwrap(), 0.0);
        assert_eq!(optimal_discount(0.8, 0.8, 1.0).unwrap(), 0.0);
        assert!((optimal_discount(1.0, 0.8, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((optimal_discount(0.9, 0.8, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(optimal_discount(1.0, 5.0, 5.0).unwrap(), 0.0);
        assert!(optimal_discount(0.5, 0.0, 0.0).is_err());
    }
}
