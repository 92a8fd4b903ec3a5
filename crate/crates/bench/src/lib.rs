//! Synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roaguard::rpki::RoaRecord;
use roaguard::{Asn, Category, GuardProfile, IpPrefix, RoaStore};

/// `n` guards with random categories and heavy-tailed bandwidths.
pub fn guards(n: usize, seed: u64) -> Vec<GuardProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let category = Category::ALL[rng.random_range(0..4)];
            let bw = (1.0 / rng.random_range(0.001f64..1.0)).min(500.0);
            GuardProfile::new(category, bw)
        })
        .collect()
}

/// `n` random IPv4 ROAs with lengths between 8 and 24.
pub fn roas(n: usize, seed: u64) -> RoaStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(8u8..=24);
            let addr = std::net::Ipv4Addr::from(rng.random::<u32>());
            let prefix = IpPrefix::new(addr.into(), len).expect("valid length");
            RoaRecord::new(Asn(rng.random_range(1..5000)), prefix, rng.random_range(u32::from(len)..=24))
                .expect("valid roa")
        })
        .collect()
}
