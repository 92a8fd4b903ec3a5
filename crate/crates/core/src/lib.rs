//! RPKI-aware Tor guard selection.
//!
//! Measures how much of the guard population sits in ROA-covered prefixes,
//! and simulates two guard selection schemes that steer clients toward
//! protected relays: a discount on non-ROA relays, and client/relay matching
//! by ROA and ROV status through a linear program.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clients;
pub mod consensus;
pub mod coverage;
pub mod discount;
pub mod error;
pub mod lp;
pub mod matching;
pub mod netprefix;
pub mod rpki;
pub mod sim;

pub use crate::clients::{Client, ClientPopulation, CountryCensus};
pub use crate::consensus::{ConsensusSnapshot, Relay};
pub use crate::discount::{Balance, DiscountParams, SelectionState};
pub use crate::error::{Error, Result};
pub use crate::matching::{Category, CategoryShares, GuardProfile, LpConfig, ObjectiveMode, RewardParams, WeightMatrix};
pub use crate::netprefix::{Family, IpPrefix, PrefixTable};
pub use crate::rpki::{Asn, RoaRecord, RoaStore, RovRegistry, ValidationResult};
pub use crate::sim::{Algorithm, SimConfig};
