//! Device-bound time tokens and the firewall that validates them, plus the
//! machinery to attack, simulate and measure that defence: an attacker that
//! harvests and redistributes fresh tokens, a synthetic one-day workload
//! generator, a deterministic event-driven simulator and the analytics that
//! turn simulation logs into tables, sweeps and regression fits.

pub mod adversary;
pub mod analytics;
pub mod exec;
pub mod firewall;
pub mod fixtures;
pub mod rng;
pub mod sim;
pub mod token;
pub mod workload;

pub use firewall::{
    Cooldown, Decision, DeviceLedger, Firewall, FirewallConfig, FirewallPolicy, Mode, Reason,
    SharedFirewall, Verdict,
};
pub use token::{KeyMaterial, Token, TokenPayload};
