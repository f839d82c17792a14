//! The replication attacker.
//!
//! Harvester devices run the genuine app and mint fresh, perfectly valid
//! tokens on a fixed cadence. Every token lands in a central store tagged
//! with its mint time and source device, and the counterfeit app pulls one
//! from the store per user request according to a distribution strategy.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::token::{mint_token, KeyMaterial, Token, TokenError, TokenPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Bare URL with no token at all.
    StaticUrl,
    /// One token minted once and handed to everybody.
    SingleToken,
    /// Uniform draw, with replacement, from the current harvest.
    RandomPool,
    /// Cycle over harvesters, freshest unused token of each.
    RoundRobin,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::StaticUrl => "static_url",
            Strategy::SingleToken => "single_token",
            Strategy::RandomPool => "random_pool",
            Strategy::RoundRobin => "round_robin",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static_url" => Ok(Strategy::StaticUrl),
            "single_token" => Ok(Strategy::SingleToken),
            "random_pool" => Ok(Strategy::RandomPool),
            "round_robin" => Ok(Strategy::RoundRobin),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AdversaryError {
    #[error("token store is empty")]
    StoreEmpty,
    #[error("invalid adversary spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub n_harvesters: u32,
    /// Seconds between harvests at peak demand.
    pub harvest_interval: i64,
    /// Stretch the interval in quiet hours in proportion to expected demand.
    pub demand_tracking: bool,
    pub strategy: Strategy,
    pub delete_after_use: bool,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        Self {
            n_harvesters: 5,
            harvest_interval: 60,
            demand_tracking: false,
            strategy: Strategy::RoundRobin,
            delete_after_use: true,
        }
    }
}

impl AdversarySpec {
    /// Harvesting slower than the firewall's time window would hand out
    /// expired tokens, so the cadence must beat it.
    pub fn validate(&self, time_window: i64) -> Result<(), AdversaryError> {
        if self.n_harvesters == 0 {
            return Err(AdversaryError::InvalidSpec(
                "n_harvesters must be positive".into(),
            ));
        }
        if self.harvest_interval <= 0 || self.harvest_interval >= time_window {
            return Err(AdversaryError::InvalidSpec(format!(
                "harvest_interval {} must lie in 1..{time_window}",
                self.harvest_interval
            )));
        }
        Ok(())
    }

    /// Per-hour harvest intervals. With demand tracking, hour `h` gets
    /// `interval * peak_weight / weight[h]`, capped at `max_interval`.
    pub fn schedule(&self, hourly_weights: &[f64], max_interval: i64) -> HarvestSchedule {
        let base = self.harvest_interval;
        let mut intervals = [base; 24];
        if self.demand_tracking {
            let peak = hourly_weights.iter().cloned().fold(0.0, f64::max);
            for (slot, &w) in intervals.iter_mut().zip(hourly_weights) {
                *slot = if w > 0.0 && peak > 0.0 {
                    ((base as f64 * peak / w).round() as i64).clamp(base, max_interval.max(base))
                } else {
                    max_interval.max(base)
                };
            }
        }
        HarvestSchedule { intervals }
    }
}

pub fn harvester_device_id(h: u32) -> String {
    format!("ATKdev{h:04}")
}

/// Harvest tick times, aligned to the start of every UTC hour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarvestSchedule {
    pub intervals: [i64; 24],
}

impl HarvestSchedule {
    pub fn interval_at(&self, t: i64) -> i64 {
        self.intervals[t.rem_euclid(86_400) as usize / 3600]
    }

    /// First tick at or after `t`.
    pub fn next_tick(&self, t: i64) -> i64 {
        let hour_start = t - t.rem_euclid(3600);
        let dt = self.interval_at(t);
        let k = (t - hour_start + dt - 1) / dt;
        let candidate = hour_start + k * dt;
        if candidate < hour_start + 3600 {
            candidate
        } else {
            hour_start + 3600
        }
    }

    pub fn ticks(&self, from: i64, until_exclusive: i64) -> Vec<i64> {
        let mut out = Vec::new();
        let mut t = self.next_tick(from);
        while t < until_exclusive {
            out.push(t);
            t = self.next_tick(t + 1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub minted_at: i64,
    pub source_device: String,
    pub used: bool,
}

/// The attacker's central token database.
///
/// A token is a pure function of its mint time and source device, so the
/// ciphertext is produced when an entry is first served rather than at
/// harvest time.
#[derive(Debug, Clone, Default)]
pub struct TokenStore {
    entries: Vec<StoreEntry>,
    tokens: Vec<Option<Token>>,
    key: Option<KeyMaterial>,
    deleted: Vec<bool>,
    sources: Vec<String>,
    /// Per source, indices of unused entries; the freshest is on top.
    unused: Vec<Vec<usize>>,
    cursor: usize,
    serves: u64,
}

impl TokenStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn source_slot(&mut self, source: &str) -> usize {
        match self.sources.iter().position(|s| s == source) {
            Some(i) => i,
            None => {
                self.sources.push(source.to_string());
                self.unused.push(Vec::new());
                self.sources.len() - 1
            }
        }
    }

    /// Appends an entry; mint times must be non-decreasing.
    pub fn push(
        &mut self,
        minted_at: i64,
        source_device: &str,
        key: &KeyMaterial,
    ) -> Result<(), TokenError> {
        debug_assert!(self.entries.last().is_none_or(|e| e.minted_at <= minted_at));
        if self.key.as_ref() != Some(key) {
            if self.key.is_some() {
                return Err(TokenError::InvalidKey(
                    "store already holds tokens under another key".into(),
                ));
            }
            self.key = Some(key.clone());
        }
        let slot = match self.sources.iter().position(|s| s == source_device) {
            Some(i) => i,
            None => {
                crate::token::check_device_id(source_device).map_err(TokenError::InvalidPayload)?;
                self.source_slot(source_device)
            }
        };
        self.unused[slot].push(self.entries.len());
        self.entries.push(StoreEntry {
            minted_at,
            source_device: self.sources[slot].clone(),
            used: false,
        });
        self.tokens.push(None);
        self.deleted.push(false);
        Ok(())
    }

    fn mint(&self, idx: usize) -> Token {
        let e = &self.entries[idx];
        let key = self.key.as_ref().expect("a pushed entry implies a key");
        let p = TokenPayload::new(e.minted_at, e.source_device.as_str())
            .expect("device id checked on push");
        mint_token(&p, key).expect("validated payload always encrypts")
    }

    /// Live entries with their tokens, oldest first.
    pub fn tokens(&self) -> impl Iterator<Item = (&StoreEntry, Token)> + '_ {
        (0..self.entries.len())
            .filter(|&i| !self.deleted[i])
            .map(|i| {
                (
                    &self.entries[i],
                    self.tokens[i].clone().unwrap_or_else(|| self.mint(i)),
                )
            })
    }

    /// Entries still in the store, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries
            .iter()
            .zip(&self.deleted)
            .filter(|(_, &d)| !d)
            .map(|(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.deleted.iter().filter(|&&d| !d).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn newest_mint(&self) -> Option<i64> {
        self.entries().last().map(|e| e.minted_at)
    }

    pub fn serves(&self) -> u64 {
        self.serves
    }

    fn take(&mut self, idx: usize, delete: bool) -> Token {
        self.serves += 1;
        self.entries[idx].used = true;
        if delete {
            self.deleted[idx] = true;
        }
        if self.tokens[idx].is_none() {
            self.tokens[idx] = Some(self.mint(idx));
        }
        self.tokens[idx].clone().expect("just filled")
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), AdversaryError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["token", "minted_at", "source_device", "used"])
            .map_err(|e| AdversaryError::Io(e.into()))?;
        for (e, token) in self.tokens() {
            out.write_record([
                token.as_str(),
                &e.minted_at.to_string(),
                &e.source_device,
                &e.used.to_string(),
            ])
            .map_err(|e| AdversaryError::Io(e.into()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn dump(&self, path: &Path) -> Result<(), AdversaryError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Every harvester mints one token stamped `now`.
pub fn harvest_tick(
    store: &mut TokenStore,
    now: i64,
    spec: &AdversarySpec,
    key: &KeyMaterial,
) -> Result<(), AdversaryError> {
    for h in 0..spec.n_harvesters {
        store.push(now, &harvester_device_id(h), key)?;
    }
    Ok(())
}

/// Picks the token handed to the next counterfeit-app request at `now`.
///
/// `fresh_horizon` bounds how far back [`Strategy::RandomPool`] looks; it
/// falls back to the whole store when nothing is that recent.
pub fn serve_token(
    store: &mut TokenStore,
    spec: &AdversarySpec,
    now: i64,
    fresh_horizon: i64,
    rng: &mut impl Rng,
) -> Result<Option<Token>, AdversaryError> {
    match spec.strategy {
        Strategy::StaticUrl => Ok(None),
        Strategy::SingleToken => {
            let idx = (0..store.entries.len())
                .find(|&i| !store.deleted[i])
                .ok_or(AdversaryError::StoreEmpty)?;
            Ok(Some(store.take(idx, false)))
        }
        Strategy::RandomPool => {
            let lo = store
                .entries
                .partition_point(|e| e.minted_at < now - fresh_horizon);
            let eligible = |i: &usize| {
                !store.deleted[*i] && !(spec.delete_after_use && store.entries[*i].used)
            };
            let mut candidates: Vec<usize> = (lo..store.entries.len()).filter(eligible).collect();
            if candidates.is_empty() {
                candidates = (0..lo).filter(eligible).collect();
            }
            if candidates.is_empty() {
                return Err(AdversaryError::StoreEmpty);
            }
            let idx = candidates[rng.random_range(0..candidates.len())];
            Ok(Some(store.take(idx, spec.delete_after_use)))
        }
        Strategy::RoundRobin => {
            let n = store.sources.len();
            for step in 0..n {
                let slot = (store.cursor + step) % n;
                if let Some(idx) = store.unused[slot].pop() {
                    store.cursor = (slot + 1) % n;
                    return Ok(Some(store.take(idx, spec.delete_after_use)));
                }
            }
            Err(AdversaryError::StoreEmpty)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub minted: u64,
    pub used: u64,
    pub in_store: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub per_source: BTreeMap<String, SourceStats>,
    /// Tokens minted in each UTC hour of the day.
    pub minted_per_hour: [u64; 24],
    /// Ages of tokens still in the store at the reporting time, in buckets
    /// of `bucket_width` seconds.
    pub age_histogram: Vec<u64>,
    pub bucket_width: i64,
}

pub fn store_stats(store: &TokenStore, now: i64, bucket_width: i64) -> StoreStats {
    let bucket_width = bucket_width.max(1);
    let mut stats = StoreStats {
        bucket_width,
        ..Default::default()
    };
    for (e, &deleted) in store.entries.iter().zip(&store.deleted) {
        let s = stats.per_source.entry(e.source_device.clone()).or_default();
        s.minted += 1;
        s.used += u64::from(e.used);
        stats.minted_per_hour[e.minted_at.rem_euclid(86_400) as usize / 3600] += 1;
        if !deleted {
            s.in_store += 1;
            let bucket = ((now - e.minted_at).max(0) / bucket_width) as usize;
            if stats.age_histogram.len() <= bucket {
                stats.age_histogram.resize(bucket + 1, 0);
            }
            stats.age_histogram[bucket] += 1;
        }
    }
    stats
}
