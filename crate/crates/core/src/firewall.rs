//! Server-side request validation.
//!
//! Every request is judged in a fixed order and the first failing check
//! names the rejection:
//!
//! 1. a token is present;
//! 2. it decodes, decrypts and parses;
//! 3. the device is not cooling down;
//! 4. a non-resubmit token has not been accepted before;
//! 5. the token (or, for resubmits, the device's session) is fresh;
//! 6. the device is not firing bursts of requests (optional);
//! 7. the device is under its daily budget.
//!
//! Checks 3, 4, 6 and 7 key on the device id inside the token and only run in
//! [`Mode::TimestampDevice`]. [`Mode::TimestampOnly`] is the weaker scheme that
//! checks token age alone, and it is kept so its bypass can be demonstrated.
//!
//! Only accepted requests consume the daily budget, so a device that sends
//! `n` well-formed requests in a day gets exactly `min(n, R)` of them through.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::token::{open_token, KeyMaterial, Token, TokenError, TokenPayload};

pub const SECONDS_PER_DAY: i64 = 86_400;
const SNAPSHOT_FORMAT: &str = "spare-ledger";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Token age is the only criterion.
    TimestampOnly,
    /// Token age plus per-device replay, burst and budget tracking.
    TimestampDevice,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::TimestampOnly => "timestamp_only",
            Mode::TimestampDevice => "timestamp_device",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "timestamp_only" => Ok(Mode::TimestampOnly),
            "timestamp_device" => Ok(Mode::TimestampDevice),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

/// How long a device stays blocked after tripping a limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cooldown {
    /// Blocked until the next UTC midnight, when the daily counter resets.
    CalendarDayReset,
    /// Blocked for a fixed number of seconds; the counter resets when it lifts.
    FixedDuration(i64),
}

/// Tunable thresholds; everything in [`FirewallConfig`] except the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirewallPolicy {
    pub mode: Mode,
    /// Maximum token age `T` in seconds.
    pub time_window: i64,
    /// Accepted requests per device per UTC day `R`.
    pub daily_threshold: u32,
    pub simultaneity_enabled: bool,
    /// Burst window `W` in seconds.
    pub simultaneity_window: i64,
    /// Arrivals within `W` (including the current one) that count as a burst.
    pub simultaneity_count: u32,
    pub cooldown: Cooldown,
    /// Tolerated amount by which a token may be ahead of the server clock.
    pub clock_skew: i64,
}

impl Default for FirewallPolicy {
    fn default() -> Self {
        Self {
            mode: Mode::TimestampDevice,
            time_window: 3600,
            daily_threshold: 30,
            simultaneity_enabled: false,
            simultaneity_window: 5,
            simultaneity_count: 3,
            cooldown: Cooldown::CalendarDayReset,
            clock_skew: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid firewall config: {0}")]
pub struct ConfigError(pub String);

impl FirewallPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.to_string()));
        if self.time_window <= 0 {
            return err("time_window must be > 0");
        }
        if self.daily_threshold == 0 {
            return err("daily_threshold must be >= 1");
        }
        if self.simultaneity_enabled
            && (self.simultaneity_window <= 0 || self.simultaneity_count < 2)
        {
            return err("simultaneity needs window > 0 and count >= 2");
        }
        if let Cooldown::FixedDuration(p) = self.cooldown {
            if p <= 0 {
                return err("fixed cooldown must be > 0 seconds");
            }
        }
        if self.clock_skew < 0 {
            return err("clock_skew must be >= 0");
        }
        Ok(())
    }

    /// Minimum age at which staleness alone rejects a seen token. Entries are
    /// also kept until their UTC day is over, so replays within a day always
    /// report `DuplicateToken`; at most `daily_threshold` accepts per device-day
    /// bound the cost.
    pub fn seen_retention(&self) -> i64 {
        self.time_window + self.clock_skew
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirewallConfig {
    pub policy: FirewallPolicy,
    pub key: KeyMaterial,
}

impl FirewallConfig {
    pub fn new(policy: FirewallPolicy, key: KeyMaterial) -> Result<Self, ConfigError> {
        policy.validate()?;
        Ok(Self { policy, key })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

/// Why a request was judged the way it was. The identifiers are part of the
/// HTTP API and of the report formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reason {
    Ok,
    MissingToken,
    TokenUndecodable,
    TokenUndecryptable,
    MalformedPayload,
    StaleToken,
    FutureToken,
    DuplicateToken,
    DeviceBlocked,
    SimultaneousAbuse,
    ThresholdExceeded,
}

impl Reason {
    pub const ALL: [Reason; 11] = [
        Reason::Ok,
        Reason::MissingToken,
        Reason::TokenUndecodable,
        Reason::TokenUndecryptable,
        Reason::MalformedPayload,
        Reason::StaleToken,
        Reason::FutureToken,
        Reason::DuplicateToken,
        Reason::DeviceBlocked,
        Reason::SimultaneousAbuse,
        Reason::ThresholdExceeded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Reason::Ok => "Ok",
            Reason::MissingToken => "MissingToken",
            Reason::TokenUndecodable => "TokenUndecodable",
            Reason::TokenUndecryptable => "TokenUndecryptable",
            Reason::MalformedPayload => "MalformedPayload",
            Reason::StaleToken => "StaleToken",
            Reason::FutureToken => "FutureToken",
            Reason::DuplicateToken => "DuplicateToken",
            Reason::DeviceBlocked => "DeviceBlocked",
            Reason::SimultaneousAbuse => "SimultaneousAbuse",
            Reason::ThresholdExceeded => "ThresholdExceeded",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reason::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown reason {s:?}"))
    }
}

impl From<&TokenError> for Reason {
    fn from(e: &TokenError) -> Self {
        match e {
            TokenError::TokenUndecodable => Reason::TokenUndecodable,
            TokenError::TokenUndecryptable => Reason::TokenUndecryptable,
            TokenError::InvalidPayload(_)
            | TokenError::MalformedPayload(_)
            | TokenError::InvalidKey(_) => Reason::MalformedPayload,
        }
    }
}

/// Outcome of one request. Accept iff the reason is [`Reason::Ok`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "VerdictRepr", try_from = "VerdictRepr")]
pub struct Verdict {
    reason: Reason,
}

impl Verdict {
    pub const ACCEPT: Verdict = Verdict { reason: Reason::Ok };

    pub fn reject(reason: Reason) -> Self {
        debug_assert_ne!(reason, Reason::Ok);
        Verdict { reason }
    }

    pub fn from_reason(reason: Reason) -> Self {
        Verdict { reason }
    }

    pub fn decision(&self) -> Decision {
        if self.reason == Reason::Ok {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }

    pub fn reason(&self) -> Reason {
        self.reason
    }

    pub fn is_accept(&self) -> bool {
        self.reason == Reason::Ok
    }
}

#[derive(Serialize, Deserialize)]
struct VerdictRepr {
    decision: Decision,
    reason: Reason,
}

impl From<Verdict> for VerdictRepr {
    fn from(v: Verdict) -> Self {
        VerdictRepr {
            decision: v.decision(),
            reason: v.reason,
        }
    }
}

impl TryFrom<VerdictRepr> for Verdict {
    type Error = String;

    fn try_from(r: VerdictRepr) -> Result<Self, Self::Error> {
        let v = Verdict { reason: r.reason };
        if v.decision() != r.decision {
            return Err("decision does not match reason".into());
        }
        Ok(v)
    }
}

/// Rolling per-device state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    /// UTC day (days since the epoch) that `count_today` refers to.
    pub day_bucket: i64,
    pub count_today: u32,
    pub last_request_time: Option<i64>,
    /// Mint timestamps of accepted tokens; the device id is the map key.
    pub seen_tokens: BTreeSet<i64>,
    /// Most recent arrivals that passed identity checks, oldest first.
    pub recent_arrivals: VecDeque<i64>,
    pub blocked_until: Option<i64>,
}

impl DeviceState {
    fn is_vacant(&self) -> bool {
        self.count_today == 0
            && self.last_request_time.is_none()
            && self.seen_tokens.is_empty()
            && self.recent_arrivals.is_empty()
            && self.blocked_until.is_none()
    }

    /// Applies day roll-over, block expiry and eviction as of `now`.
    fn refresh(&mut self, now: i64, policy: &FirewallPolicy) {
        let day = now.div_euclid(SECONDS_PER_DAY);
        if day != self.day_bucket {
            self.day_bucket = day;
            self.count_today = 0;
        }
        if let Some(until) = self.blocked_until {
            if until <= now {
                self.blocked_until = None;
                if matches!(policy.cooldown, Cooldown::FixedDuration(_)) {
                    self.count_today = 0;
                }
            }
        }
        let cutoff = (now - policy.seen_retention()).min(day * SECONDS_PER_DAY);
        if self.seen_tokens.first().is_some_and(|&t| t < cutoff) {
            self.seen_tokens = self.seen_tokens.split_off(&cutoff);
        }
        let window = if policy.simultaneity_enabled {
            policy.simultaneity_window
        } else {
            0
        };
        while self
            .recent_arrivals
            .front()
            .is_some_and(|&a| a <= now - window)
        {
            self.recent_arrivals.pop_front();
        }
    }

    fn record_arrival(&mut self, now: i64, policy: &FirewallPolicy) {
        if !policy.simultaneity_enabled {
            return;
        }
        self.recent_arrivals.push_back(now);
        let cap = policy.simultaneity_count.max(1) as usize;
        while self.recent_arrivals.len() > cap {
            self.recent_arrivals.pop_front();
        }
    }

    fn block(&mut self, now: i64, policy: &FirewallPolicy) {
        let until = match policy.cooldown {
            Cooldown::CalendarDayReset => (now.div_euclid(SECONDS_PER_DAY) + 1) * SECONDS_PER_DAY,
            Cooldown::FixedDuration(p) => now + p,
        };
        self.blocked_until = Some(until);
    }

    /// Checks 3..7 for an already opened token.
    fn judge(
        &mut self,
        payload: &TokenPayload,
        resubmit: bool,
        now: i64,
        policy: &FirewallPolicy,
    ) -> Reason {
        self.refresh(now, policy);

        if self.blocked_until.is_some_and(|until| until > now) {
            return Reason::DeviceBlocked;
        }
        if !resubmit && self.seen_tokens.contains(&payload.timestamp_utc) {
            return Reason::DuplicateToken;
        }
        if let Err(reason) = freshness(payload, resubmit, self.last_request_time, now, policy) {
            return reason;
        }
        if policy.simultaneity_enabled {
            let window_start = now - policy.simultaneity_window;
            let in_window = self
                .recent_arrivals
                .iter()
                .filter(|&&a| a > window_start)
                .count()
                + 1;
            if in_window >= policy.simultaneity_count as usize {
                self.record_arrival(now, policy);
                self.block(now, policy);
                return Reason::SimultaneousAbuse;
            }
        }
        if self.count_today >= policy.daily_threshold {
            self.record_arrival(now, policy);
            self.block(now, policy);
            return Reason::ThresholdExceeded;
        }

        self.count_today += 1;
        if !resubmit {
            self.seen_tokens.insert(payload.timestamp_utc);
        }
        self.last_request_time = Some(now);
        self.record_arrival(now, policy);
        Reason::Ok
    }
}

fn freshness(
    payload: &TokenPayload,
    resubmit: bool,
    last_request_time: Option<i64>,
    now: i64,
    policy: &FirewallPolicy,
) -> Result<(), Reason> {
    if resubmit {
        return match last_request_time {
            Some(last) if now - last <= policy.time_window => Ok(()),
            _ => Err(Reason::StaleToken),
        };
    }
    let age = now - payload.timestamp_utc;
    if age < -policy.clock_skew {
        Err(Reason::FutureToken)
    } else if age > policy.time_window {
        Err(Reason::StaleToken)
    } else {
        Ok(())
    }
}

/// Steps 1 and 2: presence and opening. Shared by every ledger flavour.
fn open_request(token: Option<&Token>, key: &KeyMaterial) -> Result<TokenPayload, Reason> {
    let token = token.ok_or(Reason::MissingToken)?;
    open_token(token, key).map_err(|e| Reason::from(&e))
}

/// Single-owner device ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLedger {
    devices: BTreeMap<String, DeviceState>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corrupt ledger snapshot: {0}")]
pub struct CorruptSnapshot(pub String);

#[derive(Serialize, Deserialize)]
struct SnapshotFile<'a> {
    format: std::borrow::Cow<'a, str>,
    version: u32,
    devices: std::borrow::Cow<'a, BTreeMap<String, DeviceState>>,
}

impl DeviceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, device_id: &str) -> Option<&DeviceState> {
        self.devices.get(device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = (&str, &DeviceState)> {
        self.devices.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// Rolls every device forward to `now` and forgets devices with no state left.
    pub fn advance_time(&mut self, now: i64, policy: &FirewallPolicy) {
        self.devices.retain(|_, state| {
            state.refresh(now, policy);
            !state.is_vacant()
        });
    }

    pub fn reset_device(&mut self, device_id: &str) {
        self.devices.remove(device_id);
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            devices: std::borrow::Cow::Borrowed(&self.devices),
        };
        serde_json::to_vec_pretty(&file).expect("ledger serialization is infallible")
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, CorruptSnapshot> {
        let file: SnapshotFile<'static> =
            serde_json::from_slice(bytes).map_err(|e| CorruptSnapshot(e.to_string()))?;
        if file.format != SNAPSHOT_FORMAT {
            return Err(CorruptSnapshot(format!(
                "unexpected format {:?}",
                file.format
            )));
        }
        if file.version != SNAPSHOT_VERSION {
            return Err(CorruptSnapshot(format!(
                "unsupported version {}",
                file.version
            )));
        }
        Ok(Self {
            devices: file.devices.into_owned(),
        })
    }
}

/// Judges one request against `ledger`, mutating it.
pub fn validate(
    token: Option<&Token>,
    resubmit: bool,
    now: i64,
    ledger: &mut DeviceLedger,
    cfg: &FirewallConfig,
) -> Verdict {
    let payload = match open_request(token, &cfg.key) {
        Ok(p) => p,
        Err(reason) => return Verdict::reject(reason),
    };
    let policy = &cfg.policy;
    if policy.mode == Mode::TimestampOnly {
        return match freshness(&payload, false, None, now, policy) {
            Ok(()) => Verdict::ACCEPT,
            Err(reason) => Verdict::reject(reason),
        };
    }
    let reason = match ledger.devices.get_mut(&payload.device_id) {
        Some(state) => state.judge(&payload, resubmit, now, policy),
        None => {
            let mut state = DeviceState::default();
            let reason = state.judge(&payload, resubmit, now, policy);
            if !state.is_vacant() {
                ledger.devices.insert(payload.device_id.clone(), state);
            }
            reason
        }
    };
    Verdict::from_reason(reason)
}

/// A config plus its ledger, for single-threaded drivers.
#[derive(Debug, Clone)]
pub struct Firewall {
    config: FirewallConfig,
    ledger: DeviceLedger,
}

impl Firewall {
    pub fn new(config: FirewallConfig) -> Self {
        Self::with_ledger(config, DeviceLedger::new())
    }

    pub fn with_ledger(config: FirewallConfig, ledger: DeviceLedger) -> Self {
        Self { config, ledger }
    }

    pub fn config(&self) -> &FirewallConfig {
        &self.config
    }

    pub fn ledger(&self) -> &DeviceLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> DeviceLedger {
        self.ledger
    }

    pub fn validate(&mut self, token: Option<&Token>, resubmit: bool, now: i64) -> Verdict {
        validate(token, resubmit, now, &mut self.ledger, &self.config)
    }

    pub fn advance_time(&mut self, now: i64) {
        self.ledger.advance_time(now, &self.config.policy);
    }

    pub fn reset_device(&mut self, device_id: &str) {
        self.ledger.reset_device(device_id);
    }
}

/// Ledger shareable across request handlers.
///
/// Each device's check-then-update runs under that device's map-shard lock,
/// so verdicts for one device are linearizable while different devices
/// proceed in parallel.
#[derive(Debug)]
pub struct SharedFirewall {
    config: FirewallConfig,
    devices: DashMap<String, DeviceState>,
}

impl SharedFirewall {
    pub fn new(config: FirewallConfig) -> Self {
        Self {
            config,
            devices: DashMap::new(),
        }
    }

    pub fn with_ledger(config: FirewallConfig, ledger: DeviceLedger) -> Self {
        Self {
            config,
            devices: ledger.devices.into_iter().collect(),
        }
    }

    pub fn config(&self) -> &FirewallConfig {
        &self.config
    }

    pub fn validate(&self, token: Option<&Token>, resubmit: bool, now: i64) -> Verdict {
        let payload = match open_request(token, &self.config.key) {
            Ok(p) => p,
            Err(reason) => return Verdict::reject(reason),
        };
        let policy = &self.config.policy;
        if policy.mode == Mode::TimestampOnly {
            return match freshness(&payload, false, None, now, policy) {
                Ok(()) => Verdict::ACCEPT,
                Err(reason) => Verdict::reject(reason),
            };
        }
        use dashmap::mapref::entry::Entry;
        let reason = match self.devices.entry(payload.device_id.clone()) {
            Entry::Occupied(mut o) => o.get_mut().judge(&payload, resubmit, now, policy),
            Entry::Vacant(v) => {
                let mut state = DeviceState::default();
                let reason = state.judge(&payload, resubmit, now, policy);
                if !state.is_vacant() {
                    v.insert(state);
                }
                reason
            }
        };
        Verdict::from_reason(reason)
    }

    pub fn advance_time(&self, now: i64) {
        let policy = &self.config.policy;
        self.devices.retain(|_, state| {
            state.refresh(now, policy);
            !state.is_vacant()
        });
    }

    pub fn reset_device(&self, device_id: &str) {
        self.devices.remove(device_id);
    }

    pub fn device(&self, device_id: &str) -> Option<DeviceState> {
        self.devices.get(device_id).map(|s| s.clone())
    }

    /// Point-in-time copy; each device is copied under its own lock.
    pub fn to_ledger(&self) -> DeviceLedger {
        DeviceLedger {
            devices: self
                .devices
                .iter()
                .map(|e| (e.key().clone(), e.value().clone()))
                .collect(),
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.to_ledger().snapshot()
    }
}
