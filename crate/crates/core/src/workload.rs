//! Synthetic one-day request workloads.
//!
//! Each user draws a request count uniformly from `[req_min, req_max]`, then
//! that many send times: an hour from the 24-bin usage profile, a second
//! uniformly inside it. Draws that land closer than `min_gap_per_device` to an
//! earlier draw for the same user are thrown away and redrawn.
//!
//! Benign users each own one device and mint their own tokens. Malicious
//! users only produce demand; the attacker supplies their tokens at serve
//! time.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::rng::substream;
use crate::token::{mint_token, KeyMaterial, Token, TokenError, TokenPayload};

/// Relative hourly activity: quiet overnight, a 9-11 AM peak and an evening decline.
pub const DEFAULT_HOURLY_PROFILE: [f64; 24] = [
    1.0, 0.7, 0.5, 0.4, 0.5, 1.0, 2.5, 4.5, 6.5, 8.0, 8.0, 7.5, 6.5, 6.0, 5.5, 5.5, 6.0, 6.5, 6.0,
    5.0, 4.0, 3.0, 2.0, 1.4,
];

pub fn default_hourly_weights() -> Vec<f64> {
    normalize(&DEFAULT_HOURLY_PROFILE)
}

pub fn normalize(weights: &[f64]) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    weights.iter().map(|w| w / sum).collect()
}

pub const DATASET_HEADER: [&str; 6] = [
    "user_id",
    "device_id",
    "send_time",
    "request_index",
    "token",
    "resubmit",
];

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible workload: {0}")]
    InfeasibleSpec(String),
    #[error("token minting failed: {0}")]
    Token(#[from] TokenError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Benign,
    Malicious { n_devices: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_users: u32,
    pub req_min: u32,
    pub req_max: u32,
    pub hourly_weights: Vec<f64>,
    pub day: NaiveDate,
    pub scenario: Population,
    #[serde(with = "seed_serde")]
    pub seed: u64,
    pub min_gap_per_device: i64,
}

impl WorkloadSpec {
    pub fn benign(n_users: u32, seed: u64) -> Self {
        Self {
            n_users,
            req_min: 25,
            req_max: 45,
            hourly_weights: default_hourly_weights(),
            day: default_day(),
            scenario: Population::Benign,
            seed,
            min_gap_per_device: 10,
        }
    }

    pub fn malicious(n_users: u32, n_devices: u32, seed: u64) -> Self {
        Self {
            scenario: Population::Malicious { n_devices },
            ..Self::benign(n_users, seed)
        }
    }

    pub fn day_start(&self) -> i64 {
        self.day
            .and_hms_opt(0, 0, 0)
            .expect("midnight exists")
            .and_utc()
            .timestamp()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.req_min == 0 || self.req_min > self.req_max {
            return bad(format!(
                "need 1 <= req_min <= req_max, got {}..{}",
                self.req_min, self.req_max
            ));
        }
        if self.hourly_weights.len() != 24 {
            return bad(format!(
                "hourly_weights needs 24 entries, got {}",
                self.hourly_weights.len()
            ));
        }
        if self
            .hourly_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return bad("hourly_weights must be finite and non-negative".into());
        }
        let sum: f64 = self.hourly_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("hourly_weights sum to {sum}, not 1"));
        }
        if self.min_gap_per_device < 0 {
            return bad("min_gap_per_device must be >= 0".into());
        }
        if let Population::Malicious { n_devices } = self.scenario {
            if n_devices == 0 || n_devices > self.n_users {
                return bad(format!(
                    "malicious n_devices must be in 1..={}, got {n_devices}",
                    self.n_users
                ));
            }
        }
        Ok(())
    }
}

pub fn default_day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 10).expect("valid date")
}

/// One client request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub user_id: String,
    pub device_id: String,
    pub send_time: i64,
    /// 1-based position in the user's own day, by send time.
    pub request_index: u32,
    pub token: Option<Token>,
    pub resubmit: bool,
}

impl RequestEvent {
    /// Global merge order: send time, then user, then per-user index.
    pub fn order_key(&self) -> (i64, &str, u32) {
        (self.send_time, &self.user_id, self.request_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: WorkloadSpec,
    pub events: Vec<RequestEvent>,
}

impl Dataset {
    fn from_users(spec: WorkloadSpec, per_user: Vec<Vec<RequestEvent>>) -> Self {
        let mut events: Vec<RequestEvent> = per_user.into_iter().flatten().collect();
        sort_events(&mut events);
        Dataset { spec, events }
    }

    pub fn distinct_devices(&self) -> BTreeSet<&str> {
        self.events.iter().map(|e| e.device_id.as_str()).collect()
    }
}

pub fn sort_events(events: &mut [RequestEvent]) {
    events.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
}

pub fn benign_user_id(i: u32) -> String {
    format!("user{i:04}")
}

pub fn benign_device_id(i: u32) -> String {
    format!("PWAdev{i:04}")
}

pub fn malicious_user_id(i: u32) -> String {
    format!("muser{i:04}")
}

pub fn pool_device_id(j: u32) -> String {
    format!("POOLdev{j:04}")
}

/// Draws `n` sorted send times inside `spec.day`.
pub fn sample_request_times(
    n: usize,
    spec: &WorkloadSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i64>, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::InvalidSpec("n must be >= 1".into()));
    }
    let open_hours = spec.hourly_weights.iter().filter(|&&w| w > 0.0).count() as i64;
    let gap = spec.min_gap_per_device.max(1);
    if open_hours == 0 || (n as i64).saturating_mul(gap) > open_hours * 3600 {
        return Err(WorkloadError::InfeasibleSpec(format!(
            "{n} requests with gap {gap}s do not fit in {open_hours} active hours"
        )));
    }
    let hours = WeightedIndex::new(&spec.hourly_weights)
        .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
    let day_start = spec.day_start();
    let mut chosen = BTreeSet::new();
    let max_attempts = 10_000 + 1_000 * n;
    let mut attempts = 0;
    while chosen.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(WorkloadError::InfeasibleSpec(format!(
                "could not place {n} requests {gap}s apart after {max_attempts} draws"
            )));
        }
        let hour = hours.sample(rng) as i64;
        let t = day_start + hour * 3600 + rng.random_range(0..3600);
        let clear_below = chosen.range(..=t).next_back().is_none_or(|&p| t - p >= gap);
        let clear_above = chosen.range(t..).next().is_none_or(|&q| q - t >= gap);
        if clear_below && clear_above {
            chosen.insert(t);
        }
    }
    Ok(chosen.into_iter().collect())
}

fn user_times(spec: &WorkloadSpec, user_id: &str) -> Result<Vec<i64>, WorkloadError> {
    let mut rng = substream(spec.seed, user_id);
    let count = rng.random_range(spec.req_min..=spec.req_max) as usize;
    sample_request_times(count, spec, &mut rng)
}

/// One device per user, tokens minted at send time.
pub fn gen_benign(
    spec: &WorkloadSpec,
    key: &KeyMaterial,
    exec: Execution,
) -> Result<Dataset, WorkloadError> {
    spec.validate()?;
    if spec.scenario != Population::Benign {
        return Err(WorkloadError::InvalidSpec(
            "gen_benign needs a benign spec".into(),
        ));
    }
    let per_user = exec.try_map((0..spec.n_users).collect(), |i| {
        let user_id = benign_user_id(i);
        let device_id = benign_device_id(i);
        user_times(spec, &user_id)?
            .into_iter()
            .enumerate()
            .map(|(k, send_time)| {
                let token = mint_token(&TokenPayload::new(send_time, device_id.as_str())?, key)?;
                Ok(RequestEvent {
                    user_id: user_id.clone(),
                    device_id: device_id.clone(),
                    send_time,
                    request_index: k as u32 + 1,
                    token: Some(token),
                    resubmit: false,
                })
            })
            .collect::<Result<Vec<_>, WorkloadError>>()
    })?;
    Ok(Dataset::from_users(spec.clone(), per_user))
}

/// Malicious demand: send times only, users mapped cyclically onto a pool of
/// `n_devices` device ids.
pub fn gen_malicious_demand(
    spec: &WorkloadSpec,
    exec: Execution,
) -> Result<Dataset, WorkloadError> {
    spec.validate()?;
    let Population::Malicious { n_devices } = spec.scenario else {
        return Err(WorkloadError::InvalidSpec(
            "gen_malicious_demand needs a malicious spec".into(),
        ));
    };
    let per_user = exec.try_map((0..spec.n_users).collect(), |i| {
        let user_id = malicious_user_id(i);
        let device_id = pool_device_id(i % n_devices);
        Ok::<_, WorkloadError>(
            user_times(spec, &user_id)?
                .into_iter()
                .enumerate()
                .map(|(k, send_time)| RequestEvent {
                    user_id: user_id.clone(),
                    device_id: device_id.clone(),
                    send_time,
                    request_index: k as u32 + 1,
                    token: None,
                    resubmit: false,
                })
                .collect(),
        )
    })?;
    Ok(Dataset::from_users(spec.clone(), per_user))
}

/// Path of the spec sidecar written next to a dataset CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Row {
    user_id: String,
    device_id: String,
    send_time: i64,
    request_index: u32,
    token: String,
    resubmit: bool,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    workload: WorkloadSpec,
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), WorkloadError> {
    let io = |source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for e in &d.events {
        w.serialize(Row {
            user_id: e.user_id.clone(),
            device_id: e.device_id.clone(),
            send_time: e.send_time,
            request_index: e.request_index,
            token: e.token.as_ref().map(|t| t.to_string()).unwrap_or_default(),
            resubmit: e.resubmit,
        })
        .map_err(|e| io(e.into()))?;
    }
    if d.events.is_empty() {
        w.write_record(DATASET_HEADER).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)?;

    let meta = sidecar_path(path);
    let text = toml::to_string(&Sidecar {
        workload: d.spec.clone(),
    })
    .map_err(|e| WorkloadError::Schema {
        path: meta.clone(),
        message: e.to_string(),
    })?;
    let mut f = File::create(&meta).map_err(|source| WorkloadError::Io {
        path: meta.clone(),
        source,
    })?;
    f.write_all(text.as_bytes())
        .map_err(|source| WorkloadError::Io { path: meta, source })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, WorkloadError> {
    let meta = sidecar_path(path);
    let text = std::fs::read_to_string(&meta).map_err(|source| WorkloadError::Io {
        path: meta.clone(),
        source,
    })?;
    let spec = toml::from_str::<Sidecar>(&text)
        .map_err(|e| WorkloadError::Schema {
            path: meta.clone(),
            message: e.to_string(),
        })?
        .workload;

    let schema = |message: String| WorkloadError::Schema {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().ne(DATASET_HEADER) {
        return Err(schema(format!(
            "expected header {:?}, found {:?}",
            DATASET_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut events = Vec::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| schema(format!("row {}: {e}", line + 1)))?;
        events.push(RequestEvent {
            user_id: row.user_id,
            device_id: row.device_id,
            send_time: row.send_time,
            request_index: row.request_index,
            token: (!row.token.is_empty()).then(|| Token::from_wire(row.token)),
            resubmit: row.resubmit,
        });
    }
    Ok(Dataset { spec, events })
}

/// Seeds are u64 but TOML integers are i64: large seeds round-trip as strings.
pub mod seed_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(i64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v).map_err(serde::de::Error::custom),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::open_token;
    use std::collections::BTreeMap;

    fn key() -> KeyMaterial {
        KeyMaterial::new([1; 16], [2; 16])
    }

    #[test]
    fn default_weights_normalized() {
        let w = default_hourly_weights();
        assert_eq!(w.len(), 24);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = w.iter().cloned().fold(0.0, f64::max);
        assert_eq!(w[9], peak);
        assert_eq!(w[10], peak);
    }

    #[test]
    fn degenerate_hour_profile() {
        let mut w = vec![0.0; 24];
        w[9] = 1.0;
        let spec = WorkloadSpec {
            hourly_weights: w,
            ..WorkloadSpec::benign(1, 1)
        };
        let mut rng = substream(3, "x");
        let times = sample_request_times(200, &spec, &mut rng).unwrap();
        let start = spec.day_start() + 9 * 3600;
        assert!(times.iter().all(|&t| (start..start + 3600).contains(&t)));
    }

    #[test]
    fn min_gap_respected() {
        let spec = WorkloadSpec::benign(1, 1);
        for seed in 0..200 {
            let mut rng = substream(seed, "gap");
            let t = sample_request_times(2, &spec, &mut rng).unwrap();
            assert!((t[1] - t[0]).abs() >= 10);
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let mut w = vec![0.0; 24];
        w[0] = 1.0;
        let spec = WorkloadSpec {
            hourly_weights: w,
            min_gap_per_device: 100,
            ..WorkloadSpec::benign(1, 1)
        };
        let mut rng = substream(0, "inf");
        assert!(matches!(
            sample_request_times(37, &spec, &mut rng),
            Err(WorkloadError::InfeasibleSpec(_))
        ));
        // Random sequential placement jams near 75% coverage of the hour.
        assert!(sample_request_times(20, &spec, &mut rng).is_ok());
    }

    #[test]
    fn spec_validation() {
        let ok = WorkloadSpec::benign(10, 0);
        assert!(ok.validate().is_ok());
        let cases = [
            WorkloadSpec {
                n_users: 0,
                ..ok.clone()
            },
            WorkloadSpec {
                req_min: 0,
                ..ok.clone()
            },
            WorkloadSpec {
                req_min: 50,
                ..ok.clone()
            },
            WorkloadSpec {
                hourly_weights: vec![1.0],
                ..ok.clone()
            },
            WorkloadSpec {
                hourly_weights: vec![1.0; 24],
                ..ok.clone()
            },
            WorkloadSpec::malicious(10, 11, 0),
            WorkloadSpec::malicious(10, 0, 0),
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn benign_one_device_per_user() {
        let spec = WorkloadSpec::benign(100, 42);
        let d = gen_benign(&spec, &key(), Execution::default()).unwrap();
        let mut owners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in &d.events {
            owners.entry(&e.device_id).or_default().insert(&e.user_id);
        }
        assert_eq!(owners.len(), 100);
        assert!(owners.values().all(|u| u.len() == 1));
        let total = d.events.len() as f64;
        // Mean 35 per user; sd of the total is about 61.
        assert!((total - 3500.0).abs() < 300.0, "{total}");
    }

    #[test]
    fn benign_tokens_bind_send_time_and_device() {
        let spec = WorkloadSpec::benign(5, 9);
        let d = gen_benign(&spec, &key(), Execution::Sequential).unwrap();
        for e in &d.events {
            let p = open_token(e.token.as_ref().unwrap(), &key()).unwrap();
            assert_eq!(p.timestamp_utc, e.send_time);
            assert_eq!(p.device_id, e.device_id);
            assert!(!e.resubmit);
        }
    }

    #[test]
    fn fixed_count_when_min_equals_max() {
        let spec = WorkloadSpec {
            req_min: 30,
            req_max: 30,
            ..WorkloadSpec::benign(20, 5)
        };
        let d = gen_benign(&spec, &key(), Execution::default()).unwrap();
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for e in &d.events {
            *counts.entry(&e.user_id).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c == 30));
    }

    #[test]
    fn malicious_round_robin_pool() {
        let spec = WorkloadSpec::malicious(100, 10, 1);
        let d = gen_malicious_demand(&spec, Execution::default()).unwrap();
        for e in &d.events {
            let i: u32 = e.user_id["muser".len()..].parse().unwrap();
            assert_eq!(e.device_id, pool_device_id(i % 10));
            assert!(e.token.is_none());
        }
        assert_eq!(d.distinct_devices().len(), 10);
        let spec = WorkloadSpec::malicious(12, 12, 1);
        let d = gen_malicious_demand(&spec, Execution::default()).unwrap();
        assert_eq!(d.distinct_devices().len(), 12);
    }

    #[test]
    fn wrong_population_rejected() {
        let b = WorkloadSpec::benign(3, 0);
        let m = WorkloadSpec::malicious(3, 1, 0);
        assert!(gen_malicious_demand(&b, Execution::Sequential).is_err());
        assert!(gen_benign(&m, &key(), Execution::Sequential).is_err());
    }

    #[test]
    fn sidecar_handles_large_seed() {
        let spec = WorkloadSpec::benign(3, u64::MAX);
        let text = toml::to_string(&Sidecar {
            workload: spec.clone(),
        })
        .unwrap();
        let back: Sidecar = toml::from_str(&text).unwrap();
        assert_eq!(back.workload, spec);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = gen_benign(&WorkloadSpec::benign(2, 1), &key(), Execution::Sequential).unwrap();
        write_dataset(&d, &path).unwrap();
        std::fs::write(
            &path,
            "user_id,device_id,send_time,request_index,token\nu,d,1,1,x\n",
        )
        .unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(WorkloadError::Schema { .. })
        ));
    }
}
