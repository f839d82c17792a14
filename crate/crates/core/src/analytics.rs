//! Tables, first-error statistics, parameter sweeps and failure-rate models.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::rng::derive_seed;
use crate::sim::{run_scenario, ScenarioFile, SimError, SimulationRecord};

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Outcome counts for one configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: u64,
    pub successful: u64,
    pub failed: u64,
    pub failed_fraction: f64,
}

impl Summary {
    pub fn from_counts(total: u64, successful: u64) -> Self {
        let failed = total - successful;
        Summary {
            total,
            successful,
            failed,
            failed_fraction: if total == 0 {
                0.0
            } else {
                failed as f64 / total as f64
            },
        }
    }
}

pub fn summarize<'a>(records: impl IntoIterator<Item = &'a SimulationRecord>) -> Summary {
    let (total, successful) = records.into_iter().fold((0, 0), |(n, ok), r| {
        (n + 1, ok + u64::from(r.verdict.is_accept()))
    });
    Summary::from_counts(total, successful)
}

/// One cell of a users x devices x threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub users: u32,
    pub devices: u32,
    pub threshold: u32,
    pub total: u64,
    pub successful: u64,
    pub failed: u64,
    #[serde(default)]
    pub failed_fraction: Option<f64>,
}

impl GridRow {
    pub fn new(users: u32, devices: u32, threshold: u32, s: Summary) -> Self {
        GridRow {
            users,
            devices,
            threshold,
            total: s.total,
            successful: s.successful,
            failed: s.failed,
            failed_fraction: Some(s.failed_fraction),
        }
    }

    pub fn failed_fraction(&self) -> f64 {
        self.failed_fraction.unwrap_or(if self.total == 0 {
            0.0
        } else {
            self.failed as f64 / self.total as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstError {
    pub user_id: String,
    pub is_malicious: bool,
    pub total_requests: u32,
    pub first_error_index: Option<u32>,
}

/// Per user, the smallest request index that was rejected.
pub fn first_error_positions<'a>(
    records: impl IntoIterator<Item = &'a SimulationRecord>,
) -> Vec<FirstError> {
    let mut users: BTreeMap<&str, FirstError> = BTreeMap::new();
    for r in records {
        let e = users.entry(&r.event.user_id).or_insert_with(|| FirstError {
            user_id: r.event.user_id.clone(),
            is_malicious: r.is_malicious,
            total_requests: 0,
            first_error_index: None,
        });
        e.total_requests += 1;
        if !r.verdict.is_accept() {
            let idx = r.event.request_index;
            e.first_error_index = Some(e.first_error_index.map_or(idx, |f| f.min(idx)));
        }
    }
    users.into_values().collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Runs `base` once per grid cell. The workload seed depends on the user
/// count only, so cells that share `users` replay the same demand and
/// differences between them come from the defence and the attacker alone.
///
/// For benign-only bases the device axis is ignored and reported as 0.
/// The scenario `sweep_grid` runs for one cell.
pub fn grid_cell(base: &ScenarioFile, users: u32, devices: u32, threshold: u32) -> ScenarioFile {
    let mut file = base.clone();
    file.seed = derive_seed(base.seed, &format!("users={users}"));
    file.set_users(users);
    if file.malicious.is_some() {
        file.set_attack_devices(devices);
    }
    file.firewall.daily_threshold = threshold;
    file
}

pub fn sweep_grid(
    users: &[u32],
    devices: &[u32],
    thresholds: &[u32],
    base: &ScenarioFile,
    exec: Execution,
) -> Result<Vec<GridRow>, AnalyticsError> {
    let malicious = base.malicious.is_some();
    let device_axis: Vec<u32> = if malicious { devices.to_vec() } else { vec![0] };
    let mut cells = Vec::new();
    for &u in users {
        for &d in &device_axis {
            for &t in thresholds {
                cells.push((u, d, t));
            }
        }
    }
    exec.try_map(cells, |(u, d, t)| {
        let out = run_scenario(&grid_cell(base, u, d, t).build()?, Execution::Sequential)?;
        let s = Summary::from_counts(out.report.totals.requests, out.report.totals.accepted);
        Ok(GridRow::new(u, d, t, s))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Linear,
    Poly2,
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Model::Linear),
            "poly2" => Ok(Model::Poly2),
            _ => Err(format!("unknown model {s:?}; expected linear or poly2")),
        }
    }
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Linear => "linear",
            Model::Poly2 => "poly2",
        }
    }

    pub fn terms(self) -> &'static [&'static str] {
        match self {
            Model::Linear => &["1", "U", "D", "T"],
            Model::Poly2 => &["1", "U", "D", "T", "U^2", "U*D", "U*T", "D^2", "D*T", "T^2"],
        }
    }

    pub fn features(self, u: f64, d: f64, t: f64) -> Vec<f64> {
        match self {
            Model::Linear => vec![1.0, u, d, t],
            Model::Poly2 => vec![1.0, u, d, t, u * u, u * d, u * t, d * d, d * t, t * t],
        }
    }
}

/// Least-squares failure-rate model over (users, devices, threshold).
/// The target is the failed fraction in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub model: Model,
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

impl RegressionFit {
    pub fn predict(&self, users: f64, devices: f64, threshold: f64) -> f64 {
        self.model
            .features(users, devices, threshold)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn equation(&self) -> String {
        let mut s = format!("failed = {:.4}", self.coefficients[0]);
        for (term, b) in self.model.terms().iter().zip(&self.coefficients).skip(1) {
            let sign = if *b < 0.0 { '-' } else { '+' };
            s.push_str(&format!(" {sign} {:.4e}*{term}", b.abs()));
        }
        s
    }
}

pub fn fit_linear(rows: &[GridRow]) -> Result<RegressionFit, AnalyticsError> {
    fit(rows, Model::Linear)
}

pub fn fit_poly2(rows: &[GridRow]) -> Result<RegressionFit, AnalyticsError> {
    fit(rows, Model::Poly2)
}

pub fn design_matrix(rows: &[GridRow], model: Model) -> DMatrix<f64> {
    let p = model.terms().len();
    DMatrix::from_fn(rows.len(), p, |i, j| {
        let r = &rows[i];
        model.features(r.users as f64, r.devices as f64, r.threshold as f64)[j]
    })
}

pub fn fit(rows: &[GridRow], model: Model) -> Result<RegressionFit, AnalyticsError> {
    let x = design_matrix(rows, model);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(GridRow::failed_fraction));
    let coefficients = least_squares(&x, &y)?;
    let r_squared = r_squared(&x, &y, &coefficients);
    Ok(RegressionFit {
        model,
        coefficients: coefficients.iter().copied().collect(),
        r_squared,
    })
}

/// Minimises `|X b - y|` through a Householder QR of the column-scaled
/// design, which keeps squared terms and the intercept on comparable scales.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, AnalyticsError> {
    let (n, p) = x.shape();
    if n < p + 1 {
        return Err(AnalyticsError::TooFewRows {
            needed: p + 1,
            got: n,
        });
    }
    let scales: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    if scales.contains(&0.0) {
        return Err(AnalyticsError::SingularDesign);
    }
    let mut scaled = x.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    let tol = diag_max * (n.max(p) as f64) * f64::EPSILON * 1e3;
    if r.diagonal().iter().any(|d| d.abs() <= tol) {
        return Err(AnalyticsError::SingularDesign);
    }
    let qty = qr.q().transpose() * y;
    let beta_scaled = r
        .solve_upper_triangular(&qty)
        .ok_or(AnalyticsError::SingularDesign)?;
    Ok(DVector::from_iterator(
        p,
        beta_scaled.iter().zip(&scales).map(|(b, s)| b / s),
    ))
}

/// `1 - SS_res / SS_tot`; a constant target that is fitted exactly scores 1.
pub fn r_squared(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let resid = y - x * beta;
    let ss_res = resid.norm_squared();
    let mean = y.mean();
    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let scale = y.norm_squared().max(f64::MIN_POSITIVE);
    let negligible = scale * 1e-24;
    if ss_tot <= negligible {
        return if ss_res <= negligible { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Expected failed fraction for benign users with `n ~ U{req_min..=req_max}`
/// requests each and `min(n, threshold)` of them accepted.
pub fn analytic_benign_failed_fraction(threshold: u32, req_min: u32, req_max: u32) -> f64 {
    assert!(req_min <= req_max, "req_min must not exceed req_max");
    let (excess, total) = (req_min..=req_max).fold((0u64, 0u64), |(ex, tot), n| {
        (
            ex + u64::from(n.saturating_sub(threshold)),
            tot + u64::from(n),
        )
    });
    if total == 0 {
        0.0
    } else {
        excess as f64 / total as f64
    }
}

/// Failed fraction when `users * mean_req` requests meet a ceiling of
/// `devices * threshold` acceptances.
pub fn analytic_malicious_failed_fraction(
    users: u32,
    devices: u32,
    threshold: u32,
    mean_req: f64,
) -> f64 {
    let ceiling = f64::from(devices) * f64::from(threshold);
    let demand = f64::from(users) * mean_req;
    (1.0 - ceiling / demand).max(0.0)
}

pub fn write_grid_csv(rows: &[GridRow], w: impl Write) -> Result<(), AnalyticsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "users",
        "devices",
        "threshold",
        "total",
        "successful",
        "failed",
        "failed_fraction",
    ])?;
    for r in rows {
        out.write_record([
            r.users.to_string(),
            r.devices.to_string(),
            r.threshold.to_string(),
            r.total.to_string(),
            r.successful.to_string(),
            r.failed.to_string(),
            r.failed_fraction().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads grid rows; `failed_fraction` is optional, so the reference table
/// fixture loads directly.
pub fn read_grid_csv(r: impl Read) -> Result<Vec<GridRow>, AnalyticsError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(AnalyticsError::from))
        .collect()
}

pub fn read_grid_file(path: &Path) -> Result<Vec<GridRow>, AnalyticsError> {
    read_grid_csv(std::fs::File::open(path)?)
}

pub fn write_grid_file(rows: &[GridRow], path: &Path) -> Result<(), AnalyticsError> {
    write_grid_csv(rows, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Long-form heatmap data: rows with `threshold == t`, as `users,devices,threshold,failed_fraction`.
pub fn write_heatmap_slice(
    rows: &[GridRow],
    threshold: u32,
    w: impl Write,
) -> Result<usize, AnalyticsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["users", "devices", "threshold", "failed_fraction"])?;
    let mut n = 0;
    for r in rows.iter().filter(|r| r.threshold == threshold) {
        out.write_record([
            r.users.to_string(),
            r.devices.to_string(),
            r.threshold.to_string(),
            r.failed_fraction().to_string(),
        ])?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn write_first_errors_csv(rows: &[FirstError], w: impl Write) -> Result<(), AnalyticsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "user_id",
        "is_malicious",
        "total_requests",
        "first_error_index",
    ])?;
    for r in rows {
        out.write_record([
            r.user_id.clone(),
            r.is_malicious.to_string(),
            r.total_requests.to_string(),
            r.first_error_index
                .map(|i| i.to_string())
                .unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_first_errors_csv(r: impl Read) -> Result<Vec<FirstError>, AnalyticsError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(AnalyticsError::from))
        .collect()
}

/// The reference 27-cell malicious grid.
pub fn table3_fixture() -> Vec<GridRow> {
    read_grid_csv(crate::fixtures::TABLE3_CSV.as_bytes()).expect("shipped fixture parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firewall::Verdict;
    use crate::workload::RequestEvent;

    fn rec(user: &str, idx: u32, ok: bool, malicious: bool) -> SimulationRecord {
        SimulationRecord {
            event: RequestEvent {
                user_id: user.into(),
                device_id: "d".into(),
                send_time: i64::from(idx),
                request_index: idx,
                token: None,
                resubmit: false,
            },
            presented_device: None,
            verdict: if ok {
                Verdict::ACCEPT
            } else {
                Verdict::reject(crate::firewall::Reason::ThresholdExceeded)
            },
            is_malicious: malicious,
        }
    }

    #[test]
    fn summarize_counts() {
        let mut recs: Vec<_> = (1..=3558).map(|i| rec("u", i, i > 616, false)).collect();
        let s = summarize(&recs);
        assert_eq!((s.total, s.successful, s.failed), (3558, 2942, 616));
        assert!((s.failed_fraction * 100.0 - 17.31).abs() < 0.005);
        recs.clear();
        assert_eq!(summarize(&recs), Summary::default());
    }

    #[test]
    fn first_errors() {
        let mut recs: Vec<_> = (1..=40).map(|i| rec("a", i, i <= 30, false)).collect();
        recs.extend((1..=28).map(|i| rec("b", i, true, false)));
        let fe = first_error_positions(&recs);
        assert_eq!(fe[0].first_error_index, Some(31));
        assert_eq!(fe[0].total_requests, 40);
        assert_eq!(fe[1].first_error_index, None);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    // Enumeration: n = 25..=45 sums to 735; excess over 30 is 1+..+15 = 120,
    // over 35 is 1+..+10 = 55, over 40 is 1+..+5 = 15.
    #[test]
    fn benign_closed_form() {
        assert!((analytic_benign_failed_fraction(30, 25, 45) - 120.0 / 735.0).abs() < 1e-15);
        assert!((analytic_benign_failed_fraction(35, 25, 45) - 55.0 / 735.0).abs() < 1e-15);
        assert!((analytic_benign_failed_fraction(40, 25, 45) - 15.0 / 735.0).abs() < 1e-15);
        assert_eq!(analytic_benign_failed_fraction(45, 25, 45), 0.0);
        let mut prev = 1.0;
        for r in 1..60 {
            let f = analytic_benign_failed_fraction(r, 25, 45);
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn malicious_closed_form() {
        assert!(
            (analytic_malicious_failed_fraction(300, 10, 30, 35.0) - (1.0 - 300.0 / 10500.0)).abs()
                < 1e-15
        );
        assert!(
            (analytic_malicious_failed_fraction(100, 30, 40, 35.0) - (1.0 - 1200.0 / 3500.0)).abs()
                < 1e-15
        );
        assert_eq!(analytic_malicious_failed_fraction(10, 10, 40, 35.0), 0.0);
    }

    fn synthetic(f: impl Fn(f64, f64, f64) -> f64) -> Vec<GridRow> {
        let mut rows = Vec::new();
        for u in [100, 200, 300] {
            for d in [10, 20, 30] {
                for t in [30, 35, 40] {
                    let y = f(u as f64, d as f64, t as f64);
                    rows.push(GridRow {
                        users: u,
                        devices: d,
                        threshold: t,
                        total: 1000,
                        successful: 0,
                        failed: 0,
                        failed_fraction: Some(y),
                    });
                }
            }
        }
        rows
    }

    #[test]
    fn exact_linear_recovery() {
        let fit = fit_linear(&synthetic(|u, _, _| 2.0 * u)).unwrap();
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-9);
        assert!(fit.coefficients[0].abs() < 1e-7);
        assert!(fit.coefficients[2].abs() < 1e-9 && fit.coefficients[3].abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_target_convention() {
        let fit = fit_linear(&synthetic(|_, _, _| 0.25)).unwrap();
        assert!((fit.coefficients[0] - 0.25).abs() < 1e-12);
        assert!(fit.coefficients[1..].iter().all(|b| b.abs() < 1e-12));
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn singular_and_short_designs() {
        let mut rows = synthetic(|u, _, _| u);
        for r in &mut rows {
            r.devices = 10;
            r.threshold = 30;
        }
        // D and T columns are multiples of the intercept.
        assert!(matches!(
            fit_linear(&rows),
            Err(AnalyticsError::SingularDesign)
        ));
        let rows = synthetic(|u, _, _| u);
        assert!(matches!(
            fit_linear(&rows[..4]),
            Err(AnalyticsError::TooFewRows { .. })
        ));
    }

    // Reference values from an independent numpy lstsq over the same table.
    #[test]
    fn table3_fixture_fits() {
        let rows = table3_fixture();
        assert_eq!(rows.len(), 27);
        let lin = fit_linear(&rows).unwrap();
        let expect = [
            0.990568412,
            6.39855646e-04,
            -5.98383969e-03,
            -3.43037832e-03,
        ];
        for (b, e) in lin.coefficients.iter().zip(expect) {
            assert!((b - e).abs() <= 1e-8 * e.abs().max(1e-3), "{b} vs {e}");
        }
        assert!((lin.r_squared - 0.8752824376018161).abs() < 1e-10);
        let poly = fit_poly2(&rows).unwrap();
        assert!((poly.coefficients[0] - 1.02768532).abs() < 1e-7);
        assert!((poly.r_squared - 0.9923759736013857).abs() < 1e-10);
    }

    #[test]
    fn grid_csv_round_trip() {
        let rows = table3_fixture();
        let mut buf = Vec::new();
        write_grid_csv(&rows, &mut buf).unwrap();
        let back = read_grid_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(
                (
                    a.users,
                    a.devices,
                    a.threshold,
                    a.total,
                    a.successful,
                    a.failed
                ),
                (
                    b.users,
                    b.devices,
                    b.threshold,
                    b.total,
                    b.successful,
                    b.failed
                )
            );
            assert_eq!(a.failed_fraction(), b.failed_fraction());
        }
    }

    #[test]
    fn heatmap_slice_size() {
        let rows = table3_fixture();
        let mut buf = Vec::new();
        assert_eq!(write_heatmap_slice(&rows, 30, &mut buf).unwrap(), 9);
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10);
    }

    #[test]
    fn first_error_csv_schema() {
        let fe = vec![
            FirstError {
                user_id: "a".into(),
                is_malicious: true,
                total_requests: 3,
                first_error_index: Some(2),
            },
            FirstError {
                user_id: "b".into(),
                is_malicious: false,
                total_requests: 5,
                first_error_index: None,
            },
        ];
        let mut buf = Vec::new();
        write_first_errors_csv(&fe, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("user_id,is_malicious,total_requests,first_error_index\n"));
        assert_eq!(read_first_errors_csv(&buf[..]).unwrap(), fe);
    }
}
