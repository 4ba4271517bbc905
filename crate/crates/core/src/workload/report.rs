use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::consistency::History;
use crate::sim::Millis;

/// Column order of `phases.csv`. Frozen: tools downstream index by position.
pub const PHASE_COLUMNS: [&str; 14] = [
    "scenario",
    "seed",
    "phase",
    "target",
    "offered_rps",
    "achieved_rps",
    "requests",
    "errors",
    "timeouts",
    "error_ratio",
    "p50_ms",
    "p95_ms",
    "p99_ms",
    "max_ms",
];

/// Column order of `checks.csv`.
pub const CHECK_COLUMNS: [&str; 4] = ["scenario", "check", "passed", "detail"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}`, expected json or csv")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub seed: u64,
    pub phase: String,
    pub target: String,
    pub offered_rps: f64,
    pub achieved_rps: f64,
    pub requests: u64,
    pub errors: u64,
    pub timeouts: u64,
    pub error_ratio: f64,
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub max_ms: u64,
}

impl PhaseMetrics {
    /// Builds a phase row from raw counts and the latencies of successful
    /// requests. `duration_ms` is the phase length used for rates.
    #[allow(clippy::too_many_arguments)]
    pub fn from_samples(
        seed: u64,
        phase: &str,
        target: &str,
        offered_rps: f64,
        duration_ms: Millis,
        requests: u64,
        errors: u64,
        timeouts: u64,
        mut latencies: Vec<u64>,
    ) -> Self {
        latencies.sort_unstable();
        let ok = requests - errors;
        let secs = duration_ms as f64 / 1000.0;
        let achieved = if secs > 0.0 { ok as f64 / secs } else { 0.0 };
        Self {
            seed,
            phase: phase.to_string(),
            target: target.to_string(),
            offered_rps,
            achieved_rps: round3(achieved.min(offered_rps)),
            requests,
            errors,
            timeouts,
            error_ratio: if requests == 0 {
                0.0
            } else {
                errors as f64 / requests as f64
            },
            p50_ms: quantile(&latencies, 0.50),
            p95_ms: quantile(&latencies, 0.95),
            p99_ms: quantile(&latencies, 0.99),
            max_ms: latencies.last().copied().unwrap_or(0),
        }
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Nearest-rank quantile of sorted samples; 0 when empty.
pub fn quantile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessPoint {
    pub group: String,
    pub seed: u64,
    pub time_ms: Millis,
    pub staleness_ms: Millis,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub container_seconds: f64,
    pub replica_count: u32,
    pub peak_containers: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub driver: String,
    pub seeds: Vec<u64>,
    pub phases: Vec<PhaseMetrics>,
    pub staleness: Vec<StalenessPoint>,
    pub resources: Resources,
    /// Driver-specific measurements, keyed by name.
    pub values: BTreeMap<String, Value>,
    pub checks: Vec<CheckResult>,
    /// Operation logs, written next to the report but not part of it.
    #[serde(skip)]
    pub histories: BTreeMap<String, History>,
}

impl MetricsReport {
    pub fn new(scenario: &str, driver: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            driver: driver.to_string(),
            ..Self::default()
        }
    }

    /// True when every check passed (vacuously for none).
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult::new(name, passed, detail));
    }

    pub fn value(&mut self, key: &str, v: impl Serialize) {
        self.values.insert(
            key.to_string(),
            serde_json::to_value(v).expect("serializable"),
        );
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn phases_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(PHASE_COLUMNS).expect("in-memory");
        for p in &self.phases {
            w.write_record([
                self.scenario.clone(),
                p.seed.to_string(),
                p.phase.clone(),
                p.target.clone(),
                p.offered_rps.to_string(),
                p.achieved_rps.to_string(),
                p.requests.to_string(),
                p.errors.to_string(),
                p.timeouts.to_string(),
                p.error_ratio.to_string(),
                p.p50_ms.to_string(),
                p.p95_ms.to_string(),
                p.p99_ms.to_string(),
                p.max_ms.to_string(),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn checks_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CHECK_COLUMNS).expect("in-memory");
        for c in &self.checks {
            w.write_record([&self.scenario, &c.name, &c.passed.to_string(), &c.detail])
                .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    /// Writes the report into `dir` and returns the files written.
    /// JSON: `report.json`; CSV: `phases.csv` and `checks.csv`. Histories go
    /// to `history-<name>.jsonl` either way.
    pub fn emit(&self, dir: &Path, format: Format) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let mut put = |name: String, body: String| -> std::io::Result<()> {
            let path = dir.join(name);
            fs::write(&path, body)?;
            files.push(path);
            Ok(())
        };
        match format {
            Format::Json => put("report.json".into(), self.to_json())?,
            Format::Csv => {
                put("phases.csv".into(), self.phases_csv())?;
                put("checks.csv".into(), self.checks_csv())?;
            }
        }
        for (name, h) in &self.histories {
            put(format!("history-{name}.jsonl"), h.to_jsonl())?;
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = MetricsReport::new("demo", "load");
        r.seeds = vec![1];
        r.phases.push(PhaseMetrics::from_samples(
            1,
            "steady",
            "A.f",
            10.0,
            1000,
            10,
            1,
            1,
            (1..=9).collect(),
        ));
        r.check(
            "no-timeouts",
            false,
            "1 timeout, with \"quotes\", and commas",
        );
        r.value("x", 3);
        r
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = MetricsReport::new("empty", "load");
        assert_eq!(r.phases_csv(), PHASE_COLUMNS.join(",") + "\n");
        assert_eq!(r.checks_csv(), CHECK_COLUMNS.join(",") + "\n");
        assert!(r.passed());
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn phase_row_numbers() {
        let p = &sample().phases[0];
        assert_eq!(p.achieved_rps, 9.0);
        assert_eq!(p.error_ratio, 0.1);
        assert_eq!((p.p50_ms, p.p95_ms, p.p99_ms, p.max_ms), (5, 9, 9, 9));
        assert!(p.p50_ms <= p.p95_ms && p.p95_ms <= p.p99_ms && p.p99_ms <= p.max_ms);
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(quantile(&[], 0.5), 0);
        assert_eq!(quantile(&[7], 0.99), 7);
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(quantile(&v, 0.5), 50);
        assert_eq!(quantile(&v, 0.99), 99);
    }

    #[test]
    fn csv_quotes_detail() {
        let csv = sample().checks_csv();
        assert!(csv.contains("\"1 timeout, with \"\"quotes\"\", and commas\""));
    }

    #[test]
    fn emit_writes_files_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let a = r.emit(&dir.path().join("a"), Format::Csv).unwrap();
        let b = r.emit(&dir.path().join("b"), Format::Csv).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let j = r.emit(dir.path(), Format::Json).unwrap();
        assert_eq!(j[0].file_name().unwrap(), "report.json");
    }
}
