use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::run::{HarnessError, ScenarioOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Table,
    Csv,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), source: e.into() }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

#[derive(Serialize)]
struct AvailabilityRow {
    t_ms: u64,
    critical: Option<f64>,
    always_on: Option<f64>,
}

#[derive(Serialize)]
struct UtilRow {
    t_ms: u64,
    region0: f64,
    region1: f64,
}

#[derive(Serialize)]
struct BurstRow {
    t_ms: u64,
    cluster: u32,
    cores_online: u64,
}

#[derive(Serialize)]
struct CityRow {
    t_ms: u64,
    city: u32,
    availability: Option<f64>,
}

/// Writes `report.json`, `events.jsonl` and CSV sidecars into `dir`.
pub fn write_run_dir(outcome: &ScenarioOutcome, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let r = &outcome.report;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), HarnessError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io(&p))?;
        written.push(p);
        Ok(())
    };
    put("report.json", r.to_json().as_bytes())?;
    put("events.jsonl", &outcome.event_log)?;

    let p = dir.join("availability.csv");
    write_csv(
        &p,
        r.critical_series.iter().zip(&r.always_on_series).map(|(c, a)| AvailabilityRow { t_ms: c.t.0, critical: c.value, always_on: a.value }),
    )?;
    written.push(p);

    let p = dir.join("utilization.csv");
    write_csv(
        &p,
        outcome.record.utilization.iter().map(|s| UtilRow {
            t_ms: s.t.0,
            region0: s.regions.first().copied().unwrap_or(0.0),
            region1: s.regions.get(1).copied().unwrap_or(0.0),
        }),
    )?;
    written.push(p);

    let p = dir.join("class_series.csv");
    write_csv(&p, r.class_series.iter())?;
    written.push(p);

    let p = dir.join("burst.csv");
    write_csv(&p, r.burst_series.iter().map(|b| BurstRow { t_ms: b.t.0, cluster: b.cluster.0, cores_online: b.cores_online }))?;
    written.push(p);

    let p = dir.join("cities.csv");
    write_csv(
        &p,
        r.city_series.iter().flat_map(|c| c.points.iter().map(move |pt| CityRow { t_ms: pt.t.0, city: c.city, availability: pt.value })),
    )?;
    written.push(p);
    Ok(written)
}

/// Renders a report for the terminal or a pipe.
pub fn render(report: &MetricsReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => report.to_json(),
        OutputFormat::Table => table(report),
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for (c, a) in report.critical_series.iter().zip(&report.always_on_series) {
                w.serialize(AvailabilityRow { t_ms: c.t.0, critical: c.value, always_on: a.value }).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6}"))
}

fn table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario            {}", r.scenario);
    let _ = writeln!(s, "seed                {}", r.seed);
    let _ = writeln!(s, "horizon             {}", r.horizon);
    let _ = writeln!(s, "requests            {}", r.requests);
    let _ = writeln!(s, "critical avail      {:.6}", r.critical_availability.value);
    let _ = writeln!(s, "always-on min       {}", opt(r.always_on_min));
    let _ = writeln!(s, "capacity ratio      legacy {:.4}  phase1 {:.4}  phase2 {:.4}", r.capacity_ratio.legacy, r.capacity_ratio.phase1, r.capacity_ratio.phase2);
    for u in &r.utilization {
        let fo = u.failed_over.map_or("-".into(), |f| format!("{:.3}/{:.3}", f.mean, f.p99));
        let _ = writeln!(s, "utilization {}       steady {:.3}/{:.3}  failed-over {fo}", u.region, u.steady.mean, u.steady.p99);
    }
    let _ = writeln!(s, "rto                 {} verdicts, {} violated", r.rto.len(), r.rto_violated);
    let _ = writeln!(s, "evictions           {} hours with evictions", r.evictions_per_hour.len());
    let _ = writeln!(s, "class series check  {}", if r.class_shape.passed() { "pass" } else { "fail" });
    let _ = writeln!(s, "invariants          {} violations", r.violations.len());
    let _ = writeln!(s, "errors              {}", r.errors.len());
    let phases: Vec<String> = r.phases.iter().map(|(t, p)| format!("{p:?}@{t}")).collect();
    let _ = writeln!(s, "phases              {}", phases.join(" "));
    for w in &r.warnings {
        let _ = writeln!(s, "warning             {w}");
    }
    s
}
