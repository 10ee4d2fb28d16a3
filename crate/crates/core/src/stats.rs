//! Per-app aggregates over RTT samples and failure records, plus the JSONL
//! event log that backs them.
//!
//! Only SUCCESS samples enter RTT aggregates. Every sample counts as one
//! connection; failed connections are tallied by failure class, and
//! cancellations under `CANCELED`, so `conn_count == success_count + Σ failures`.
//! DNS misconfiguration findings are not connections and go to `diagnoses`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AppId;
use crate::diag::{FailureClass, FailureRecord};
use crate::rtt::{round_display, RttSample, SampleOutcome};

pub const SCHEMA_VERSION: u32 = 1;
pub const CANCELED: &str = "CANCELED";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    Sample(RttSample),
    Failure(FailureRecord),
}

impl Event {
    pub fn app(&self) -> &AppId {
        match self {
            Event::Sample(s) => &s.app,
            Event::Failure(f) => &f.app,
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no statistics for app {0:?}")]
    UnknownApp(String),
    #[error("no successful samples match the filter")]
    NoData,
    #[error("event log I/O: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationStats {
    pub dst_addr: Option<Ipv4Addr>,
    pub success_count: u64,
    pub min_ns: Option<u64>,
    pub max_ns: Option<u64>,
    pub mean_ns: Option<u64>,
    pub failures: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppStats {
    pub app: AppId,
    pub conn_count: u64,
    pub success_count: u64,
    pub min_ns: Option<u64>,
    pub max_ns: Option<u64>,
    /// Floor of the exact mean over successes.
    pub mean_ns: Option<u64>,
    pub failures: BTreeMap<String, u64>,
    pub diagnoses: BTreeMap<String, u64>,
    pub per_destination: Vec<DestinationStats>,
}

impl AppStats {
    pub fn failure_count(&self) -> u64 {
        self.failures.values().sum()
    }

    /// Failed fraction of all connections, `None` before the first one.
    pub fn failure_fraction(&self) -> Option<f64> {
        (self.conn_count > 0).then(|| self.failure_count() as f64 / self.conn_count as f64)
    }
}

#[derive(Debug, Clone, Default)]
struct RttAcc {
    count: u64,
    sum_ns: u128,
    min_ns: Option<u64>,
    max_ns: Option<u64>,
}

impl RttAcc {
    fn add(&mut self, ns: u64) {
        self.count += 1;
        self.sum_ns += ns as u128;
        self.min_ns = Some(self.min_ns.map_or(ns, |m| m.min(ns)));
        self.max_ns = Some(self.max_ns.map_or(ns, |m| m.max(ns)));
    }

    fn mean(&self) -> Option<u64> {
        (self.count > 0).then(|| (self.sum_ns / self.count as u128) as u64)
    }
}

#[derive(Debug, Clone, Default)]
struct DestAcc {
    rtt: RttAcc,
    failures: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
struct AppAcc {
    app: AppId,
    conn_count: u64,
    rtt: RttAcc,
    failures: BTreeMap<String, u64>,
    diagnoses: BTreeMap<String, u64>,
    dests: BTreeMap<Ipv4Addr, DestAcc>,
}

impl AppAcc {
    fn new(app: AppId) -> Self {
        AppAcc {
            app,
            conn_count: 0,
            rtt: RttAcc::default(),
            failures: BTreeMap::new(),
            diagnoses: BTreeMap::new(),
            dests: BTreeMap::new(),
        }
    }

    fn apply(&mut self, ev: &Event) {
        match ev {
            Event::Sample(s) => {
                self.conn_count += 1;
                match s.outcome {
                    SampleOutcome::Success => {
                        self.rtt.add(s.rtt_ns);
                        self.dests.entry(s.key.dst_addr).or_default().rtt.add(s.rtt_ns);
                    }
                    SampleOutcome::Canceled => {
                        *self.failures.entry(CANCELED.into()).or_default() += 1;
                        *self.dests.entry(s.key.dst_addr).or_default().failures.entry(CANCELED.into()).or_default() += 1;
                    }
                    // tallied from the matching FailureRecord
                    _ => {}
                }
            }
            Event::Failure(f) if f.class == FailureClass::DnsMisconfig => {
                *self.diagnoses.entry(f.class.to_string()).or_default() += 1;
            }
            Event::Failure(f) => {
                *self.failures.entry(f.class.to_string()).or_default() += 1;
                *self.dests.entry(f.key.dst_addr).or_default().failures.entry(f.class.to_string()).or_default() += 1;
            }
        }
    }

    fn snapshot(&self) -> AppStats {
        AppStats {
            app: self.app.clone(),
            conn_count: self.conn_count,
            success_count: self.rtt.count,
            min_ns: self.rtt.min_ns,
            max_ns: self.rtt.max_ns,
            mean_ns: self.rtt.mean(),
            failures: self.failures.clone(),
            diagnoses: self.diagnoses.clone(),
            per_destination: self
                .dests
                .iter()
                .map(|(addr, d)| DestinationStats {
                    dst_addr: Some(*addr),
                    success_count: d.rtt.count,
                    min_ns: d.rtt.min_ns,
                    max_ns: d.rtt.max_ns,
                    mean_ns: d.rtt.mean(),
                    failures: d.failures.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    apps: BTreeMap<String, AppAcc>,
    events: Vec<EventLogRecord>,
    log: Option<BufWriter<File>>,
}

/// Result of reading an event log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub corrupt: usize,
}

/// Thread-safe aggregate store. Views are consistent snapshots.
#[derive(Debug, Default)]
pub struct StatsStore {
    inner: Mutex<Inner>,
}

impl StatsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events<I: IntoIterator<Item = Event>>(events: I) -> Self {
        let store = StatsStore::new();
        store.record_all(events).expect("no log attached");
        store
    }

    /// Record one event and return the app's updated aggregates.
    pub fn record(&self, ev: Event) -> Result<AppStats, StatsError> {
        let name = ev.app().name.clone();
        self.record_all([ev])?;
        self.app_view(&name)
    }

    /// Record several events atomically with respect to views.
    pub fn record_all<I: IntoIterator<Item = Event>>(&self, events: I) -> Result<(), StatsError> {
        let mut inner = self.inner.lock().unwrap();
        let mut io_result = Ok(());
        for ev in events {
            inner
                .apps
                .entry(ev.app().name.clone())
                .or_insert_with(|| AppAcc::new(ev.app().clone()))
                .apply(&ev);
            let rec = EventLogRecord { schema_version: SCHEMA_VERSION, event: ev };
            if let Some(log) = inner.log.as_mut() {
                if io_result.is_ok() {
                    io_result = write_line(log, &rec);
                }
            }
            inner.events.push(rec);
        }
        if let Some(log) = inner.log.as_mut() {
            if io_result.is_ok() {
                io_result = log.flush();
            }
        }
        io_result.map_err(StatsError::from)
    }

    pub fn record_sample(&self, s: RttSample) -> Result<AppStats, StatsError> {
        self.record(Event::Sample(s))
    }

    pub fn record_failure(&self, f: FailureRecord) -> Result<AppStats, StatsError> {
        self.record(Event::Failure(f))
    }

    /// Every app, most connections first, ties by name.
    pub fn all_app_view(&self) -> Vec<AppStats> {
        let inner = self.inner.lock().unwrap();
        let mut v: Vec<AppStats> = inner.apps.values().map(AppAcc::snapshot).collect();
        v.sort_by(|a, b| b.conn_count.cmp(&a.conn_count).then_with(|| a.app.name.cmp(&b.app.name)));
        v
    }

    pub fn app_view(&self, app: &str) -> Result<AppStats, StatsError> {
        let inner = self.inner.lock().unwrap();
        inner.apps.get(app).map(AppAcc::snapshot).ok_or_else(|| StatsError::UnknownApp(app.to_string()))
    }

    pub fn events(&self) -> Vec<EventLogRecord> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn event_count(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    /// Empirical CDF over successful samples as `(rtt_ms, cumulative fraction)`.
    pub fn export_cdf(&self, app: Option<&str>, network_tag: Option<&str>) -> Result<Vec<(f64, f64)>, StatsError> {
        let mut rtts: Vec<u64> = {
            let inner = self.inner.lock().unwrap();
            inner
                .events
                .iter()
                .filter_map(|r| match &r.event {
                    Event::Sample(s) if s.outcome == SampleOutcome::Success => Some(s),
                    _ => None,
                })
                .filter(|s| app.is_none_or(|a| s.app.name == a))
                .filter(|s| network_tag.is_none_or(|t| s.network_tag == t))
                .map(|s| s.rtt_ns)
                .collect()
        };
        if rtts.is_empty() {
            return Err(StatsError::NoData);
        }
        rtts.sort_unstable();
        let n = rtts.len() as f64;
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, ns) in rtts.iter().enumerate() {
            let is_last_of_value = rtts.get(i + 1) != Some(ns);
            if is_last_of_value {
                let frac = if i + 1 == rtts.len() { 1.0 } else { (i + 1) as f64 / n };
                points.push((*ns as f64 / 1e6, frac));
            }
        }
        Ok(points)
    }

    /// Write the whole event log to `path`, replacing it.
    pub fn persist(&self, path: &Path) -> Result<(), StatsError> {
        let events = self.events();
        let mut w = BufWriter::new(File::create(path)?);
        for rec in &events {
            write_line(&mut w, rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read an event log. Unparseable lines are skipped and counted.
    pub fn load(path: &Path) -> Result<(StatsStore, LoadReport), StatsError> {
        let store = StatsStore::new();
        let report = store.ingest(BufReader::new(File::open(path)?))?;
        Ok((store, report))
    }

    /// Load `path` if it exists, then append every new event to it.
    pub fn open_append(path: &Path) -> Result<(StatsStore, LoadReport), StatsError> {
        let mut file = OpenOptions::new().read(true).create(true).append(true).open(path)?;
        let store = StatsStore::new();
        let report = store.ingest(BufReader::new(&mut file))?;
        // a torn final line must not swallow the next record
        if file.metadata()?.len() > 0 {
            let mut last = [0u8; 1];
            let mut probe = File::open(path)?;
            probe.seek(SeekFrom::End(-1))?;
            probe.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        store.inner.lock().unwrap().log = Some(BufWriter::new(file));
        Ok((store, report))
    }

    fn ingest<R: BufRead>(&self, reader: R) -> Result<LoadReport, StatsError> {
        let mut report = LoadReport::default();
        let mut events = Vec::new();
        for line in reader.split(b'\n') {
            let line = line?;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice::<EventLogRecord>(&line) {
                Ok(rec) => {
                    report.loaded += 1;
                    events.push(rec.event);
                }
                Err(e) => {
                    log::warn!("skipping corrupt event log line: {e}");
                    report.corrupt += 1;
                }
            }
        }
        self.record_all(events)?;
        Ok(report)
    }
}

fn write_line<W: Write>(w: &mut W, rec: &EventLogRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

fn fmt_ms(ns: Option<u64>) -> String {
    ns.map_or_else(|| "-".to_string(), |v| format!("{}", round_display(v)))
}

fn fmt_tally(m: &BTreeMap<String, u64>) -> String {
    if m.is_empty() {
        return "-".into();
    }
    m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// Aligned text table of an all-app view, RTTs in display milliseconds.
pub fn render_all_app_view(view: &[AppStats]) -> String {
    let w = view.iter().map(|a| a.app.name.len()).max().unwrap_or(0).max(3);
    let mut out = format!(
        "{:<w$}  {:>6}  {:>7}  {:>8}  {:>8}  {:>8}  failures\n",
        "app", "conns", "success", "min_ms", "mean_ms", "max_ms"
    );
    for a in view {
        let _ = writeln!(
            out,
            "{:<w$}  {:>6}  {:>7}  {:>8}  {:>8}  {:>8}  {}",
            a.app.name,
            a.conn_count,
            a.success_count,
            fmt_ms(a.min_ns),
            fmt_ms(a.mean_ns),
            fmt_ms(a.max_ns),
            fmt_tally(&a.failures)
        );
    }
    out
}

/// Individual-app view with its per-destination breakdown.
pub fn render_app_view(a: &AppStats) -> String {
    let mut out = format!(
        "app {}: {} connections, {} successful, min/mean/max {}/{}/{} ms, failures {}",
        a.app.name,
        a.conn_count,
        a.success_count,
        fmt_ms(a.min_ns),
        fmt_ms(a.mean_ns),
        fmt_ms(a.max_ns),
        fmt_tally(&a.failures)
    );
    if !a.diagnoses.is_empty() {
        let _ = write!(out, ", diagnoses {}", fmt_tally(&a.diagnoses));
    }
    out.push('\n');
    let _ = writeln!(out, "{:<15}  {:>7}  {:>8}  {:>8}  {:>8}  failures", "destination", "count", "min_ms", "mean_ms", "max_ms");
    for d in &a.per_destination {
        let _ = writeln!(
            out,
            "{:<15}  {:>7}  {:>8}  {:>8}  {:>8}  {}",
            d.dst_addr.map_or_else(|| "-".into(), |x| x.to_string()),
            d.success_count,
            fmt_ms(d.min_ns),
            fmt_ms(d.mean_ns),
            fmt_ms(d.max_ns),
            fmt_tally(&d.failures)
        );
    }
    out
}

#[derive(Serialize)]
struct AppCsvRow<'a> {
    app: &'a str,
    conn_count: u64,
    success_count: u64,
    min_ns: Option<u64>,
    mean_ns: Option<u64>,
    max_ns: Option<u64>,
    failures: u64,
    dns_misconfig: u64,
}

pub fn app_stats_csv(view: &[AppStats]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in view {
        w.serialize(AppCsvRow {
            app: &a.app.name,
            conn_count: a.conn_count,
            success_count: a.success_count,
            min_ns: a.min_ns,
            mean_ns: a.mean_ns,
            max_ns: a.max_ns,
            failures: a.failure_count(),
            dns_misconfig: a.diagnoses.values().sum(),
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn cdf_csv(points: &[(f64, f64)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rtt_ms", "fraction"]).expect("in-memory csv write");
    for (x, f) in points {
        w.write_record([x.to_string(), f.to_string()]).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{FlowKey, Transport};
    use chrono::{DateTime, Utc};
    use std::net::SocketAddrV4;

    fn sample(app: &str, dst: [u8; 4], ms: f64, outcome: SampleOutcome, tag: &str) -> RttSample {
        let rtt_ns = (ms * 1e6).round() as u64;
        RttSample {
            key: FlowKey::new(
                Transport::Tcp,
                SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 2), 40000),
                SocketAddrV4::new(Ipv4Addr::from(dst), 443),
            ),
            app: AppId::new(app),
            t_start: 1_000,
            t_end: 1_000 + rtt_ns,
            rtt_ns,
            outcome,
            network_tag: tag.into(),
            wall_time: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    fn failure(s: &RttSample, class: FailureClass) -> FailureRecord {
        FailureRecord { key: s.key, app: s.app.clone(), class, evidence: String::new(), wall_time: s.wall_time }
    }

    #[test]
    fn facebook_rows() {
        let store = StatsStore::new();
        for ms in [37.0, 37.0, 38.5] {
            store.record_sample(sample("facebook", [31, 13, 79, 251], ms, SampleOutcome::Success, "wifi")).unwrap();
        }
        let a = store.app_view("facebook").unwrap();
        assert_eq!((a.min_ns, a.max_ns, a.mean_ns), (Some(37_000_000), Some(38_500_000), Some(37_500_000)));
        assert_eq!(a.conn_count, 3);
    }

    #[test]
    fn singleton_and_unknown_app() {
        let store = StatsStore::new();
        let a = store.record_sample(sample("x", [1, 2, 3, 4], 4.26, SampleOutcome::Success, "wifi")).unwrap();
        assert_eq!(a.min_ns, a.max_ns);
        assert_eq!(a.min_ns, a.mean_ns);
        assert!(matches!(store.app_view("nope"), Err(StatsError::UnknownApp(_))));
    }

    #[test]
    fn failures_partition_connections() {
        let store = StatsStore::new();
        let ok = sample("netease", [1, 1, 1, 9], 20.0, SampleOutcome::Success, "4g");
        let bad = sample("netease", [1, 1, 1, 9], 3000.0, SampleOutcome::Timeout, "4g");
        let canceled = sample("netease", [2, 2, 2, 2], 1.0, SampleOutcome::Canceled, "4g");
        store.record_sample(ok).unwrap();
        store
            .record_all([Event::Sample(bad.clone()), Event::Failure(failure(&bad, FailureClass::Timeout))])
            .unwrap();
        store.record_sample(canceled).unwrap();
        store.record_failure(failure(&bad, FailureClass::DnsMisconfig)).unwrap();
        let a = store.app_view("netease").unwrap();
        assert_eq!(a.conn_count, 3);
        assert_eq!(a.conn_count, a.success_count + a.failure_count());
        assert_eq!(a.diagnoses["DNS_MISCONFIG"], 1);
        let row = a.per_destination.iter().find(|d| d.dst_addr == Some(Ipv4Addr::new(1, 1, 1, 9))).unwrap();
        assert_eq!(row.success_count, 1);
        assert_eq!(row.failures["TIMEOUT"], 1);
        assert_eq!(a.failure_fraction(), Some(2.0 / 3.0));
    }

    #[test]
    fn view_ordering() {
        let store = StatsStore::new();
        assert!(store.all_app_view().is_empty());
        for (app, n) in [("b", 3), ("a", 5), ("c", 3)] {
            for _ in 0..n {
                store.record_sample(sample(app, [1, 1, 1, 1], 5.0, SampleOutcome::Success, "wifi")).unwrap();
            }
        }
        let names: Vec<_> = store.all_app_view().into_iter().map(|a| a.app.name).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn cdf_shapes() {
        let store = StatsStore::new();
        assert!(matches!(store.export_cdf(None, None), Err(StatsError::NoData)));
        for ms in [30.0, 10.0, 20.0] {
            store.record_sample(sample("a", [1, 1, 1, 1], ms, SampleOutcome::Success, "wifi")).unwrap();
        }
        store.record_sample(sample("a", [1, 1, 1, 1], 7.0, SampleOutcome::Success, "4g")).unwrap();
        let pts = store.export_cdf(Some("a"), Some("wifi")).unwrap();
        assert_eq!(pts, vec![(10.0, 1.0 / 3.0), (20.0, 2.0 / 3.0), (30.0, 1.0)]);
        assert_eq!(store.export_cdf(None, Some("4g")).unwrap(), vec![(7.0, 1.0)]);
        assert!(cdf_csv(&pts).starts_with("rtt_ms,fraction\n10,"));
    }

    #[test]
    fn record_has_fixed_key_order_and_ignores_unknown_fields() {
        let rec = EventLogRecord {
            schema_version: SCHEMA_VERSION,
            event: Event::Sample(sample("a", [1, 1, 1, 1], 1.0, SampleOutcome::Success, "wifi")),
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with(r#"{"schema_version":1,"kind":"SAMPLE","payload":{"key":"#), "{line}");
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v["future"] = serde_json::json!(true);
        v["payload"]["extra"] = serde_json::json!("x");
        let back: EventLogRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn persist_load_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let store = StatsStore::new();
        for ms in [1.0, 2.0] {
            store.record_sample(sample("a", [1, 1, 1, 1], ms, SampleOutcome::Success, "wifi")).unwrap();
        }
        store.persist(&path).unwrap();
        let (loaded, report) = StatsStore::load(&path).unwrap();
        assert_eq!(report, LoadReport { loaded: 2, corrupt: 0 });
        assert_eq!(loaded.all_app_view(), store.all_app_view());

        // torn write at the end
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 10);
        std::fs::write(&path, &text).unwrap();
        let (s2, report) = StatsStore::open_append(&path).unwrap();
        assert_eq!(report, LoadReport { loaded: 1, corrupt: 1 });
        s2.record_sample(sample("a", [1, 1, 1, 1], 3.0, SampleOutcome::Success, "wifi")).unwrap();
        drop(s2);
        let (s3, report) = StatsStore::open_append(&path).unwrap();
        assert_eq!(report, LoadReport { loaded: 2, corrupt: 1 });
        assert_eq!(s3.app_view("a").unwrap().conn_count, 2);
    }

    #[test]
    fn renderers() {
        let store = StatsStore::new();
        store.record_sample(sample("facebook", [31, 13, 79, 251], 4.135, SampleOutcome::Success, "wifi")).unwrap();
        let all = render_all_app_view(&store.all_app_view());
        assert!(all.contains("facebook") && all.contains(" 4 "), "{all}");
        let one = render_app_view(&store.app_view("facebook").unwrap());
        assert!(one.contains("31.13.79.251"));
        assert!(app_stats_csv(&store.all_app_view()).starts_with("app,conn_count"));
    }
}
