//! Append-only local run store.
//!
//! One JSON object per line, each carrying an explicit schema version `v`.
//! Writers take an exclusive advisory lock per append and fsync before
//! returning. Readers parse a snapshot without locking; a final line with no
//! terminating newline is an append that never completed and is ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::training::{EpochMetrics, TrainConfig};

pub const EVENT_VERSION: u32 = 1;

/// Environment variable consulted when no store path is given explicitly.
pub const RUN_STORE_ENV: &str = "GERMEVAL_RUN_STORE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    /// Interrupted, or still open when the store was read.
    Partial,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
            RunStatus::Partial => "partial",
        }
    }
}

/// What the run was trained against: a split manifest, or the full dataset.
/// `digest` is the manifest digest (or the dataset digest for full-data runs);
/// `train_digest` covers the training entries, which tells an augmented run
/// apart from a baseline sharing its manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRef {
    pub kind: DataKind,
    pub digest: String,
    pub train_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SplitManifest,
    FullData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunCreated {
        run_id: String,
        backbone: String,
        config: TrainConfig,
        data: DataRef,
        started: String,
        content_hash: String,
    },
    Epoch {
        run_id: String,
        metrics: EpochMetrics,
    },
    RunFinished {
        run_id: String,
        status: RunStatus,
        finished: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl Event {
    pub fn run_id(&self) -> &str {
        match self {
            Event::RunCreated { run_id, .. }
            | Event::Epoch { run_id, .. }
            | Event::RunFinished { run_id, .. } => run_id,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    v: u32,
    #[serde(flatten)]
    event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub backbone: String,
    pub config: TrainConfig,
    pub data: DataRef,
    pub status: RunStatus,
    pub epoch_history: Vec<EpochMetrics>,
    pub started: String,
    pub finished: Option<String>,
    pub reason: Option<String>,
    pub content_hash: String,
    /// Position of the creation event in the store; breaks start-time ties.
    pub sequence: usize,
}

impl RunRecord {
    pub fn recompute_hash(&self) -> Result<String> {
        content_hash(&self.config, &self.backbone, &self.data)
    }

    /// Best validation value of `metric` over all epochs, with its 1-based epoch.
    pub fn best(&self, metric: Metric) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for e in &self.epoch_history {
            if let Some(v) = e.validation.as_ref().and_then(|r| metric.of(r)) {
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, e.epoch));
                }
            }
        }
        best
    }

    pub fn validation_report(&self) -> Option<&crate::metrics::MetricsReport> {
        self.epoch_history.last().and_then(|e| e.validation.as_ref())
    }
}

/// SHA-256 over the canonical JSON of (config, backbone, data digests).
pub fn content_hash(config: &TrainConfig, backbone: &str, data: &DataRef) -> Result<String> {
    let canonical = serde_json::json!({
        "backbone": backbone,
        "config": serde_json::to_value(config)?,
        "data": data.digest,
        "train": data.train_digest,
    });
    Ok(crate::digest_hex(serde_json::to_string(&canonical)?.as_bytes()))
}

/// Validation quantity used to rank runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Macro,
    F1(Label),
}

impl Metric {
    pub fn of(self, report: &crate::metrics::MetricsReport) -> Option<f64> {
        match self {
            Metric::Macro => Some(report.macro_f1),
            Metric::F1(l) => report.f1(l),
        }
    }

    pub fn name(self) -> String {
        match self {
            Metric::Macro => "macro_f1".into(),
            Metric::F1(l) => format!("{}.f1", l.key()),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" | "macro_f1" => Ok(Metric::Macro),
            other => Ok(Metric::F1(other.trim_end_matches(".f1").parse()?)),
        }
    }
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

pub fn new_run_id(backbone: &str) -> String {
    let id = uuid::Uuid::new_v4().simple().to_string();
    format!("{backbone}-{}", &id[..12])
}

#[derive(Debug, Clone)]
pub struct RunStore {
    path: PathBuf,
}

impl RunStore {
    /// Open (creating if needed) the store file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunStore { path })
    }

    /// `explicit`, else `$GERMEVAL_RUN_STORE`, else `runs.jsonl`.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::open(p),
            None => match std::env::var_os(RUN_STORE_ENV) {
                Some(p) => Self::open(PathBuf::from(p)),
                None => Self::open("runs.jsonl"),
            },
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably append one event. Creation events must carry a fresh run id;
    /// all others must name an existing run.
    pub fn append(&self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_string(&Line {
            v: EVENT_VERSION,
            event: event.clone(),
        })?;
        line.push('\n');
        let io = |e| Error::io(&self.path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&self.path)
            .map_err(io)?;
        file.lock().map_err(io)?;
        let result = (|| {
            let mut bytes = Vec::new();
            file.read_to_end(&mut bytes).map_err(io)?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            let known = parse_events(&bytes[..complete], &self.path)?
                .iter()
                .any(|e| matches!(e, Event::RunCreated { run_id, .. } if run_id == event.run_id()));
            match (event, known) {
                (Event::RunCreated { run_id, .. }, true) => {
                    return Err(Error::validation(format!("run id {run_id} already exists")))
                }
                (Event::RunCreated { .. }, false) | (_, true) => {}
                (_, false) => return Err(Error::UnknownRun(event.run_id().to_string())),
            }
            if complete < bytes.len() {
                // The torn tail was never acknowledged; drop it so the new
                // line starts cleanly.
                file.set_len(complete as u64).map_err(io)?;
            }
            file.seek(SeekFrom::Start(complete as u64)).map_err(io)?;
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)
        })();
        let _ = file.unlock();
        result
    }

    pub fn events(&self) -> Result<Vec<Event>> {
        let mut bytes = Vec::new();
        File::open(&self.path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&self.path, e))?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        parse_events(&bytes[..complete], &self.path)
    }

    /// Fold the event log into run records, in creation order.
    pub fn load(&self) -> Result<Vec<RunRecord>> {
        let mut runs: Vec<RunRecord> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for event in self.events()? {
            match event {
                Event::RunCreated {
                    run_id,
                    backbone,
                    config,
                    data,
                    started,
                    content_hash,
                } => {
                    index.insert(run_id.clone(), runs.len());
                    runs.push(RunRecord {
                        run_id,
                        backbone,
                        config,
                        data,
                        status: RunStatus::Partial,
                        epoch_history: Vec::new(),
                        started,
                        finished: None,
                        reason: None,
                        content_hash,
                        sequence: runs.len(),
                    });
                }
                Event::Epoch { run_id, metrics } => {
                    let i = *index.get(&run_id).ok_or(Error::UnknownRun(run_id))?;
                    runs[i].epoch_history.push(metrics);
                }
                Event::RunFinished {
                    run_id,
                    status,
                    finished,
                    reason,
                } => {
                    let i = *index.get(&run_id).ok_or(Error::UnknownRun(run_id))?;
                    runs[i].status = status;
                    runs[i].finished = Some(finished);
                    runs[i].reason = reason;
                }
            }
        }
        Ok(runs)
    }

    pub fn get(&self, run_id: &str) -> Result<RunRecord> {
        self.load()?
            .into_iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| Error::UnknownRun(run_id.to_string()))
    }
}

fn parse_events(bytes: &[u8], path: &Path) -> Result<Vec<Event>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: "run store is not UTF-8".into(),
    })?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i as u64 + 1,
            msg,
        };
        let line: Line = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        if line.v != EVENT_VERSION {
            return Err(parse_err(format!("unsupported event version {}", line.v)));
        }
        out.push(line.event);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunFilter {
    pub backbone: Option<String>,
    pub status: Option<RunStatus>,
}

impl RunFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        self.backbone.as_ref().is_none_or(|b| *b == r.backbone)
            && self.status.is_none_or(|s| s == r.status)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run_id: String,
    pub backbone: String,
    pub status: RunStatus,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Best value of the ranking metric, with its epoch.
    pub best: Option<(f64, usize)>,
    pub best_per_label: BTreeMap<Label, f64>,
    pub started: String,
}

/// Rank runs by their best validation `metric`, descending. Ties (and runs
/// without validation data, which sort last) go to the earlier start.
pub fn compare_runs(runs: &[RunRecord], filter: &RunFilter, metric: Metric) -> Vec<ComparisonRow> {
    let mut picked: Vec<&RunRecord> = runs.iter().filter(|r| filter.matches(r)).collect();
    picked.sort_by(|a, b| {
        let (va, vb) = (a.best(metric).map(|x| x.0), b.best(metric).map(|x| x.0));
        match (va, vb) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| a.started.cmp(&b.started))
        .then_with(|| a.sequence.cmp(&b.sequence))
    });
    picked
        .into_iter()
        .map(|r| ComparisonRow {
            run_id: r.run_id.clone(),
            backbone: r.backbone.clone(),
            status: r.status,
            learning_rate: r.config.learning_rate,
            epochs: r.config.epochs,
            best: r.best(metric),
            best_per_label: Label::ALL
                .iter()
                .filter_map(|&l| r.best(Metric::F1(l)).map(|(v, _)| (l, v)))
                .collect(),
            started: r.started.clone(),
        })
        .collect()
}

/// Tab-separated rendering of a comparison table.
pub fn comparison_tsv(rows: &[ComparisonRow], metric: Metric) -> String {
    let mut out = format!(
        "run_id\tbackbone\tstatus\tlearning_rate\tepochs\tbest_{}\tbest_epoch\ttoxic.f1\tengaging.f1\tfact_claiming.f1\tstarted\n",
        metric.name()
    );
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.run_id,
            r.backbone,
            r.status.as_str(),
            r.learning_rate,
            r.epochs,
            cell(r.best.map(|b| b.0)),
            r.best.map_or("-".into(), |b| b.1.to_string()),
            cell(r.best_per_label.get(&Label::Toxic).copied()),
            cell(r.best_per_label.get(&Label::Engaging).copied()),
            cell(r.best_per_label.get(&Label::FactClaiming).copied()),
            r.started,
        );
    }
    out
}

/// One point of a plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPoint {
    pub epoch: usize,
    pub run_id: String,
    pub value: f64,
}

/// The sidecar table for `metric`: one row per (run, epoch) with a validation value.
pub fn history_table(runs: &[RunRecord], metric: Metric) -> Vec<HistoryPoint> {
    runs.iter()
        .flat_map(|r| {
            r.epoch_history.iter().filter_map(move |e| {
                e.validation.as_ref().and_then(|v| metric.of(v)).map(|value| HistoryPoint {
                    epoch: e.epoch,
                    run_id: r.run_id.clone(),
                    value,
                })
            })
        })
        .collect()
}

pub fn sidecar_path(chart: &Path) -> PathBuf {
    chart.with_extension("tsv")
}

/// Write an SVG line chart of validation `metric` per epoch, one series per
/// run, plus a `.tsv` sidecar with the plotted numbers. Returns the sidecar path.
pub fn plot_history(runs: &[RunRecord], metric: Metric, output: &Path) -> Result<PathBuf> {
    let points = history_table(runs, metric);
    if points.is_empty() {
        return Err(Error::validation(format!(
            "no run has validation history for {}",
            metric.name()
        )));
    }
    let mut table = String::from("epoch\trun_id\tf1\n");
    for p in &points {
        let _ = writeln!(table, "{}\t{}\t{}", p.epoch, p.run_id, p.value);
    }
    let sidecar = sidecar_path(output);
    std::fs::write(&sidecar, table).map_err(|e| Error::io(&sidecar, e))?;
    std::fs::write(output, render_svg(&points, &metric.name())).map_err(|e| Error::io(output, e))?;
    Ok(sidecar)
}

/// Parse a sidecar table back into points.
pub fn read_history_table(text: &str) -> Result<Vec<HistoryPoint>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            let bad = || Error::validation(format!("malformed history row {l:?}"));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(HistoryPoint {
                epoch: cols[0].parse().map_err(|_| bad())?,
                run_id: cols[1].to_string(),
                value: cols[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(points: &[HistoryPoint], title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let max_epoch = points.iter().map(|p| p.epoch).max().unwrap_or(1).max(2) as f64;
    let lo = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min).min(0.9).floor_to(0.1);
    let hi = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max).max(lo + 0.1).ceil_to(0.1);
    let x = |e: f64| m + (e - 1.0) / (max_epoch - 1.0) * (w - 2.0 * m);
    let y = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);

    let mut series: Vec<(&str, Vec<&HistoryPoint>)> = Vec::new();
    for p in points {
        match series.iter_mut().find(|(id, _)| *id == p.run_id) {
            Some((_, v)) => v.push(p),
            None => series.push((&p.run_id, vec![p])),
        }
    }

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">validation {}</text>\n",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{0}\" stroke=\"black\"/>",
        h - m,
        w - m
    );
    for e in 1..=max_epoch as usize {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{e}</text>",
            x(e as f64),
            h - m + 15.0
        );
    }
    let mut t = lo;
    while t <= hi + 1e-9 {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t:.1}</text>",
            m - 5.0,
            y(t) + 4.0
        );
        t += 0.1;
    }
    for (i, (run_id, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.epoch as f64), y(p.value)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            w - m + 5.0 - 120.0,
            m + 14.0 * i as f64,
            escape(run_id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

trait Snap {
    fn floor_to(self, step: f64) -> f64;
    fn ceil_to(self, step: f64) -> f64;
}

impl Snap for f64 {
    fn floor_to(self, step: f64) -> f64 {
        ((self / step).floor() * step).max(0.0)
    }
    fn ceil_to(self, step: f64) -> f64 {
        ((self / step).ceil() * step).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;
    use crate::metrics::MetricsReport;
    use crate::training::TrainConfig;

    fn report(f1_toxic: f64) -> MetricsReport {
        // 10 gold positives, `tp` found; no false positives.
        let tp = (f1_toxic * 10.0).round() as usize;
        let gold: Vec<LabelSet> = (0..10).map(|_| LabelSet::from_bits(1, 0, 0)).collect();
        let pred: Vec<LabelSet> = (0..10)
            .map(|i| LabelSet::from_bits(u8::from(i < tp), 0, 0))
            .collect();
        MetricsReport::evaluate(&gold, &pred, &[Label::Toxic]).unwrap()
    }

    fn created(run_id: &str, started: &str) -> Event {
        let config = TrainConfig::default();
        let data = DataRef {
            kind: DataKind::SplitManifest,
            digest: "abc".into(),
            train_digest: "def".into(),
            path: None,
        };
        Event::RunCreated {
            run_id: run_id.into(),
            backbone: "tiny_test".into(),
            content_hash: content_hash(&config, "tiny_test", &data).unwrap(),
            config,
            data,
            started: started.into(),
        }
    }

    fn epoch(run_id: &str, n: usize, f1: f64) -> Event {
        Event::Epoch {
            run_id: run_id.into(),
            metrics: EpochMetrics {
                epoch: n,
                train_loss: 0.5 / n as f64,
                validation: Some(report(f1)),
            },
        }
    }

    fn store() -> (tempfile::TempDir, RunStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = RunStore::open(dir.path().join("runs.jsonl")).unwrap();
        (dir, s)
    }

    #[test]
    fn three_epochs_in_order() {
        let (_d, s) = store();
        s.append(&created("r1", "2026-01-01T00:00:00Z")).unwrap();
        for (i, f) in [0.5, 0.7, 0.6].into_iter().enumerate() {
            s.append(&epoch("r1", i + 1, f)).unwrap();
        }
        let r = s.get("r1").unwrap();
        assert_eq!(r.epoch_history.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(r.status, RunStatus::Partial);
        assert_eq!(r.recompute_hash().unwrap(), r.content_hash);
        assert_eq!(r.best(Metric::F1(Label::Toxic)).unwrap().1, 2);
    }

    #[test]
    fn unknown_and_duplicate_runs() {
        let (_d, s) = store();
        assert!(matches!(s.append(&epoch("ghost", 1, 0.5)), Err(Error::UnknownRun(_))));
        s.append(&created("r1", "t")).unwrap();
        assert!(s.append(&created("r1", "t")).is_err());
    }

    #[test]
    fn torn_tail_is_ignored_and_repaired() {
        let (_d, s) = store();
        s.append(&created("r1", "t")).unwrap();
        s.append(&epoch("r1", 1, 0.5)).unwrap();
        let len = std::fs::metadata(s.path()).unwrap().len();
        s.append(&epoch("r1", 2, 0.6)).unwrap();
        let f = OpenOptions::new().write(true).open(s.path()).unwrap();
        f.set_len(len + 20).unwrap();
        assert_eq!(s.get("r1").unwrap().epoch_history.len(), 1);
        s.append(&epoch("r1", 2, 0.7)).unwrap();
        let r = s.get("r1").unwrap();
        assert_eq!(r.epoch_history.len(), 2);
        assert_eq!(r.epoch_history[1].validation.as_ref().unwrap().macro_f1, report(0.7).macro_f1);
    }

    #[test]
    fn concurrent_writers_do_not_interleave() {
        let (_d, s) = store();
        s.append(&created("a", "t1")).unwrap();
        s.append(&created("b", "t2")).unwrap();
        std::thread::scope(|scope| {
            for id in ["a", "b"] {
                let s = s.clone();
                scope.spawn(move || {
                    for n in 1..=25 {
                        s.append(&epoch(id, n, 0.5)).unwrap();
                    }
                });
            }
        });
        let runs = s.load().unwrap();
        for r in runs {
            let epochs: Vec<usize> = r.epoch_history.iter().map(|e| e.epoch).collect();
            assert_eq!(epochs, (1..=25).collect::<Vec<_>>());
        }
    }

    #[test]
    fn comparison_order_and_ties() {
        let (_d, s) = store();
        for (id, start, f) in [("r70", "t1", 0.7), ("r65", "t2", 0.6), ("r73", "t3", 0.8), ("tie", "t4", 0.8)] {
            s.append(&created(id, start)).unwrap();
            s.append(&epoch(id, 1, f)).unwrap();
        }
        let runs = s.load().unwrap();
        let rows = compare_runs(&runs, &RunFilter::default(), Metric::Macro);
        let ids: Vec<&str> = rows.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, ["r73", "tie", "r70", "r65"]);
        assert!(compare_runs(&[], &RunFilter::default(), Metric::Macro).is_empty());
        assert!(comparison_tsv(&rows, Metric::Macro).lines().count() == 5);
    }

    #[test]
    fn plot_sidecar_matches_store() {
        let (d, s) = store();
        for (id, start) in [("a", "t1"), ("b", "t2")] {
            s.append(&created(id, start)).unwrap();
            for n in 1..=3 {
                s.append(&epoch(id, n, 0.1 * n as f64 + 0.3)).unwrap();
            }
        }
        let runs = s.load().unwrap();
        let chart = d.path().join("toxic.svg");
        let sidecar = plot_history(&runs, Metric::F1(Label::Toxic), &chart).unwrap();
        let table = read_history_table(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(table.len(), 6);
        assert_eq!(table, history_table(&runs, Metric::F1(Label::Toxic)));
        assert!(std::fs::read_to_string(&chart).unwrap().matches("<polyline").count() == 2);
        assert!(plot_history(&runs, Metric::F1(Label::Engaging), &chart).is_err());
    }
}
