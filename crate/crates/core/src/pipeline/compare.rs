//! Runs the same session under each trajectory and tabulates the metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_scan, SessionConfig, Stage};
use crate::acquisition::TrajectoryKind;
use crate::cloud::LEVELS;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricsReport, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cd,
    Emd,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cd, Metric::Emd, Metric::F1];

    pub fn higher_is_better(self) -> bool {
        self == Metric::F1
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Cd => "CD",
            Metric::Emd => "EMD",
            Metric::F1 => "F1",
        }
    }

    pub fn of(self, row: &MetricsRow) -> f64 {
        match self {
            Metric::Cd => row.cd,
            Metric::Emd => row.emd,
            Metric::F1 => row.f1,
        }
    }

    pub fn mean_of(self, report: &MetricsReport) -> MeanStd {
        match self {
            Metric::Cd => report.average.cd,
            Metric::Emd => report.average.emd,
            Metric::F1 => report.average.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub kind: TrajectoryKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MethodOutcome {
    pub fn value(&self, level: Option<u8>, metric: Metric) -> Option<f64> {
        let report = self.report.as_ref()?;
        match level {
            Some(l) => report.rows.iter().find(|r| r.level == l).map(|r| metric.of(r)),
            None => Some(metric.mean_of(report).mean),
        }
    }
}

/// Best method for one (level or mean, metric) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    /// `None` for the mean row.
    pub level: Option<u8>,
    pub metric: Metric,
    pub method: TrajectoryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<MethodOutcome>,
    pub best: Vec<BestCell>,
}

/// Index of the best value (first on ties); `None` if no method has one.
pub fn best_index(values: &[Option<f64>], metric: Metric) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        let Some(v) = *v else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                if metric.higher_is_better() {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

impl ComparisonReport {
    pub fn new(methods: Vec<MethodOutcome>) -> Self {
        let mut best = Vec::new();
        let rows = (1..=LEVELS).map(Some).chain([None]);
        for level in rows {
            for metric in Metric::ALL {
                let vals: Vec<Option<f64>> = methods.iter().map(|m| m.value(level, metric)).collect();
                if let Some(i) = best_index(&vals, metric) {
                    best.push(BestCell {
                        level,
                        metric,
                        method: methods[i].kind,
                    });
                }
            }
        }
        Self { methods, best }
    }

    pub fn is_best(&self, level: Option<u8>, metric: Metric, kind: TrajectoryKind) -> bool {
        self.best
            .iter()
            .any(|b| b.level == level && b.metric == metric && b.method == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Levels as rows, method × metric as columns; `*` marks the best value
    /// of each cell, the last row is mean ± std.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "Level");
        for m in &self.methods {
            for metric in Metric::ALL {
                let _ = write!(s, " {:>22}", format!("{} {}", m.kind.display_name(), metric.label()));
            }
        }
        s.push('\n');
        for level in (1..=LEVELS).map(Some).chain([None]) {
            let name = level.map_or("Mean±std".to_string(), |l| format!("L{l}"));
            let _ = write!(s, "{name:<10}");
            for m in &self.methods {
                for metric in Metric::ALL {
                    let star = if self.is_best(level, metric, m.kind) { "*" } else { " " };
                    let cell = match (level, &m.report) {
                        (_, None) => "failed".to_string(),
                        (Some(_), Some(_)) => match m.value(level, metric) {
                            Some(v) => format!("{}{star}", fmt_value(v, metric)),
                            None => "n/a".into(),
                        },
                        (None, Some(r)) => {
                            let ms = metric.mean_of(r);
                            format!("{}±{}{star}", fmt_value(ms.mean, metric), fmt_value(ms.std, metric))
                        }
                    };
                    let _ = write!(s, " {cell:>22}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,level,metric,value,std,best\n");
        for m in &self.methods {
            for level in (1..=LEVELS).map(Some).chain([None]) {
                for metric in Metric::ALL {
                    let lv = level.map_or("mean".to_string(), |l| l.to_string());
                    let (v, sd) = match (level, &m.report) {
                        (None, Some(r)) => {
                            let ms = metric.mean_of(r);
                            (ms.mean.to_string(), ms.std.to_string())
                        }
                        _ => (m.value(level, metric).map_or(String::new(), |v| v.to_string()), String::new()),
                    };
                    let _ = writeln!(
                        s,
                        "{},{lv},{},{v},{sd},{}",
                        m.kind.name(),
                        metric.label(),
                        self.is_best(level, metric, m.kind)
                    );
                }
            }
        }
        s
    }

    /// `comparison.json`, `comparison.txt` and `comparison.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("comparison.json", self.to_json()),
            ("comparison.txt", self.to_table()),
            ("comparison.csv", self.to_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn fmt_value(v: f64, metric: Metric) -> String {
    match metric {
        Metric::F1 => format!("{v:.4}"),
        _ => format!("{v:.2}"),
    }
}

/// One full session per trajectory kind under `dir/<kind>/`, sharing the
/// phantom and seed. A failing method is recorded and the others continue.
pub fn compare_trajectories(
    cfg: &SessionConfig,
    dir: &Path,
    mut progress: impl FnMut(TrajectoryKind, Stage, bool),
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let mut methods = Vec::new();
    for kind in TrajectoryKind::ALL {
        let mut c = cfg.clone();
        c.trajectory.kind = kind;
        let outcome = match run_scan(&c, &dir.join(kind.name()), |st, ok| progress(kind, st, ok)) {
            Ok(o) => MethodOutcome {
                kind,
                report: Some(o.report),
                error: None,
            },
            Err(e) => {
                log::error!("{} scan failed: {e}", kind.display_name());
                MethodOutcome {
                    kind,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        methods.push(outcome);
    }
    let report = ComparisonReport::new(methods);
    report.write(dir)?;
    Ok(report)
}
