use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CURVES_HEADER: &str = "run,step,metric,value";

/// A CSV with a `step` column, values kept as the original text.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl MetricsTable {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
        let step_col = columns.iter().position(|c| c == "step").ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: "no `step` column".into(),
        })?;
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(str::to_string).collect();
            let bad = |detail: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                detail: detail.to_string(),
            };
            if fields.len() != columns.len() {
                return Err(bad("wrong number of fields"));
            }
            let step = fields[step_col].parse().map_err(|_| bad("step is not an integer"))?;
            rows.push((step, fields));
        }
        Ok(MetricsTable { columns, rows })
    }

    pub fn value(&self, step: usize, metric: &str) -> Option<&str> {
        let col = self.columns.iter().position(|c| c == metric)?;
        self.rows.iter().find(|(s, _)| *s == step).map(|(_, f)| f[col].as_str())
    }

    pub fn steps(&self) -> BTreeSet<usize> {
        self.rows.iter().map(|(s, _)| *s).collect()
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsTable::parse(&text, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurveRow {
    pub run: String,
    pub step: usize,
    pub metric: String,
    pub value: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CurveExport {
    pub rows: Vec<CurveRow>,
    pub warnings: Vec<String>,
}

/// Long-format rows for `metrics` at the steps every run shares,
/// optionally restricted to `step_grid`. Values are copied verbatim.
pub fn curve_export(runs: &[(String, MetricsTable)], metrics: &[&str], step_grid: Option<&[usize]>) -> Result<CurveExport> {
    let mut export = CurveExport::default();
    for (run, table) in runs {
        for m in metrics {
            if !table.columns.iter().any(|c| c == m) {
                return Err(Error::domain("curve_export", format!("run {run} has no `{m}` column")));
            }
        }
    }
    let mut common: Option<BTreeSet<usize>> = None;
    for (_, table) in runs {
        let steps = table.steps();
        common = Some(match common {
            None => steps,
            Some(c) => c.intersection(&steps).copied().collect(),
        });
    }
    let mut common = common.unwrap_or_default();
    if runs.iter().any(|(_, t)| t.steps() != common) {
        export
            .warnings
            .push(format!("step grids differ between runs; keeping the {} shared steps", common.len()));
    }
    if let Some(grid) = step_grid {
        let wanted: BTreeSet<usize> = grid.iter().copied().collect();
        let missing = wanted.difference(&common).count();
        if missing > 0 {
            export.warnings.push(format!("{missing} requested steps are not present in every run"));
        }
        common = common.intersection(&wanted).copied().collect();
    }
    if common.is_empty() {
        export.warnings.push("no step is shared by all runs; the export is empty".into());
    }
    for (run, table) in runs {
        for &step in &common {
            for m in metrics {
                export.rows.push(CurveRow {
                    run: run.clone(),
                    step,
                    metric: m.to_string(),
                    value: table.value(step, m).expect("step and column present").to_string(),
                });
            }
        }
    }
    Ok(export)
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut out = format!("{CURVES_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.run, r.step, r.metric, r.value));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
