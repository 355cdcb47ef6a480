use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::extrapolate::ExtrapolationReport;
use super::{CellResult, EvalConfig, Row};
use crate::error::{Error, Result};
use crate::imitation::TrainConfig;
use crate::worlds::TaskId;

/// Success matrix over (task, row) cells. Cells may be missing while a
/// matrix is still running.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: usize,
    pub base_seed: u64,
    pub epochs: usize,
    pub cells: BTreeMap<(TaskId, Row), CellResult>,
}

impl EvalReport {
    pub fn new(eval: &EvalConfig, train: &TrainConfig) -> Self {
        Self {
            trials: eval.trials,
            base_seed: eval.base_seed,
            epochs: train.epochs,
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, cell: CellResult) {
        self.cells.insert((cell.task, cell.row), cell);
    }

    pub fn cell(&self, task: TaskId, row: Row) -> Option<&CellResult> {
        self.cells.get(&(task, row))
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> = self.cells.keys().map(|(t, _)| *t).collect();
        t.dedup();
        t.sort_by_key(|t| t.name());
        t
    }

    /// Cells with tasks sorted by name and rows in ladder order.
    pub fn ordered_cells(&self) -> Vec<&CellResult> {
        let mut cells: Vec<&CellResult> = self.cells.values().collect();
        cells.sort_by_key(|c| (c.task.name(), c.row));
        cells
    }

    /// Rows present in the report, in ladder order with random last.
    pub fn rows(&self) -> Vec<Row> {
        Row::ALL
            .into_iter()
            .filter(|r| self.cells.keys().any(|(_, row)| row == r))
            .collect()
    }

    /// `matrix.tsv`: one line per task, `k/n (rate)` per row.
    pub fn matrix_text(&self) -> String {
        let rows = self.rows();
        let mut out = String::from("task");
        for r in &rows {
            out.push('\t');
            out.push_str(r.label());
        }
        out.push('\n');
        for task in self.tasks() {
            out.push_str(task.name());
            for r in &rows {
                match self.cell(task, *r) {
                    Some(c) => {
                        let _ = write!(out, "\t{}/{} ({:.4})", c.successes(), c.trials(), c.rate());
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `trials.tsv`: one line per trial with its seed.
    pub fn trials_text(&self) -> String {
        let mut out = String::from("task\tmethod\ttrial\tseed\tsuccess\tsteps\tfault\n");
        for cell in self.ordered_cells() {
            let (task, row) = (cell.task, cell.row);
            for (i, o) in cell.outcomes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{task}\t{}\t{i}\t{}\t{}\t{}\t{}",
                    row.label(),
                    o.seed,
                    u8::from(o.success),
                    o.steps,
                    o.fault.as_deref().unwrap_or("-").replace(['\t', '\n'], " ")
                );
            }
        }
        out
    }

    /// `cells.tsv`: training provenance per cell.
    pub fn cells_text(&self) -> String {
        let mut out = format!(
            "# trials {} base_seed {} epochs {}\ntask\tmethod\tepochs\tdemos\tfinal_loss\tchecksum\n",
            self.trials, self.base_seed, self.epochs
        );
        for cell in self.ordered_cells() {
            let (task, row) = (cell.task, cell.row);
            match &cell.train {
                Some(t) => {
                    let _ = writeln!(
                        out,
                        "{task}\t{}\t{}\t{}\t{:.9}\t{}",
                        row.label(),
                        t.epochs,
                        t.demos,
                        t.final_loss,
                        t.checksum
                    );
                }
                None => {
                    let _ = writeln!(out, "{task}\t{}\t-\t-\t-\t-", row.label());
                }
            }
        }
        out
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write `matrix.tsv`, `trials.tsv` and `cells.tsv` under `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("matrix.tsv"), &report.matrix_text())?;
    write_atomic(&dir.join("trials.tsv"), &report.trials_text())?;
    write_atomic(&dir.join("cells.tsv"), &report.cells_text())
}

/// Write `extrapolation.tsv` under `dir`.
pub fn emit_extrapolation(report: &ExtrapolationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("extrapolation.tsv"), &report.to_text())
}
