//! Architecture x loss x scheme experiment grid and its tabular reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitScheme};
use crate::error::{Error, Result};
use crate::eval::{evaluate, select, EvalMode, EvalReport, ModelPredictor};
use crate::metrics::LossCombo;
use crate::net::{HeadKind, ModelConfig};
use crate::seed;
use crate::train::{train, write_text, TrainConfig};

pub const CSV_HEADER: &str =
    "scheme,mode,head,loss,pos_l2_mean,pos_l2_std,rot_l2_mean,rot_l2_std,de_mean,de_std,ce_mean,ce_std,n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub heads: Vec<HeadKind>,
    pub losses: Vec<LossCombo>,
    pub schemes: Vec<SplitScheme>,
    pub model: ModelConfig,
    /// Base training settings; loss, split and seed are set per cell.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            heads: HeadKind::ALL.to_vec(),
            losses: LossCombo::ALL.to_vec(),
            schemes: vec![SplitScheme::default()],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub scheme: SplitScheme,
    pub head: HeadKind,
    pub loss: LossCombo,
}

impl GridCell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.scheme, self.head, self.loss)
    }

    /// Output directory relative to the grid root.
    pub fn dir(&self) -> PathBuf {
        PathBuf::from(self.scheme.to_string().replace([':', '/'], "-")).join(format!("{}-{}", self.head, self.loss))
    }

    /// Model and training configuration with seeds derived from the cell label.
    pub fn configs(&self, grid: &GridConfig) -> (ModelConfig, TrainConfig) {
        let label = self.label();
        let model = ModelConfig {
            head: self.head,
            seed: seed::derive(grid.seed, &label, 0),
            ..grid.model.clone()
        };
        let train = TrainConfig {
            loss: self.loss,
            split: self.scheme,
            seed: seed::derive(grid.seed, &label, 1),
            ..grid.train.clone()
        };
        (model, train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: GridCell,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scheme,
                r.mode,
                r.head,
                r.loss,
                r.pos_l2.mean,
                r.pos_l2.std,
                r.rot_l2.mean,
                r.rot_l2.std,
                r.de.mean,
                r.de.std,
                r.ce.mean,
                r.ce.std,
                r.n
            ));
        }
        out
    }

    /// One table per scheme and mode: rows are architecture x loss, columns
    /// the position and rotation errors as mean ± std.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Results\n");
        let mut sections: Vec<(String, EvalMode)> = Vec::new();
        for r in &self.rows {
            if !sections.contains(&(r.scheme.clone(), r.mode)) {
                sections.push((r.scheme.clone(), r.mode));
            }
        }
        for (scheme, mode) in sections {
            out.push_str(&format!("\n## {scheme}, {mode}\n\n"));
            out.push_str("| Architecture | Loss | Position L2 | Rotation L2 | DE | CE | n |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for r in self.rows.iter().filter(|r| r.scheme == scheme && r.mode == mode) {
                let pm = |s: &crate::eval::Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} |\n",
                    r.head,
                    r.loss,
                    pm(&r.pos_l2),
                    pm(&r.rot_l2),
                    pm(&r.de),
                    pm(&r.ce),
                    r.n
                ));
            }
        }
        if !self.failures.is_empty() {
            out.push_str("\n## Failed cells\n\n");
            for f in &self.failures {
                out.push_str(&format!("- {}: {}\n", f.cell.label(), f.error));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("report.csv"), &self.to_csv())?;
        write_text(&dir.join("report.md"), &self.to_markdown())?;
        write_text(&dir.join("report.json"), &crate::json::to_pretty(self)?)
    }
}

pub fn cells(cfg: &GridConfig) -> Vec<GridCell> {
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        for &head in &cfg.heads {
            for &loss in &cfg.losses {
                out.push(GridCell { scheme, head, loss });
            }
        }
    }
    out
}

/// Trains and evaluates one cell in both modes.
pub fn run_cell(dataset: &Dataset, grid: &GridConfig, cell: &GridCell, out_dir: &Path) -> Result<Vec<EvalReport>> {
    let (model, train_cfg) = cell.configs(grid);
    let trained = train(dataset, &model, &train_cfg, Some(&out_dir.join(cell.dir())))?;
    let predictor = ModelPredictor::from_trained(&trained)?;
    let val = select(dataset, &trained.record.val_trajectories)?;
    EvalMode::ALL
        .into_iter()
        .map(|mode| {
            Ok(evaluate(&predictor, &val, mode)?.labelled(&cell.scheme.to_string(), cell.head.name(), cell.loss.name()))
        })
        .collect()
}

/// Runs every cell (concurrently where threads allow), writes per-cell
/// artifacts and the report bundle under `out_dir`. Failed cells are recorded
/// and the grid continues.
pub fn run_experiment_grid(dataset: &Dataset, cfg: &GridConfig, out_dir: &Path) -> Result<GridReport> {
    if cfg.heads.is_empty() || cfg.losses.is_empty() || cfg.schemes.is_empty() {
        return Err(Error::Config("grid needs at least one head, loss and scheme".into()));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let cells = cells(cfg);
    let results: Vec<Result<Vec<EvalReport>>> = cells
        .par_iter()
        .map(|cell| {
            log::info!("grid cell {}", cell.label());
            run_cell(dataset, cfg, cell, out_dir)
        })
        .collect();
    let mut per_cell = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(reports) => per_cell.push(reports),
            Err(e) => {
                log::warn!("grid cell {} failed: {e}", cell.label());
                failures.push(CellFailure {
                    cell: *cell,
                    error: e.to_string(),
                });
            }
        }
    }
    // rows grouped by scheme, then mode, then architecture x loss
    let mut rows = Vec::new();
    for scheme in &cfg.schemes {
        let scheme = scheme.to_string();
        for mode in EvalMode::ALL {
            for reports in &per_cell {
                rows.extend(
                    reports
                        .iter()
                        .filter(|r| r.mode == mode && r.scheme == scheme)
                        .cloned(),
                );
            }
        }
    }
    let report = GridReport { rows, failures };
    report.write(out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_twelve_cells() {
        let c = cells(&GridConfig::default());
        assert_eq!(c.len(), 12);
        let dirs: std::collections::HashSet<_> = c.iter().map(GridCell::dir).collect();
        assert_eq!(dirs.len(), 12);
    }

    #[test]
    fn cell_seeds_differ() {
        let g = GridConfig::default();
        let c = cells(&g);
        let (m0, t0) = c[0].configs(&g);
        let (m1, t1) = c[1].configs(&g);
        assert_ne!(m0.seed, m1.seed);
        assert_ne!(t0.seed, t1.seed);
        assert_eq!(t1.loss, c[1].loss);
    }

    #[test]
    fn csv_header_column_order() {
        let r = GridReport {
            rows: vec![],
            failures: vec![],
        };
        assert_eq!(r.to_csv().lines().next().unwrap(), CSV_HEADER);
    }
}
