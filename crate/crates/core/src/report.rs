//! Filtering curves, 2-D feature projections and the ablation harness.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::experiment::ExperimentConfig;
use crate::layout::LayoutMode;
use crate::loss::AssignmentSource;
use crate::trainer::{adapt, evaluate, train_source, AdaptationTrace, Components, Metric, TrainConfig};

/// `(step, filtered fraction)` at every pseudo-label refresh.
pub fn filtering_curve(trace: &AdaptationTrace) -> Vec<(usize, f64)> {
    trace.refreshes.iter().map(|r| (r.step, r.filtered_fraction)).collect()
}

/// Mean per-step filtered fraction over the steps in `[start, end)`, given as
/// fractions of the run length.
pub fn mean_filtered_fraction(trace: &AdaptationTrace, start: f64, end: f64) -> Option<f64> {
    let n = trace.steps.len();
    let lo = (start * n as f64).floor() as usize;
    let hi = ((end * n as f64).ceil() as usize).min(n);
    if hi <= lo {
        return None;
    }
    let window = &trace.steps[lo..hi];
    Some(window.iter().map(|s| s.filtered_fraction).sum::<f64>() / window.len() as f64)
}

/// Mean store-level filtered fraction over the refreshes whose step lies in
/// `[start, end)`, given as fractions of the run length.
pub fn mean_refresh_filtered_fraction(trace: &AdaptationTrace, start: f64, end: f64) -> Option<f64> {
    let n = trace.steps.len() as f64;
    let (lo, hi) = (start * n, end * n);
    let window: Vec<f64> = trace
        .refreshes
        .iter()
        .filter(|r| (lo..hi).contains(&(r.step as f64)))
        .map(|r| r.filtered_fraction)
        .collect();
    (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64)
}

pub fn write_series_csv(path: &Path, header: [&str; 2], series: &[(usize, f64)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for (x, y) in series {
        writer.write_record([x.to_string(), y.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Samples projected onto their two leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Projection {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["pc1", "pc2", "label"])?;
        for (row, label) in self.coords.outer_iter().zip(&self.labels) {
            writer.write_record([row[0].to_string(), row[1].to_string(), label.to_string()])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Centered principal-component projection to two dimensions.
///
/// Components are ordered by decreasing variance with ties going to the lower
/// eigenvector index; each axis is signed so that its largest-magnitude
/// loading is positive. Without any variance the first two input axes are used.
pub fn project_features(features: ArrayView2<f64>, labels: &[usize]) -> Result<Projection> {
    let (n, d) = features.dim();
    if n < 3 || d < 2 {
        return Err(UfalError::InvalidArgument(format!(
            "projection needs >= 3 samples of dimension >= 2, got {n} x {d}"
        )));
    }
    if labels.len() != n {
        return Err(UfalError::Shape { expected: n, got: labels.len() });
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("n >= 3");
    let centered = &features - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = if eig.eigenvalues[order[0]] <= f64::EPSILON * cov.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE) {
        (0..2).map(|k| (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect()).collect()
    } else {
        order[..2]
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect()
    };
    let mut coords = Array2::zeros((n, 2));
    for (i, row) in centered.outer_iter().enumerate() {
        for (k, axis) in axes.iter().enumerate() {
            coords[[i, k]] = row.iter().zip(axis).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Projection {
        coords,
        labels: labels.to_vec(),
    })
}

/// Configurations of the ablation table, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    SourceOnly,
    BisSourceFirst,
    BisRandom,
    BisSblRandomOrder,
    BisTargetFirst,
    BisSbl,
    BisSblUbf,
    BisSblUfl,
    BisSblUflUbfNoUfm,
    Ufal,
}

impl AblationRow {
    pub const ALL: [AblationRow; 10] = [
        AblationRow::SourceOnly,
        AblationRow::BisSourceFirst,
        AblationRow::BisRandom,
        AblationRow::BisSblRandomOrder,
        AblationRow::BisTargetFirst,
        AblationRow::BisSbl,
        AblationRow::BisSblUbf,
        AblationRow::BisSblUfl,
        AblationRow::BisSblUflUbfNoUfm,
        AblationRow::Ufal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::SourceOnly => "Source only",
            AblationRow::BisSourceFirst => "BIS + source first",
            AblationRow::BisRandom => "BIS + random",
            AblationRow::BisSblRandomOrder => "BIS + SBL (random order)",
            AblationRow::BisTargetFirst => "BIS + target first",
            AblationRow::BisSbl => "BIS + SBL",
            AblationRow::BisSblUbf => "BIS + SBL + UBF",
            AblationRow::BisSblUfl => "BIS + SBL + UFL",
            AblationRow::BisSblUflUbfNoUfm => "BIS + SBL + UFL + UBF (no UFM)",
            AblationRow::Ufal => "BIS + SBL + UFL + UBF (UFAL)",
        }
    }

    pub fn id(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .expect("unit variant")
    }

    pub fn from_id(id: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(id.to_string()))
            .map_err(|_| UfalError::InvalidArgument(format!("unknown ablation row {id:?}")))
    }

    /// Adaptation settings for this row; `None` for the source-only row.
    pub fn configure(self, base: &TrainConfig) -> Option<TrainConfig> {
        let (layout, ufl, ubf, assignment) = match self {
            AblationRow::SourceOnly => return None,
            AblationRow::BisSourceFirst => (LayoutMode::SourceFirst, false, false, AssignmentSource::Resampled),
            AblationRow::BisRandom => (LayoutMode::Random, false, false, AssignmentSource::Resampled),
            AblationRow::BisSblRandomOrder => (LayoutMode::SblRandomOrder, false, false, AssignmentSource::Resampled),
            AblationRow::BisTargetFirst => (LayoutMode::TargetFirst, false, false, AssignmentSource::Resampled),
            AblationRow::BisSbl => (LayoutMode::Sbl, false, false, AssignmentSource::Resampled),
            AblationRow::BisSblUbf => (LayoutMode::Sbl, false, true, AssignmentSource::Resampled),
            AblationRow::BisSblUfl => (LayoutMode::Sbl, true, false, AssignmentSource::Resampled),
            AblationRow::BisSblUflUbfNoUfm => (LayoutMode::Sbl, true, true, AssignmentSource::PseudoLabel),
            AblationRow::Ufal => (LayoutMode::Sbl, true, true, AssignmentSource::Resampled),
        };
        Some(TrainConfig {
            layout_mode: layout,
            components: Components { ufl, ubf, assignment },
            ..base.clone()
        })
    }
}

/// One configuration evaluated over every seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    /// Target accuracy per seed; `None` for a failed run.
    pub accuracies: Vec<Option<f64>>,
    pub traces: Vec<Option<AdaptationTrace>>,
}

impl AblationResult {
    pub fn mean_accuracy(&self) -> Option<f64> {
        let ok: Vec<f64> = self.accuracies.iter().flatten().copied().collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn failed(&self) -> bool {
        self.accuracies.iter().any(Option::is_none)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    pub fn get(&self, row: AblationRow) -> Option<&AblationResult> {
        self.results.iter().find(|r| r.row == row)
    }

    pub fn any_failed(&self) -> bool {
        self.results.iter().any(AblationResult::failed)
    }

    /// `configuration,seed_<s>...,mean` rows; failed runs are written as `failed`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["configuration".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.push("mean".to_string());
        writer.write_record(&header)?;
        for r in &self.results {
            let mut rec = vec![r.row.name().to_string()];
            rec.extend(r.accuracies.iter().map(|a| a.map_or("failed".to_string(), |v| v.to_string())));
            rec.push(r.mean_accuracy().map_or("failed".to_string(), |v| v.to_string()));
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let base = self.get(AblationRow::SourceOnly).and_then(AblationResult::mean_accuracy);
        let mut out = format!("{:<34} {:>9} {:>10}\n", "Method", "Accuracy", "Rel. Gain");
        for r in &self.results {
            match r.mean_accuracy() {
                Some(acc) => {
                    let gain = base.map_or(String::from("-"), |b| format!("{:+.1}", 100.0 * (acc - b)));
                    let _ = writeln!(out, "{:<34} {:>9.1} {:>10}", r.row.name(), 100.0 * acc, gain);
                }
                None => {
                    let _ = writeln!(out, "{:<34} {:>9} {:>10}", r.row.name(), "failed", "-");
                }
            }
        }
        out
    }
}

/// Trains every row on every seed. Within a seed all rows start from the
/// same source-trained model; target labels are only used for scoring.
pub fn run_ablation(config: &ExperimentConfig, rows: &[AblationRow], seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| AblationRow::ALL.iter().position(|a| a == r));
    rows.dedup();
    let mut results: Vec<AblationResult> = rows
        .iter()
        .map(|&row| AblationResult {
            row,
            accuracies: Vec::with_capacity(seeds.len()),
            traces: Vec::with_capacity(seeds.len()),
        })
        .collect();
    for &seed in seeds {
        let run = config.with_seed(seed);
        let (source, target) = run.datasets()?;
        let unlabeled = target.unlabeled();
        let mut pretrained = run.new_model(&source)?;
        let source_ok = match train_source(&mut pretrained, &source, &run.train) {
            Ok(_) => true,
            Err(e) => {
                log::error!("seed {seed}: source training failed: {e}");
                false
            }
        };
        for result in &mut results {
            if !source_ok {
                result.accuracies.push(None);
                result.traces.push(None);
                continue;
            }
            let mut model = pretrained.clone();
            let trace = match result.row.configure(&run.train) {
                None => Ok(None),
                Some(train) => adapt(&mut model, &source, &unlabeled, &train, Some(&target)).map(Some),
            };
            match trace.and_then(|t| Ok((evaluate(&model, &target, Metric::Accuracy)?, t))) {
                Ok((acc, t)) => {
                    result.accuracies.push(Some(acc));
                    result.traces.push(t);
                }
                Err(e) => {
                    log::error!("seed {seed}, {}: {e}", result.row.name());
                    result.accuracies.push(None);
                    result.traces.push(None);
                }
            }
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        results,
    })
}
