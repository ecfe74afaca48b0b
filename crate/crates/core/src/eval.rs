//! Metrics, split evaluation and the modality x Stim Emo ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{Modality, ProcessedTrial, TRAITS};
use crate::model::{ModelConfig, MuMTAffect};
use crate::train::{predict, train_phases, EpochHook, Phase, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    Length { preds: usize, labels: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("R² is undefined: targets have zero variance")]
    UndefinedVariance,
    #[error("R² needs at least two samples, got {0}")]
    TooFew(usize),
    #[error("class {class} out of range for {n} classes")]
    Class { class: usize, n: usize },
    #[error("ablation cell {0} enables no modality")]
    EmptyCell(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Scores {
    #[serde(rename = "macro")]
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// Classes absent from both predictions and labels; their F1 is 0.
    pub undefined: Vec<usize>,
}

/// Per-class `2TP / (2TP + FP + FN)` and their unweighted mean.
pub fn f1_scores(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<F1Scores> {
    if preds.len() != labels.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("prediction list"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        for c in [p, l] {
            if c >= n_classes {
                return Err(EvalError::Class { class: c, n: n_classes });
            }
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let mut undefined = Vec::new();
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                undefined.push(c);
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .collect();
    Ok(F1Scores {
        macro_f1: per_class.iter().sum::<f64>() / n_classes as f64,
        per_class,
        undefined,
    })
}

/// `1 - SS_res / SS_tot`.
pub fn r2_score(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            labels: targets.len(),
        });
    }
    if targets.len() < 2 {
        return Err(EvalError::TooFew(targets.len()));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::UndefinedVariance);
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` where the split's targets have no variance.
    pub r2: BTreeMap<String, Option<f64>>,
    pub valence: F1Scores,
    pub arousal: F1Scores,
    pub avg_f1: f64,
    pub n_trials: usize,
    pub enabled_modalities: Vec<Modality>,
    pub stim_emo: bool,
}

/// Metrics of `model` on `trials`, computed in eval mode.
pub fn evaluate_model(model: &MuMTAffect, trials: &[&ProcessedTrial], batch_size: usize) -> Result<MetricsReport> {
    if trials.is_empty() {
        return Err(EvalError::Empty("evaluation split"));
    }
    let [v, a, p] = predict(model, trials, batch_size)?;
    let classes = |t: &crate::tensor::Tensor<f32>| t.data().chunks(3).map(argmax).collect::<Vec<_>>();
    let valence = f1_scores(&classes(&v), &trials.iter().map(|t| t.valence).collect::<Vec<_>>(), 3)?;
    let arousal = f1_scores(&classes(&a), &trials.iter().map(|t| t.arousal).collect::<Vec<_>>(), 3)?;
    let mut r2 = BTreeMap::new();
    for (k, name) in TRAITS.iter().enumerate() {
        let preds: Vec<f64> = p.data().chunks(5).map(|r| f64::from(r[k])).collect();
        let targets: Vec<f64> = trials.iter().map(|t| f64::from(t.personality[k])).collect();
        let score = match r2_score(&preds, &targets) {
            Ok(s) => Some(s),
            Err(EvalError::UndefinedVariance | EvalError::TooFew(_)) => None,
            Err(e) => return Err(e),
        };
        r2.insert((*name).to_string(), score);
    }
    Ok(MetricsReport {
        r2,
        avg_f1: (valence.macro_f1 + arousal.macro_f1) / 2.0,
        valence,
        arousal,
        n_trials: trials.len(),
        enabled_modalities: model.cfg.enabled_modalities.clone(),
        stim_emo: model.cfg.use_stim_emo,
    })
}

/// One ablation configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub modalities: Vec<Modality>,
    pub stim_emo: bool,
    /// Trains every phase at alpha = 0 (emotion only).
    pub emotion_only: bool,
}

/// Full set and each leave-one-out, each with Stim Emo on, then off.
pub fn default_cells() -> Vec<Cell> {
    let mut sets = vec![Modality::ALL.to_vec()];
    for drop in Modality::ALL {
        sets.push(Modality::ALL.into_iter().filter(|&m| m != drop).collect());
    }
    sets.into_iter()
        .flat_map(|modalities| {
            [true, false].map(|stim_emo| Cell {
                modalities: modalities.clone(),
                stim_emo,
                emotion_only: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: Cell,
    pub report: MetricsReport,
}

pub struct GridData<'a> {
    pub train: &'a [&'a ProcessedTrial],
    pub val: &'a [&'a ProcessedTrial],
    pub test: &'a [&'a ProcessedTrial],
}

/// Trains and evaluates one cell from scratch.
pub fn run_cell(
    data: &GridData<'_>,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cell: &Cell,
    model_seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<(MuMTAffect, MetricsReport)> {
    let mut cfg = base.clone();
    cfg.enabled_modalities = Modality::ALL
        .into_iter()
        .filter(|m| cell.modalities.contains(m))
        .collect();
    cfg.use_stim_emo = cell.stim_emo;
    let mut tc = train_cfg.clone();
    if cell.emotion_only {
        for p in Phase::ALL {
            tc.phase_mut(p).alpha = 0.0;
        }
    }
    let mut model = MuMTAffect::new(cfg, model_seed).map_err(TrainError::from)?;
    model.fit_normalizer(data.train);
    train_phases(&mut model, data.train, data.val, &Phase::ALL, &tc, hook)?;
    let report = evaluate_model(&model, data.test, tc.batch_size)?;
    Ok((model, report))
}

/// Runs every cell with the same seeds and splits, in the given order.
pub fn ablation_grid(
    data: &GridData<'_>,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cells: &[Cell],
    model_seed: u64,
    on_row: &mut dyn FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    if let Some(i) = cells.iter().position(|c| c.modalities.is_empty()) {
        return Err(EvalError::EmptyCell(i));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let (_, report) = run_cell(data, base, train_cfg, cell, model_seed, &mut |_, _| false)?;
        let row = GridRow {
            cell: cell.clone(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const GRID_HEADER: &str = "stim_emo,eye,pupil,au,gsr,O,C,E,A,N,valence_f1_macro,arousal_f1_macro,avg_f1";

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for r in rows {
        let flag = |m| u8::from(r.cell.modalities.contains(&m));
        let _ = write!(
            out,
            "{},{},{},{},{}",
            if r.cell.stim_emo { "yes" } else { "no" },
            flag(Modality::Eye),
            flag(Modality::Pupil),
            flag(Modality::Au),
            flag(Modality::Gsr)
        );
        for t in TRAITS {
            let _ = write!(out, ",{}", num(r.report.r2.get(t).copied().flatten()));
        }
        let _ = writeln!(
            out,
            ",{:.4},{:.4},{:.4}",
            r.report.valence.macro_f1, r.report.arousal.macro_f1, r.report.avg_f1
        );
    }
    out
}
