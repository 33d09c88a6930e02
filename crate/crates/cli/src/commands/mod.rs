pub mod analyze;
pub mod decode;
pub mod demo;
pub mod eval;
pub mod train;

use std::path::Path;

use anyhow::Result;
use dagcd_core::analysis::{render_report, ReportFormat, ReportTable};
use dagcd_core::detector::{
    evaluate, project_examples, select_top_heads, train as fit, train_with_cv, CvReport,
    Evaluation, LabeledExample, TrainConfig, UtilizationDetector,
};
use dagcd_core::features::ModelGeometry;
use dagcd_core::toy::Family;
use serde::Serialize;

use crate::config::Run;
use crate::UsageError;

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn parse_family(s: &str) -> Result<Family> {
    s.parse()
        .map_err(|_| usage(format!("unknown family {s:?}; expected A or B")))
}

pub fn geometry(layers: usize, heads: usize) -> Result<ModelGeometry> {
    if layers == 0 || heads == 0 {
        return Err(usage("layers and heads must be positive"));
    }
    Ok(ModelGeometry::new(layers, heads))
}

pub fn write_report(
    run: &mut Run,
    stem: &str,
    table: &ReportTable,
    format: ReportFormat,
) -> Result<()> {
    let ext = match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    };
    run.write(&format!("{stem}.{ext}"), render_report(table, format)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub heads: usize,
    pub l2_strength: f64,
    pub converged: bool,
    pub cv: Option<CvReport>,
}

/// Fits on all heads, then (for `0 < top_heads < all`) refits on the
/// `top_heads` heads with the largest |coefficient|.
pub fn fit_detector(
    train_set: &[LabeledExample],
    geometry: ModelGeometry,
    config: &TrainConfig,
    fixed_l2: Option<f64>,
    top_heads: usize,
) -> Result<(UtilizationDetector, Vec<FitSummary>)> {
    let fit_once = |examples: &[LabeledExample]| -> Result<(UtilizationDetector, FitSummary)> {
        let (outcome, cv) = match fixed_l2 {
            Some(l2) => {
                let cfg = TrainConfig {
                    l2_strength: l2,
                    ..config.clone()
                };
                (fit(examples, geometry, &cfg)?, None)
            }
            None => {
                let (o, cv) = train_with_cv(examples, geometry, config)?;
                (o, Some(cv))
            }
        };
        let summary = FitSummary {
            heads: outcome.detector.head_order.len(),
            l2_strength: outcome.detector.training.l2_strength,
            converged: outcome.converged(),
            cv,
        };
        Ok((outcome.detector, summary))
    };
    let (full, s) = fit_once(train_set)?;
    let mut summaries = vec![s];
    let n = full.head_order.len();
    if top_heads == 0 || top_heads >= n {
        return Ok((full, summaries));
    }
    let heads = select_top_heads(&full, top_heads)?;
    let (det, s) = fit_once(&project_examples(train_set, &heads)?)?;
    summaries.push(s);
    Ok((det, summaries))
}

pub fn evaluate_projected(
    det: &UtilizationDetector,
    examples: &[LabeledExample],
) -> Result<Evaluation> {
    Ok(evaluate(
        det,
        &project_examples(examples, &det.head_order)?,
    )?)
}

pub fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
