use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use anyhow::{Context, Result};
use dagcd_core::analysis::{Cell, ColumnKind, ReportFormat, ReportTable};
use dagcd_core::qa::{parse_qa_dataset, EvalRecord};
use serde::{Deserialize, Serialize};

use super::{usage, write_report};
use crate::config::{FileConfig, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// One JSON object per line with `id` and `prediction`.
    #[arg(long)]
    predictions: PathBuf,
    /// QA dataset, one JSON object per line with `id`, `context`, `question`, `answers`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct Prediction {
    id: String,
    prediction: String,
    #[serde(default)]
    diagnostics: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    predictions: String,
    dataset: String,
}

fn name(p: &std::path::Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn run(args: Args, cfg: &FileConfig) -> Result<()> {
    let resolved = Resolved {
        predictions: name(&args.predictions),
        dataset: name(&args.dataset),
    };
    let mut run = Run::start("eval", cfg.out_dir(args.out.clone()), &resolved)?;
    let dataset_text =
        String::from_utf8(run.read_input(&args.dataset)?).context("dataset is not UTF-8")?;
    let dataset = parse_qa_dataset(&dataset_text)?;
    let pred_text = String::from_utf8(run.read_input(&args.predictions)?)
        .context("predictions are not UTF-8")?;

    let mut preds: BTreeMap<String, Prediction> = BTreeMap::new();
    for (i, line) in pred_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| usage(format!("{}:{}: {e}", args.predictions.display(), i + 1)))?;
        if preds.contains_key(&p.id) {
            return Err(usage(format!("prediction id {:?} appears twice", p.id)));
        }
        preds.insert(p.id.clone(), p);
    }
    if preds.is_empty() {
        return Err(usage("predictions file is empty"));
    }
    let gold_ids: BTreeSet<&str> = dataset.examples.iter().map(|e| e.id.as_str()).collect();
    let missing: Vec<&str> = gold_ids
        .iter()
        .copied()
        .filter(|id| !preds.contains_key(*id))
        .collect();
    let unknown: Vec<&str> = preds
        .keys()
        .map(String::as_str)
        .filter(|id| !gold_ids.contains(id))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(usage(format!(
            "id mismatch: no prediction for [{}]; not in dataset [{}]",
            missing.join(", "),
            unknown.join(", ")
        )));
    }

    let records = dataset
        .examples
        .iter()
        .map(|ex| {
            let p = &preds[&ex.id];
            EvalRecord::score(&ex.id, &p.prediction, &ex.answers, p.diagnostics.clone())
        })
        .collect::<dagcd_core::Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let em = 100.0 * records.iter().map(|r| r.em as f64).sum::<f64>() / n;
    let f1 = 100.0 * records.iter().map(|r| r.f1).sum::<f64>() / n;

    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    run.write("eval_records.jsonl", lines)?;
    let mut table = ReportTable::new(
        "qa_eval",
        &[
            ("n", ColumnKind::Int),
            ("em", ColumnKind::Real),
            ("f1", ColumnKind::Real),
        ],
    );
    table.push_row(vec![
        Cell::Int(records.len() as i64),
        Cell::Real(em),
        Cell::Real(f1),
    ])?;
    let table = table
        .with_provenance("dataset", &resolved.dataset)
        .with_provenance("predictions", &resolved.predictions)
        .with_note("em and f1 are percentages");
    write_report(&mut run, "eval_report", &table, ReportFormat::Csv)?;
    run.finish()?;
    println!("EM {em:.2} F1 {f1:.2} (n = {})", records.len());
    Ok(())
}
