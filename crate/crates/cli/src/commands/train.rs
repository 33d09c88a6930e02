use std::path::PathBuf;

use anyhow::{Context, Result};
use dagcd_core::analysis::{Cell, ColumnKind, ReportFormat, ReportTable};
use dagcd_core::detector::{
    build_training_set, stratified_folds, DecodingRecord, LabeledExample, LabelingRule,
    TrainConfig, DEFAULT_THRESHOLD,
};
use dagcd_core::features::{context_mask, ModelGeometry};
use dagcd_core::toy::{synth_attention_dataset, SynthConfig};
use dagcd_core::trace::TraceFile;
use serde::Serialize;

use super::{
    evaluate_projected, file_label, fit_detector, geometry, parse_family, usage, write_report,
    FitSummary,
};
use crate::config::{pick, FileConfig, Run};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Labeled examples, one JSON object per line.
    #[arg(long, conflicts_with = "traces")]
    examples: Option<PathBuf>,
    /// Recorded traces; context tokens matching the gold answer ids at the
    /// first step are positives.
    #[arg(long, num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Synthetic generator family (A or B) when no file source is given.
    #[arg(long)]
    family: Option<String>,
    /// Synthetic training examples.
    #[arg(long)]
    n: Option<usize>,
    /// Family of the synthetic held-out set; defaults to --family.
    #[arg(long)]
    eval_family: Option<String>,
    #[arg(long)]
    eval_n: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the K heads with the largest |coefficient| and refit; 0 keeps all.
    #[arg(long)]
    top_heads: Option<usize>,
    /// Fixed L2 strength; cross-validated over a grid when omitted.
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Negatives sampled per positive when labeling traces.
    #[arg(long, default_value_t = 1.0)]
    negative_ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    source: String,
    family: Option<String>,
    eval_family: Option<String>,
    n: Option<usize>,
    eval_n: Option<usize>,
    geometry: ModelGeometry,
    top_heads: usize,
    l2: Option<f64>,
    threshold: f64,
    negative_ratio: f64,
    seed: u64,
}

fn read_examples(run: &mut Run, path: &std::path::Path) -> Result<Vec<LabeledExample>> {
    let bytes = run.read_input(path)?;
    let text = String::from_utf8(bytes).context("examples file is not UTF-8")?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Splits off one stratified fifth as the held-out set.
fn holdout(examples: Vec<LabeledExample>, seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let folds = stratified_folds(&labels, 5, seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (e, f) in examples.into_iter().zip(folds) {
        if f == 0 {
            eval.push(e)
        } else {
            train.push(e)
        }
    }
    (train, eval)
}

pub fn run(args: Args, cfg: &FileConfig) -> Result<()> {
    let seed = pick(args.seed, cfg.seed, 0);
    let top_heads = pick(args.top_heads, cfg.top_heads, 10);
    let threshold = pick(args.threshold, cfg.threshold, DEFAULT_THRESHOLD);
    let l2 = args.l2.or(cfg.l2);
    let out = cfg.out_dir(args.out.clone());

    let synthetic = args.examples.is_none() && args.traces.is_empty();
    let family_name = pick(args.family.clone(), cfg.family.clone(), "A".into());
    let eval_family_name = args
        .eval_family
        .clone()
        .unwrap_or_else(|| family_name.clone());
    let mut geom = geometry(
        pick(args.layers, cfg.layers, 4),
        pick(args.heads, cfg.heads, 4),
    )?;
    let n = pick(args.n, cfg.n, 100);
    let eval_n = pick(args.eval_n, cfg.eval_n, 1000);

    // trace geometry is fixed by the recordings
    let traces: Vec<TraceFile> = args
        .traces
        .iter()
        .map(|p| Ok(dagcd_core::trace::read_trace(p)?))
        .collect::<Result<_>>()?;
    if let Some(t) = traces.first() {
        geom = t.geometry;
        if let Some(bad) = traces.iter().find(|x| x.geometry != geom) {
            return Err(usage(format!(
                "trace geometries differ: {} vs {}",
                geom, bad.geometry
            )));
        }
    }

    let resolved = Resolved {
        source: if synthetic {
            "synthetic".into()
        } else if args.examples.is_some() {
            "examples".into()
        } else {
            "traces".into()
        },
        family: synthetic.then(|| family_name.clone()),
        eval_family: synthetic.then(|| eval_family_name.clone()),
        n: synthetic.then_some(n),
        eval_n: synthetic.then_some(eval_n),
        geometry: geom,
        top_heads,
        l2,
        threshold,
        negative_ratio: args.negative_ratio,
        seed,
    };
    let mut run = Run::start("train-detector", out, &resolved)?;
    run.seed("train", seed);

    let (train_set, eval_set) = if synthetic {
        let synth = SynthConfig::for_geometry(geom);
        let eval_seed = seed.wrapping_add(1);
        run.seed("eval", eval_seed);
        let tr = synth_attention_dataset(n, parse_family(&family_name)?, seed, &synth)?;
        let ev =
            synth_attention_dataset(eval_n, parse_family(&eval_family_name)?, eval_seed, &synth)?;
        (tr, ev)
    } else if let Some(p) = &args.examples {
        holdout(read_examples(&mut run, p)?, seed)
    } else {
        let mut records = Vec::new();
        for (path, t) in args.traces.iter().zip(&traces) {
            run.read_input(path)?;
            let (Some(step), Some(gold)) = (t.steps.first(), &t.gold_answer_ids) else {
                log::warn!("{}: no steps or gold answer ids, skipped", path.display());
                continue;
            };
            let span = context_mask(&t.layout)?;
            let gold_positions = span
                .positions()
                .iter()
                .zip(span.token_ids())
                .filter(|(_, tok)| gold.contains(tok))
                .map(|(&p, _)| p)
                .collect();
            records.push(DecodingRecord {
                id: file_label(path),
                snapshot: step.attention.clone(),
                span,
                gold_positions,
            });
        }
        let rule = LabelingRule {
            heads: None,
            negative_ratio: args.negative_ratio,
            seed,
        };
        let set = build_training_set(&records, &rule)?;
        if set.skipped > 0 {
            log::warn!("{} traces had no gold token in context", set.skipped);
        }
        holdout(set.examples, seed)
    };

    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (det, fits) = fit_detector(&train_set, geom, &config, l2, top_heads)?;
    let det = det.with_threshold(threshold)?;
    let ev = evaluate_projected(&det, &eval_set)?;

    run.write("detector.json", det.to_json()?)?;
    let mut table = ReportTable::new(
        "detector_evaluation",
        &[
            ("stage", ColumnKind::Text),
            ("heads", ColumnKind::Int),
            ("l2_strength", ColumnKind::Real),
            ("converged", ColumnKind::Int),
            ("eval_auc", ColumnKind::Real),
            ("eval_accuracy", ColumnKind::Real),
        ],
    );
    let last = fits.len() - 1;
    for (i, f) in fits.iter().enumerate() {
        let FitSummary {
            heads,
            l2_strength,
            converged,
            ..
        } = f;
        let (auc, acc) = if i == last {
            (Cell::Real(ev.auc), Cell::Real(ev.accuracy))
        } else {
            (Cell::Missing, Cell::Missing)
        };
        table.push_row(vec![
            Cell::Text(if i == 0 {
                "all_heads".into()
            } else {
                "top_heads".into()
            }),
            Cell::Int(*heads as i64),
            Cell::Real(*l2_strength),
            Cell::Int(*converged as i64),
            auc,
            acc,
        ])?;
    }
    let table = table
        .with_provenance("seed", seed)
        .with_provenance("train_examples", train_set.len())
        .with_provenance("eval_examples", eval_set.len())
        .with_provenance("data_fingerprint", &det.training.data_fingerprint);
    write_report(&mut run, "detector_report", &table, ReportFormat::Csv)?;
    run.write_json("fits.json", &fits)?;
    run.finish()?;

    println!(
        "held-out AUC {:.4}, accuracy {:.4} ({} heads, {} train / {} eval examples)",
        ev.auc,
        ev.accuracy,
        det.head_order.len(),
        train_set.len(),
        eval_set.len()
    );
    Ok(())
}
