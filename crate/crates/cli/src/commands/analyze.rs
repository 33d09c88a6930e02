use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use dagcd_core::analysis::{
    cross_domain_matrix, default_rank_bins, gap_by_rank, head_importance_report, rank_histogram,
    spearman_report, train_size_curve, uncertainty_report, AnalysisRecord, Domain, RankBin,
    ReportFormat,
};
use dagcd_core::detector::{train, TrainConfig};
use dagcd_core::features::ModelGeometry;
use dagcd_core::toy::{synth_attention_dataset, Family, SynthConfig};
use serde::Serialize;

use super::{geometry, parse_family, usage, write_report};
use crate::config::{pick, FileConfig, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Uncertainty,
    RankHistogram,
    GapByRank,
    Spearman,
    CrossDomain,
    TrainSizeCurve,
    HeadImportance,
}

impl Analysis {
    fn needs_records(self) -> bool {
        matches!(
            self,
            Self::Uncertainty | Self::RankHistogram | Self::GapByRank | Self::Spearman
        )
    }

    fn stem(self) -> &'static str {
        match self {
            Self::Uncertainty => "uncertainty",
            Self::RankHistogram => "rank_histogram",
            Self::GapByRank => "gap_by_rank",
            Self::Spearman => "spearman",
            Self::CrossDomain => "cross_domain",
            Self::TrainSizeCurve => "train_size_curve",
            Self::HeadImportance => "head_importance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    analysis: Analysis,
    /// Analysis records, one JSON object per line (record-based analyses).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Rank bins such as `1,2-4,5-10,11-30,31-`.
    #[arg(long)]
    bins: Option<String>,
    /// Training set sizes for the size curve.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eval_n: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_bins(spec: &str) -> Result<Vec<RankBin>> {
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            let bad = || usage(format!("bad rank bin {part:?}"));
            let (lo, hi) = match part.split_once('-') {
                None => {
                    let v = part.parse().map_err(|_| bad())?;
                    (v, Some(v))
                }
                Some((lo, "")) => (lo.parse().map_err(|_| bad())?, None),
                Some((lo, hi)) => (
                    lo.parse().map_err(|_| bad())?,
                    Some(hi.parse().map_err(|_| bad())?),
                ),
            };
            Ok(RankBin { lo, hi })
        })
        .collect()
}

#[derive(Serialize)]
struct Resolved {
    analysis: Analysis,
    format: FormatArg,
    bins: Option<Vec<RankBin>>,
    records: Option<String>,
    synthetic: Option<SynthSettings>,
}

#[derive(Serialize, Clone)]
struct SynthSettings {
    family: String,
    n: usize,
    eval_n: usize,
    sizes: Vec<usize>,
    geometry: ModelGeometry,
    seed: u64,
}

fn read_records(run: &mut Run, path: &std::path::Path) -> Result<Vec<AnalysisRecord>> {
    let text = String::from_utf8(run.read_input(path)?).context("records file is not UTF-8")?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: AnalysisRecord = serde_json::from_str(l)
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
            r.validate()
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok(r)
        })
        .collect()
}

pub fn run(args: Args, cfg: &FileConfig) -> Result<()> {
    let format = match (args.format, cfg.format.as_deref()) {
        (Some(f), _) => f,
        (None, Some(s)) => {
            FormatArg::from_str(s, true).map_err(|_| usage(format!("unknown format {s:?}")))?
        }
        (None, None) => FormatArg::Csv,
    };
    let report_format = match format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let bins = args.bins.as_deref().map(parse_bins).transpose()?;
    let seed = pick(args.seed, cfg.seed, 0);
    let synth = (!args.analysis.needs_records()).then(|| -> Result<SynthSettings> {
        Ok(SynthSettings {
            family: pick(args.family.clone(), cfg.family.clone(), "A".into()),
            n: pick(args.n, cfg.n, 200),
            eval_n: pick(args.eval_n, cfg.eval_n, 1000),
            sizes: if args.sizes.is_empty() {
                vec![100, 500, 1000]
            } else {
                args.sizes.clone()
            },
            geometry: geometry(
                pick(args.layers, cfg.layers, 4),
                pick(args.heads, cfg.heads, 8),
            )?,
            seed,
        })
    });
    let synth = synth.transpose()?;
    let resolved = Resolved {
        analysis: args.analysis,
        format,
        bins: bins.clone(),
        records: args
            .records
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned()),
        synthetic: synth.clone(),
    };
    let mut run = Run::start("analyze", cfg.out_dir(args.out.clone()), &resolved)?;

    let records = if args.analysis.needs_records() {
        let path = args.records.as_ref().ok_or_else(|| {
            usage(format!(
                "--analysis {} needs --records",
                args.analysis.stem()
            ))
        })?;
        read_records(&mut run, path)?
    } else {
        Vec::new()
    };
    let bins = bins.unwrap_or_else(default_rank_bins);
    let stem = args.analysis.stem();

    let tables = match args.analysis {
        Analysis::Uncertainty => vec![uncertainty_report(&records)?],
        Analysis::RankHistogram => vec![rank_histogram(&records, &bins)?],
        Analysis::GapByRank => vec![gap_by_rank(&records, &bins)?],
        Analysis::Spearman => {
            let f1: Vec<f64> = records.iter().map(|r| r.f1).collect();
            let ne: Vec<f64> = records.iter().map(|r| r.entropy).collect();
            vec![spearman_report(&f1, &ne)?]
        }
        Analysis::CrossDomain | Analysis::TrainSizeCurve | Analysis::HeadImportance => {
            let s = synth.expect("synthetic settings for model analyses");
            let sc = SynthConfig::for_geometry(s.geometry);
            let config = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let eval_seed = seed.wrapping_add(1);
            run.seed("train", seed);
            run.seed("eval", eval_seed);
            match args.analysis {
                Analysis::CrossDomain => {
                    let domains = [Family::A, Family::B]
                        .into_iter()
                        .enumerate()
                        .map(|(i, f)| {
                            let off = 2 * i as u64;
                            Ok(Domain {
                                name: format!("{f:?}"),
                                train: synth_attention_dataset(
                                    s.n,
                                    f,
                                    seed.wrapping_add(off),
                                    &sc,
                                )?,
                                eval: synth_attention_dataset(
                                    s.eval_n,
                                    f,
                                    eval_seed.wrapping_add(off),
                                    &sc,
                                )?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    vec![cross_domain_matrix(&domains, s.geometry, &config)?]
                }
                Analysis::TrainSizeCurve => {
                    let family = parse_family(&s.family)?;
                    let pool_size = *s
                        .sizes
                        .iter()
                        .max()
                        .ok_or_else(|| usage("--sizes is empty"))?;
                    let pool =
                        synth_attention_dataset(pool_size + pool_size % 2, family, seed, &sc)?;
                    let eval_set = synth_attention_dataset(s.eval_n, family, eval_seed, &sc)?;
                    vec![
                        train_size_curve(&s.sizes, &pool, &eval_set, s.geometry, &config)
                            .map_err(|e| usage(e.to_string()))?,
                    ]
                }
                _ => {
                    let family = parse_family(&s.family)?;
                    let train_set = synth_attention_dataset(s.n, family, seed, &sc)?;
                    let eval_set = synth_attention_dataset(s.eval_n, family, eval_seed, &sc)?;
                    let full = train(&train_set, s.geometry, &config)?.detector;
                    let (ranking, cmp) =
                        head_importance_report(&full, &train_set, &eval_set, &config)?;
                    vec![ranking, cmp]
                }
            }
        }
    };
    for (i, t) in tables.iter().enumerate() {
        let name = if tables.len() == 1 {
            stem.to_string()
        } else {
            format!("{stem}_{}", t.name)
        };
        let t = t.clone().with_provenance("seed", seed);
        write_report(&mut run, &name, &t, report_format)?;
        if i == 0 {
            println!("{} rows written to {name}", t.rows.len());
        }
    }
    run.finish()?;
    Ok(())
}
