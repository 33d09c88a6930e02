use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::Result;
use clap::ValueEnum;
use dagcd_core::decoder::{decode, greedy_decode, DecoderConfig, GenerationResult, StepOracle};
use dagcd_core::detector::UtilizationDetector;
use dagcd_core::features::{PromptLayout, Role};
use dagcd_core::math::TokenId;
use dagcd_core::toy::{
    plant_scenario, PlantConfig, PlantedScenario, ToyConfig, ToyOracle, ToyTransformer,
};
use dagcd_core::trace::{record_greedy_trace, RecordConfig, ReplayOracle, TraceFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::usage;
use crate::config::{pick, FileConfig, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Toy,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Greedy,
    Dagcd,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum, default_value_t = OracleKind::Toy)]
    oracle: OracleKind,
    /// Trace to replay (with --oracle replay).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Use a planted scenario whose answer step greedy gets wrong.
    #[arg(long)]
    planted: bool,
    /// Rank of the gold token in a planted scenario.
    #[arg(long, default_value_t = 2)]
    gold_rank: usize,
    /// Prompt token ids, comma separated (toy oracle without --planted).
    #[arg(long, value_delimiter = ',')]
    prompt: Vec<TokenId>,
    /// One role code per prompt token: T(emplate), C(ontext), Q(uestion).
    #[arg(long)]
    roles: Option<String>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Toy model weights and planted scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Dagcd)]
    policy: PolicyArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_rank: Option<usize>,
    /// Overrides the detector's decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long = "stop-token")]
    stop_tokens: Vec<TokenId>,
    /// Stop (without adjustment) when this id is the model's top choice.
    #[arg(long)]
    newline_token: Option<TokenId>,
    /// Record the greedy run as a trace file in the output directory
    /// (requires --policy greedy).
    #[arg(long)]
    record_trace: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    oracle: OracleKind,
    policy: PolicyArg,
    planted: bool,
    gold_rank: Option<usize>,
    toy: Option<ToyConfig>,
    seed: Option<u64>,
    decoder: DecoderConfig,
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    record_trace: Option<String>,
}

#[derive(Debug, Serialize)]
struct GenerationOutput<'a> {
    #[serde(flatten)]
    result: &'a GenerationResult,
    flip_steps: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<&'a PlantedScenario>,
}

fn default_prompt(seed: u64, vocab: usize) -> Result<PromptLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let roles: Vec<Role> = [
        (Role::Template, 2),
        (Role::Context, 12),
        (Role::Question, 3),
    ]
    .into_iter()
    .flat_map(|(r, k)| std::iter::repeat_n(r, k))
    .collect();
    let tokens = roles
        .iter()
        .map(|_| rng.random_range(0..vocab as TokenId))
        .collect();
    Ok(PromptLayout::new(tokens, roles)?)
}

fn parse_roles(codes: &str) -> Result<Vec<Role>> {
    codes
        .chars()
        .map(|c| {
            Role::from_code(c.to_ascii_uppercase())
                .ok_or_else(|| usage(format!("unknown role code {c:?}")))
        })
        .collect()
}

pub fn run(args: Args, cfg: &FileConfig) -> Result<()> {
    let decoder = DecoderConfig {
        alpha: pick(args.alpha, cfg.alpha, 2.0),
        top_rank: pick(args.top_rank, cfg.top_rank, 10),
        max_new_tokens: pick(args.max_new_tokens, cfg.max_new_tokens, 32),
        stop_token_ids: args.stop_tokens.iter().copied().collect::<BTreeSet<_>>(),
        newline_stop: args.newline_token.is_some(),
        newline_token: args.newline_token,
    };
    decoder.validate().map_err(|e| usage(e.to_string()))?;
    let threshold = args.threshold.or(cfg.threshold);
    let seed = pick(args.seed, cfg.seed, 0);
    let toy = ToyConfig {
        vocab_size: pick(args.vocab, cfg.vocab, ToyConfig::default().vocab_size),
        num_layers: pick(args.layers, cfg.layers, ToyConfig::default().num_layers),
        num_heads: pick(args.heads, cfg.heads, ToyConfig::default().num_heads),
        ..ToyConfig::default()
    };
    let is_toy = args.oracle == OracleKind::Toy;
    if args.planted && !is_toy {
        return Err(usage("--planted requires --oracle toy"));
    }
    if args.record_trace.is_some() && args.policy != PolicyArg::Greedy {
        return Err(usage("--record-trace requires --policy greedy"));
    }
    if let Some(name) = &args.record_trace {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(usage("--record-trace takes a file name inside --out"));
        }
    }
    let resolved = Resolved {
        oracle: args.oracle,
        policy: args.policy,
        planted: args.planted,
        gold_rank: args.planted.then_some(args.gold_rank),
        toy: is_toy.then_some(toy),
        seed: is_toy.then_some(seed),
        decoder: decoder.clone(),
        threshold,
        record_trace: args.record_trace.clone(),
    };
    let mut run = Run::start("decode", cfg.out_dir(args.out.clone()), &resolved)?;
    if is_toy {
        run.seed("model", seed);
    }

    let detector = match &args.detector {
        Some(p) => {
            let bytes = run.read_input(p)?;
            let det = UtilizationDetector::from_json(&String::from_utf8_lossy(&bytes))?;
            Some(match threshold {
                Some(t) => det.with_threshold(t)?,
                None => det,
            })
        }
        None => None,
    };
    if detector.is_none() && (args.policy == PolicyArg::Dagcd || args.planted) {
        return Err(usage(
            "--detector is required for --policy dagcd and --planted",
        ));
    }

    let mut scenario = None;
    let mut trace: Option<TraceFile> = None;
    let (mut boxed, layout): (Box<dyn StepOracle>, PromptLayout) = match args.oracle {
        OracleKind::Toy if args.planted => {
            // planted for the default alpha so that other alphas replay the same scenario
            let plant = PlantConfig {
                toy,
                gold_rank: args.gold_rank,
                top_rank: decoder.top_rank,
                ..PlantConfig::default()
            };
            let (sc, oracle) =
                plant_scenario(seed, &plant, detector.as_ref().expect("checked above"))?;
            let layout = sc.layout.clone();
            scenario = Some(sc);
            (Box::new(oracle), layout)
        }
        OracleKind::Toy => {
            let layout = if args.prompt.is_empty() {
                default_prompt(seed, toy.vocab_size)?
            } else {
                let roles = parse_roles(
                    args.roles
                        .as_deref()
                        .ok_or_else(|| usage("--prompt needs --roles"))?,
                )?;
                PromptLayout::new(args.prompt.clone(), roles)?
            };
            (
                Box::new(ToyOracle::new(ToyTransformer::new_seeded(toy, seed)?)),
                layout,
            )
        }
        OracleKind::Replay => {
            let path = args
                .trace
                .as_ref()
                .ok_or_else(|| usage("--oracle replay needs --trace"))?;
            let t = TraceFile::from_bytes(&run.read_input(path)?)?;
            let layout = t.layout.clone();
            trace = Some(t.clone());
            (Box::new(ReplayOracle::new(t)?), layout)
        }
    };

    let mut oracle = boxed.as_mut();
    let result = match (args.policy, &detector) {
        (PolicyArg::Dagcd, Some(det)) => decode(&mut oracle, &layout, det, &decoder)?,
        _ => match &args.record_trace {
            Some(name) => {
                let rc = RecordConfig {
                    model_name: if is_toy {
                        format!("toy-seed-{seed}")
                    } else {
                        "replay".into()
                    },
                    decoder: decoder.clone(),
                    ..RecordConfig::default()
                };
                let (t, result) = record_greedy_trace(&mut oracle, &layout, &rc)?;
                run.write(name, t.to_bytes()?)?;
                result
            }
            None => greedy_decode(&mut oracle, &layout, &decoder)?,
        },
    };
    let text = trace.as_ref().and_then(|t| t.render(&result.token_ids));
    let output = GenerationOutput {
        result: &result,
        flip_steps: result.flip_steps(),
        text,
        scenario: scenario.as_ref(),
    };
    run.write_json("generation.json", &output)?;
    run.finish()?;

    let ids: Vec<String> = result.token_ids.iter().map(|t| t.to_string()).collect();
    println!("tokens: {}", ids.join(" "));
    println!("outcome: {}", serde_json::to_string(&result.outcome)?);
    if let Some(sc) = &scenario {
        let first = result.token_ids.first().copied();
        println!(
            "planted: gold {} distractor {}; first token {}",
            sc.gold_token,
            sc.distractor_token,
            match first {
                Some(t) if t == sc.gold_token => "gold",
                Some(t) if t == sc.distractor_token => "distractor",
                _ => "other",
            }
        );
    }
    if !output.flip_steps.is_empty() {
        println!("flipped steps: {:?}", output.flip_steps);
    }
    Ok(())
}
