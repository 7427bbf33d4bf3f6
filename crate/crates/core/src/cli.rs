//! Command-line front end.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{AblationPreset, AppConfig};
use crate::corpus::{ingest_corpus, write_jsonl, CorpusFormat};
use crate::episode::{read_results_jsonl, run_dataset, write_results_jsonl, write_timings_jsonl, Mode, Pipeline};
use crate::eval::{evaluate_run, mcnemar_test, RunReport, DEFAULT_EXACT_LIMIT};
use crate::index::VectorIndex;
use crate::reasoner::{export_sft_records, Answerer, PolicyParams, QueryTemplate};
use crate::reward::{evaluate_policy, greedy_profile, train_toy_questioner, write_curve_csv, ToyWorld};
use crate::synth::{oracle_scripts, two_hop_task, TwoHopSpec};

#[derive(Debug, Parser)]
#[command(name = "imloop", version, about = "Multi-round retrieval loop: run, train, evaluate")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus file and rewrite it as normalized JSONL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the configured corpus and save the index.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `index.path` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run episodes over the configured samples.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the template questioner on the generated two-hop task.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn transcripts into instruction-tuning records for the answerer.
    ExportSft {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score transcripts against gold answers and supporting passages.
    Eval {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: CorpusFormat,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Paired significance test over two report.json files.
    Mcnemar {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Discordant count above which the chi-square form is used.
        #[arg(long, default_value_t = DEFAULT_EXACT_LIMIT)]
        exact_limit: u64,
    },
    /// Write an ablated copy of a config, optionally running it.
    Ablate {
        #[arg(value_enum)]
        preset: AblationPreset,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run: bool,
    },
    /// Generate the two-hop toy corpus and oracle query scripts.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long, default_value_t = TwoHopSpec::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = TwoHopSpec::default().distractors)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        hard_negatives: usize,
        #[arg(long, default_value_t = TwoHopSpec::default().seed)]
        seed: u64,
    },
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<AppConfig> {
    Ok(AppConfig::load(path)?)
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { input, format, out } => {
            let store = ingest_corpus(&input, format)?;
            write_jsonl(&store, &out)?;
            println!("{} passages, {} samples -> {}", store.len(), store.samples().len(), out.display());
        }
        Command::BuildIndex { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.or_else(|| cfg.index.path.clone()).context("no output path: pass --out or set index.path")?;
            let store = cfg.load_corpus()?;
            let provider = cfg.provider();
            let index = VectorIndex::build(&store, provider.as_ref(), cfg.index.variant)?;
            index.save(&out)?;
            println!("indexed {} passages (dim {}) -> {}", index.len(), index.dim(), out.display());
        }
        Command::Run { config, mode, seed, parallelism, out_dir } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.episode.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = parallelism {
                cfg.parallelism = p;
            }
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            cfg.validate()?;
            run_pipeline(&cfg)?;
        }
        Command::TrainToy { config, out_dir, iterations, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            if let Some(n) = iterations {
                cfg.trainer.iterations = n;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            cfg.validate()?;
            train_toy(&cfg)?;
        }
        Command::ExportSft { transcripts, samples, format, out } => {
            let results = read_results_jsonl(&transcripts)?;
            let store = ingest_corpus(&samples, format)?;
            let summary = export_sft_records(&results, store.samples(), &out)?;
            println!("wrote {} records, skipped {} -> {}", summary.written, summary.skipped, out.display());
        }
        Command::Eval { transcripts, samples, format, json } => {
            let results = read_results_jsonl(&transcripts)?;
            let store = ingest_corpus(&samples, format)?;
            let report = evaluate_run(&results, store.samples())?;
            print!("{}", report.table());
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Mcnemar { run_a, run_b, exact_limit } => {
            let a: RunReport = read_json(&run_a)?;
            let b: RunReport = read_json(&run_b)?;
            let (bits_a, bits_b) = paired_bits(&a, &b)?;
            let r = mcnemar_test(&bits_a, &bits_b, exact_limit)?;
            println!(
                "b={} c={} p={} significant={} method={}",
                r.b,
                r.c,
                format_p(r.p_value),
                if r.significant { "yes" } else { "no" },
                serde_json::to_value(r.method)?.as_str().unwrap_or_default()
            );
        }
        Command::Ablate { preset, config, out, run } => {
            let mut cfg = load_config(&config)?;
            cfg.apply_preset(preset);
            let mut dir = cfg.output_dir.clone().into_os_string();
            dir.push(format!("-{}", preset_name(preset)));
            cfg.output_dir = dir.into();
            cfg.validate()?;
            fs::write(&out, cfg.to_toml())?;
            println!("wrote {} (fingerprint {})", out.display(), cfg.fingerprint());
            if run {
                run_pipeline(&cfg)?;
            }
        }
        Command::Synth { out, scripts, samples, distractors, hard_negatives, seed } => {
            let store = two_hop_task(&TwoHopSpec { samples, distractors, hard_negatives, seed });
            write_jsonl(&store, &out)?;
            if let Some(path) = scripts {
                let mut text = String::new();
                for s in oracle_scripts(&store) {
                    text.push_str(&serde_json::to_string(&s)?);
                    text.push('\n');
                }
                fs::write(&path, text)?;
            }
            println!("{} passages, {} samples -> {}", store.len(), store.samples().len(), out.display());
        }
    }
    Ok(())
}

fn preset_name(p: AblationPreset) -> &'static str {
    match p {
        AblationPreset::NoRefiner => "no-refiner",
        AblationPreset::NoIm => "no-im",
    }
}

fn format_p(p: f64) -> String {
    if p >= 1e-6 {
        format!("{p:.6}")
    } else {
        format!("{p:.3e}")
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// EM bits of both reports in the order of `a`, matched by sample id.
fn paired_bits(a: &RunReport, b: &RunReport) -> anyhow::Result<(Vec<u8>, Vec<u8>)> {
    let by_id: HashMap<&str, u8> = b.samples.iter().map(|s| (s.id.as_str(), s.em)).collect();
    if a.samples.len() != b.samples.len() {
        bail!("runs cover different sample counts ({} vs {})", a.samples.len(), b.samples.len());
    }
    let mut bits_b = Vec::with_capacity(a.samples.len());
    for s in &a.samples {
        match by_id.get(s.id.as_str()) {
            Some(&em) => bits_b.push(em),
            None => bail!("sample `{}` missing from the second run", s.id),
        }
    }
    Ok((a.em_bits(), bits_b))
}

/// Runs the configured dataset and writes the run directory.
pub fn run_pipeline(cfg: &AppConfig) -> anyhow::Result<RunReport> {
    let store = cfg.load_corpus()?;
    if store.samples().is_empty() {
        bail!("the configured corpus contains no samples");
    }
    let provider = cfg.provider();
    let index = cfg.load_or_build_index(&store, provider.as_ref())?;
    let refiner = cfg.refiner();
    let backends = cfg.backends()?;
    let pipe =
        Pipeline { store: &store, index: &index, provider: provider.as_ref(), refiner: &refiner, backends: &backends };
    let results = run_dataset(store.samples(), pipe, &cfg.episode_config(), cfg.parallelism);

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_results_jsonl(&results, &dir.join("transcripts.jsonl"))?;
    write_timings_jsonl(&results, &dir.join("timings.jsonl"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let mut report = evaluate_run(&results, store.samples())?;
    report.fingerprint = Some(cfg.fingerprint());
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.table());
    let rewards: Vec<f64> = results.iter().filter_map(|r| r.reward.as_ref().map(|b| b.total)).collect();
    if !rewards.is_empty() {
        println!("{:<12} {:>8.3}", "mean reward", rewards.iter().sum::<f64>() / rewards.len() as f64);
    }
    println!("fingerprint  {}", cfg.fingerprint());
    println!("outputs      {}", dir.display());
    Ok(report)
}

fn train_toy(cfg: &AppConfig) -> anyhow::Result<()> {
    let store = two_hop_task(&cfg.toy);
    let provider = cfg.provider();
    let index = VectorIndex::build(&store, provider.as_ref(), cfg.index.variant)?;
    let refiner = cfg.refiner();
    let answerer: Arc<dyn Answerer> = cfg.backends()?.answerer;
    let world =
        ToyWorld { store: &store, index: &index, provider: provider.as_ref(), refiner: &refiner, answerer: &answerer };
    let mut episode = cfg.episode_config();
    episode.mode = Mode::Train;
    let initial = PolicyParams::uniform(cfg.tracker.n_max, QueryTemplate::ALL.to_vec());

    let outcome = train_toy_questioner(store.samples(), &world, &cfg.trainer, &episode, &initial)?;
    let alpha = cfg.trainer.alpha;
    let seed = cfg.trainer.seed;
    let before = evaluate_policy(&initial, &initial, &world, store.samples(), &episode, alpha, false, seed)?;
    let sampled = evaluate_policy(&outcome.params, &initial, &world, store.samples(), &episode, alpha, false, seed)?;
    let greedy = evaluate_policy(&outcome.params, &initial, &world, store.samples(), &episode, alpha, true, seed)?;

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_curve_csv(&outcome.curve, &dir.join("curve.csv"))?;
    outcome.params.save(&dir.join("policy.json"))?;
    let profile: Vec<_> = greedy_profile(&outcome.params)
        .into_iter()
        .enumerate()
        .map(|(b, (a, p))| json!({ "bucket": b, "template": outcome.params.templates[a], "probability": p }))
        .collect();
    let report = json!({
        "fingerprint": cfg.fingerprint(),
        "initial": before,
        "trained_sampled": sampled,
        "trained_greedy": greedy,
        "policy": profile,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{:<16} {:>10} {:>10} {:>12}", "policy", "reward", "F1", "Passage EM");
    for (name, e) in [("initial", before), ("trained", sampled), ("trained-greedy", greedy)] {
        println!("{name:<16} {:>10.3} {:>10.3} {:>12.3}", e.mean_reward, e.mean_f1, e.passage_em);
    }
    for p in &profile {
        println!("bucket {}: {} ({:.3})", p["bucket"], p["template"], p["probability"].as_f64().unwrap_or_default());
    }
    println!("outputs {}", dir.display());
    Ok(())
}
