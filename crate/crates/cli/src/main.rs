//! Command-line driver: data preparation, training, evaluation, and the
//! verification/benchmark harnesses.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mmrec_core::data::{build_sequences, kcore_filter, leave_one_out_split, parse_interactions};
use mmrec_core::eval::{
    bench_kernels, default_bench_grid, evaluate_cases, truncation_csv, truncation_probe,
    verify_duality,
};
use mmrec_core::io::{
    load_checkpoint, load_prepared, load_run_config, save_checkpoint, save_prepared,
    transfer_params, RunConfig,
};
use mmrec_core::model::{init_params, Ablation};
use mmrec_core::synth::{write_corpus, SynthConfig};
use mmrec_core::train::{run_finetune, run_pretrain, EpochLogRecord};
use mmrec_core::ItemCatalog;

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Multi-modal sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant
    #[arg(long, default_value = "full")]
    ablation: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted next-item structure
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.2)]
        missing_frac: f32,
        /// Make the preceding gap predict the successor (session plant)
        #[arg(long, default_value_t = false)]
        time_switch: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse interactions, k-core filter, split, and persist the dataset
    Prepare {
        /// Directory holding interactions.tsv, items.idx, features_*.bin
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the k-core threshold
        #[arg(long)]
        kcore: Option<usize>,
    },
    /// In-batch pre-training for a fixed number of epochs
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Full-corpus fine-tuning with early stopping
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-trained checkpoint to start from
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Rank the full corpus for every test user
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Cross-check the two SSD forms and their gradients over a grid
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time both SSD kernels and check the auto-selector
    Bench {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate with truncated histories; emits CSV
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated truncation lengths
        #[arg(long, default_value = "1,2,3,5,10,20,50")]
        lengths: String,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    let ablation: Ablation = common.ablation.parse()?;
    ablation.apply(&mut cfg.model);
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_log(path: &Path, log: &[EpochLogRecord]) -> Result<()> {
    let mut text = String::new();
    for record in log {
        text.push_str(&serde_json::to_string(record)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn init_model_for(
    cfg: &RunConfig,
    catalog: &ItemCatalog,
) -> Result<mmrec_core::ModelParams> {
    Ok(init_params(&cfg.model, cfg.train.seed, catalog.dim_v, catalog.dim_t, catalog.len())?)
}

fn check_checkpoint_matches(
    cfg: &RunConfig,
    catalog: &ItemCatalog,
    loaded: &mmrec_core::ModelParams,
) -> Result<()> {
    let expected = init_model_for(cfg, catalog)?;
    mmrec_core::io::check_manifest_compat(loaded, &expected, &[]).context(
        "checkpoint does not match the model configuration; pass the --config/--ablation the checkpoint was trained with",
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { users, items, dim, missing_frac, time_switch, out, seed } => {
            let cfg = SynthConfig {
                users,
                items,
                feature_dim: dim,
                missing_image_frac: missing_frac,
                time_conditioned: time_switch,
                seed,
                ..SynthConfig::default()
            };
            let corpus = write_corpus(&out, &cfg)?;
            eprintln!(
                "wrote {} interactions over {} items to {}",
                corpus.records.len(),
                corpus.item_ids.len(),
                out.display()
            );
        }
        Command::Prepare { data, out, config, kcore } => {
            let cfg = match &config {
                Some(path) => load_run_config(path)?,
                None => RunConfig::default(),
            };
            let k = kcore.unwrap_or(cfg.kcore);
            let records = parse_interactions(&data.join("interactions.tsv"))?;
            let filtered = kcore_filter(&records, k);
            if filtered.is_empty() {
                anyhow::bail!("no interactions survive {k}-core filtering");
            }
            let (sequences, vocab) = build_sequences(&filtered);
            let split = leave_one_out_split(&sequences);

            // carry over features for surviving items only
            let source = mmrec_core::io::load_catalog(&data)?;
            let mut feat_v = Vec::new();
            let mut feat_t = Vec::new();
            let mut presence = Vec::new();
            for id in &vocab {
                let idx = source.index_of(id)?;
                feat_v.extend_from_slice(source.visual_row(idx)?);
                feat_t.extend_from_slice(source.text_row(idx)?);
                presence.push(source.item_has_image(idx)?);
            }
            let catalog =
                ItemCatalog::new(vocab, source.dim_v, source.dim_t, feat_v, feat_t, presence)?;
            save_prepared(&out, &split, &catalog)?;
            eprintln!(
                "prepared {} users / {} items ({} train regions, {} valid, {} test) at {}",
                split.train_regions.len(),
                catalog.len(),
                split.train_regions.len(),
                split.valid.len(),
                split.test.len(),
                out.display()
            );
        }
        Command::Pretrain { data, out, common } => {
            let cfg = load_config(&common)?;
            let (split, catalog) = load_prepared(&data)?;
            let mut params = init_model_for(&cfg, &catalog)?;
            std::fs::create_dir_all(&out)?;
            let outcome = run_pretrain(
                &split,
                &catalog,
                &mut params,
                &cfg.model,
                &cfg.train,
                |epoch, p| {
                    save_checkpoint(&out.join(format!("checkpoint_ep{epoch}.mmck")), p)
                },
            )?;
            save_checkpoint(&out.join("checkpoint.mmck"), &params)?;
            write_log(&out.join("train_log.jsonl"), &outcome.log)?;
            if outcome.target_collisions > 0 {
                eprintln!("in-batch target collisions: {}", outcome.target_collisions);
            }
            eprintln!(
                "pretrained {} epochs, final loss {:.4}",
                outcome.epochs_run, outcome.final_loss
            );
        }
        Command::Finetune { data, out, checkpoint, common } => {
            let cfg = load_config(&common)?;
            let (split, catalog) = load_prepared(&data)?;
            let mut params = init_model_for(&cfg, &catalog)?;
            if let Some(ck) = &checkpoint {
                let loaded = load_checkpoint(ck)?;
                let summary = transfer_params(&mut params, &loaded)?;
                eprintln!(
                    "transferred {} tensors from {} ({} re-initialized)",
                    summary.copied,
                    ck.display(),
                    summary.reinitialized
                );
            }
            std::fs::create_dir_all(&out)?;
            let (report, outcome) =
                run_finetune(&split, &catalog, &mut params, &cfg.model, &cfg.train)?;
            save_checkpoint(&out.join("checkpoint.mmck"), &params)?;
            write_log(&out.join("train_log.jsonl"), &outcome.log)?;
            write_json(&out.join("convergence.json"), &serde_json::to_value(&report)?)?;
            let eval = evaluate_cases(&split.test, &catalog, &params, &cfg.model, &[10, 50])?;
            write_json(&out.join("eval_report.json"), &serde_json::to_value(&eval)?)?;
            eprintln!(
                "finetuned: best epoch {} (valid NDCG@10 {:.4}), test NDCG@10 {:.4}",
                report.best_epoch,
                report.best_ndcg10,
                eval.ndcg(10)
            );
        }
        Command::Evaluate { data, checkpoint, out, common } => {
            let cfg = load_config(&common)?;
            let (split, catalog) = load_prepared(&data)?;
            let params = load_checkpoint(&checkpoint)?;
            check_checkpoint_matches(&cfg, &catalog, &params)?;
            std::fs::create_dir_all(&out)?;
            let eval = evaluate_cases(&split.test, &catalog, &params, &cfg.model, &[10, 50])?;
            write_json(&out.join("eval_report.json"), &serde_json::to_value(&eval)?)?;
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
        Command::Verify { seed, out } => {
            let ls: Vec<usize> = (1..=64).collect();
            let report = verify_duality(seed, &ls, &[1, 4, 64], &[1, 3, 256]);
            let value = serde_json::to_value(&report)?;
            let summary = serde_json::json!({
                "all_pass": report.all_pass,
                "max_abs_diff": report.max_abs_diff,
                "max_grad_rel_err": report.max_grad_rel_err,
                "max_fd_rel_err": report.max_fd_rel_err,
                "grid_points": report.checks.len(),
                "fd_points": report.fd_checks.len(),
                "literal_mode_max_entry": report.literal_mode_max_entry,
            });
            if let Some(path) = out {
                std::fs::create_dir_all(&path)?;
                write_json(&path.join("verify_report.json"), &value)?;
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !report.all_pass {
                anyhow::bail!(
                    "duality verification failed: max diff {}, max grad err {}",
                    report.max_abs_diff,
                    report.max_grad_rel_err
                );
            }
        }
        Command::Bench { repeats, out, seed } => {
            let report = bench_kernels(&default_bench_grid(), repeats, seed)?;
            let value = serde_json::to_value(&report)?;
            if let Some(path) = out {
                std::fs::create_dir_all(&path)?;
                write_json(&path.join("bench_report.json"), &value)?;
            }
            println!("{}", serde_json::to_string_pretty(&value)?);
            if report.max_abs_diff >= 1e-5 {
                anyhow::bail!("kernel disagreement {} exceeds 1e-5", report.max_abs_diff);
            }
            if report.auto_match_fraction < 0.8 {
                anyhow::bail!(
                    "auto-selector matched the faster kernel on only {:.0}% of the grid",
                    report.auto_match_fraction * 100.0
                );
            }
        }
        Command::Probe { data, checkpoint, out, lengths, common } => {
            let cfg = load_config(&common)?;
            let (split, catalog) = load_prepared(&data)?;
            let params = load_checkpoint(&checkpoint)?;
            check_checkpoint_matches(&cfg, &catalog, &params)?;
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("bad --lengths entry"))
                .collect::<Result<_>>()?;
            let ks = [10, 50];
            let rows = truncation_probe(&split.test, &catalog, &params, &cfg.model, &lengths, &ks)?;
            std::fs::create_dir_all(&out)?;
            let csv = truncation_csv(&rows, &ks);
            std::fs::write(out.join("truncation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
