//! Command-line harness for the two-stage skeleton contrastive pipeline:
//! dataset generation, pretraining, finetuning, evaluation, the gradient
//! suite, and the three-arm directional experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use snipcl::checkpoint::{Checkpoint, RngState};
use snipcl::config::RunConfig;
use snipcl::data::{
    load_dataset, preprocess_sequence, save_dataset, generate_synthetic_dataset, Dataset,
    SkeletonSequence,
};
use snipcl::encoder::GraphAdjacency;
use snipcl::experiment::{
    desk_experiment_config, emit_metrics, localize_and_score, loss_curves_csv, model_frame_probs,
    pretrain_run, run_experiment, AXIS_JOINTS, ROOT_JOINT,
};
use snipcl::fusion::{
    finetune_step, init_fusion_params, select_labeled, FinetuneMode, FinetuneState,
};
use snipcl::rng::stream;
use snipcl::suite::run_grad_suite;
use snipcl::tensor::Tensor;

#[derive(Parser)]
#[command(name = "snipcl", version, about = "Skeleton-snippet contrastive learning pipeline")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override (also applied to dataset generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override (takes precedence over SNIPCL_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on rayon worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Linear,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic skeleton dataset.
    GenData,
    /// Stage 1: contrastive pretraining on a dataset.
    Pretrain {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Dense-loss weight override.
        #[arg(long)]
        lambda: Option<f64>,
        /// Snippet count override.
        #[arg(long)]
        snippets: Option<usize>,
        /// Drop the dense snippet loss entirely (video-level baseline).
        #[arg(long)]
        no_dense_loss: bool,
    },
    /// Stage 2: supervised finetuning with the fusion module and head.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint prefix; random initialization if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Fraction of labeled sequences (semi-supervised protocol).
        #[arg(long)]
        label_fraction: Option<f64>,
        /// Bypass the multiscale fusion module.
        #[arg(long)]
        no_fusion: bool,
    },
    /// Evaluate a finetuned checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint prefix from finetune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient suite over all operations.
    GradCheck {
        /// Random fixtures per operation.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Three-arm directional comparison with linear probes.
    Experiment {
        /// Comma-separated experiment seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to configure thread pool")?;
    }
    let mut cfg = match (&cli.config, &cli.cmd) {
        (Some(path), _) => RunConfig::load(path)
            .with_context(|| format!("failed to load config {}", path.display()))?,
        (None, Cmd::Experiment { .. }) => desk_experiment_config(),
        (None, _) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    // the output location is resolved per invocation and deliberately kept
    // out of the config snapshot, so artifacts are identical wherever a run
    // is written
    let out_dir = if let Some(out) = &cli.out {
        out.clone()
    } else if let Ok(out) = std::env::var("SNIPCL_OUT") {
        PathBuf::from(out)
    } else {
        cfg.out_dir.clone()
    };

    match cli.cmd {
        Cmd::GenData => {
            let items = generate_synthetic_dataset(&cfg.data)?;
            let dataset = Dataset { items };
            save_dataset(&dataset, &out_dir)?;
            println!(
                "wrote {} sequences to {}",
                dataset.len(),
                out_dir.display()
            );
        }
        Cmd::Pretrain {
            data,
            lambda,
            snippets,
            no_dense_loss,
        } => {
            if let Some(l) = lambda {
                cfg.pretrain.lambda = l;
            }
            if let Some(n) = snippets {
                cfg.pretrain.snippets = n;
            }
            if no_dense_loss {
                cfg.pretrain.dense_enabled = false;
            }
            cfg.pretrain.validate()?;
            let seqs = load_preprocessed(&data)?;
            let (state, rows) = pretrain_run(&seqs, &cfg, cfg.seed)?;
            std::fs::create_dir_all(&out_dir)?;
            let rng = stream(cfg.seed, "pretrain");
            let ckpt = Checkpoint {
                step: rows.len() as u64,
                config: cfg.clone(),
                rng: RngState::capture(&rng),
                groups: vec![
                    ("query".into(), state.query),
                    ("key".into(), state.key),
                ],
            };
            ckpt.save(&out_dir.join("pretrain"))?;
            let csv = loss_curves_csv(&rows, cfg.pretrain.dense_enabled);
            snipcl::checkpoint::write_atomic(&out_dir.join("loss_curves.csv"), csv.as_bytes())?;
            let last = rows.last().context("no pretraining steps ran")?;
            println!(
                "pretrained {} steps; final l_total {:.4}; checkpoint at {}",
                rows.len(),
                last.l_total,
                out_dir.join("pretrain.json").display()
            );
        }
        Cmd::Finetune {
            data,
            checkpoint,
            mode,
            label_fraction,
            no_fusion,
        } => {
            if let Some(m) = mode {
                cfg.finetune.mode = match m {
                    ModeArg::Linear => FinetuneMode::Linear,
                    ModeArg::Full => FinetuneMode::Full,
                };
            }
            if let Some(f) = label_fraction {
                cfg.finetune.label_fraction = f;
            }
            if no_fusion {
                cfg.fusion.enabled = false;
            }
            let seqs = load_preprocessed(&data)?;
            let adj = GraphAdjacency::lite_body(seqs[0].j());
            let mut init_rng = stream(cfg.seed, "init");
            let mut params = match &checkpoint {
                Some(prefix) => {
                    let ckpt = Checkpoint::load(prefix)?;
                    ckpt.group("query")
                        .or_else(|| ckpt.group("model"))
                        .context("checkpoint has no query/model parameter group")?
                        .clone()
                }
                None => snipcl::encoder::init_encoder_params(&cfg.encoder, &mut init_rng),
            };
            init_fusion_params(
                &mut params,
                &cfg.encoder.channels,
                &cfg.fusion,
                cfg.data.num_classes,
                &mut init_rng,
            );
            let chosen = select_labeled(seqs.len(), cfg.finetune.label_fraction, cfg.seed)?;
            let labeled: Vec<SkeletonSequence> =
                chosen.iter().map(|&i| seqs[i].clone()).collect();
            let mut state = FinetuneState::new(params, &cfg.finetune);
            let mut order_rng = stream(cfg.seed, "batch-order");
            let mut csv = String::from("step,cross_entropy,frame_accuracy\n");
            let mut step = 0usize;
            let mut last_stats = None;
            for _ in 0..cfg.finetune.epochs {
                let mut idx: Vec<usize> = (0..labeled.len()).collect();
                use rand::seq::SliceRandom;
                idx.shuffle(&mut order_rng);
                for chunk in idx.chunks(cfg.finetune.batch_size) {
                    let batch: Vec<SkeletonSequence> =
                        chunk.iter().map(|&i| labeled[i].clone()).collect();
                    let stats = finetune_step(
                        &batch,
                        &mut state,
                        &cfg.encoder,
                        &cfg.fusion,
                        &adj,
                        cfg.finetune.mode,
                    )?;
                    step += 1;
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        step, stats.cross_entropy, stats.frame_accuracy
                    ));
                    last_stats = Some(stats);
                }
            }
            std::fs::create_dir_all(&out_dir)?;
            let rng = stream(cfg.seed, "batch-order");
            let ckpt = Checkpoint {
                step: step as u64,
                config: cfg.clone(),
                rng: RngState::capture(&rng),
                groups: vec![("model".into(), state.params)],
            };
            ckpt.save(&out_dir.join("finetune"))?;
            snipcl::checkpoint::write_atomic(
                &out_dir.join("finetune_curves.csv"),
                csv.as_bytes(),
            )?;
            let stats = last_stats.context("no finetuning steps ran")?;
            println!(
                "finetuned {} steps on {}/{} sequences; final accuracy {:.3}",
                step,
                labeled.len(),
                seqs.len(),
                stats.frame_accuracy
            );
        }
        Cmd::Eval { data, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ckpt
                .group("model")
                .context("checkpoint has no model parameter group")?;
            let model_cfg = &ckpt.config;
            let seqs = load_preprocessed(&data)?;
            let adj = GraphAdjacency::lite_body(seqs[0].j());
            let probs: Vec<Tensor> = seqs
                .iter()
                .map(|s| {
                    model_frame_probs(params, &model_cfg.encoder, &model_cfg.fusion, &adj, s)
                })
                .collect::<Result<_, _>>()?;
            let labels: Vec<Vec<usize>> =
                seqs.iter().map(|s| s.frame_labels.clone()).collect();
            let report = localize_and_score(&probs, &labels, &cfg.eval)?;
            emit_metrics(&report, None, &out_dir)?;
            println!("avg mAP {:.4}; report at {}", report.avg_map, out_dir.display());
        }
        Cmd::GradCheck { seeds } => {
            let report = run_grad_suite(seeds)?;
            print!("{}", report.summary());
            if !report.all_pass() {
                bail!("gradient suite failed");
            }
        }
        Cmd::Experiment { seeds } => {
            let report = run_experiment(&cfg, &seeds)?;
            std::fs::create_dir_all(&out_dir)?;
            let json = serde_json::to_vec_pretty(&report)?;
            snipcl::checkpoint::write_atomic(&out_dir.join("report.json"), &json)?;
            for (arm, res) in &report.arms {
                println!("{arm}: median avg mAP {:.4}", res.median);
            }
            println!(
                "gap {:.2} points; ordering_ok={}; gap_ok={}",
                report.gap_points, report.ordering_ok, report.gap_ok
            );
        }
    }
    Ok(())
}

/// Loads a dataset directory and applies standard preprocessing.
fn load_preprocessed(dir: &PathBuf) -> Result<Vec<SkeletonSequence>> {
    let dataset =
        load_dataset(dir).with_context(|| format!("failed to load dataset {}", dir.display()))?;
    if dataset.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    dataset
        .items
        .iter()
        .map(|(s, _)| Ok(preprocess_sequence(s, ROOT_JOINT, AXIS_JOINTS)?.0))
        .collect()
}
