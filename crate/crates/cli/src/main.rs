//! genaf: robust fine-tuning of pre-trained image encoders.
//!
//! Subcommands cover the full workflow: contrastive pre-training,
//! stage-1 adversarial fine-tuning, layer ranking, stage-2 fine-tuning,
//! attack generation, evaluation, the end-to-end pipeline, ablation
//! sweeps, and plot emission.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 training or
//! numerical error, 4 I/O error.

use clap::{Parser, Subcommand};
use genaf_core::attack::{pgd_attack, uap_attack, UniversalPerturbation};
use genaf_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use genaf_core::config::{parse_rational, RunConfig};
use genaf_core::data::load_dataset;
use genaf_core::error::Error;
use genaf_core::feature_graph::build_feature_graph;
use genaf_core::metrics::{evaluate, EvalAttack};
use genaf_core::packed::{PackedArray, PackedFile};
use genaf_core::pipeline::{run_ablation, run_pipeline, AblationAxis};
use genaf_core::plots::emit_plots;
use genaf_core::pretrain::pretrain_encoder;
use genaf_core::sensitivity::{
    build_sensitivity_dictionary, prepare_eval_set, select_topk_least_robust,
    SensitivityDictionary,
};
use genaf_core::stage1::train_stage1;
use genaf_core::stage2::train_stage2;
use genaf_core::tensor::Tensor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "genaf", version, about = "Robust fine-tuning of pre-trained encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively pre-train an encoder and save its checkpoint.
    Pretrain {
        /// Dataset path, folder, or synth:... spec.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value config overrides.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Stage I: genetic-driven dual-track adversarial fine-tuning.
    Stage1 {
        /// Encoder checkpoint directory.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        /// Debug: dump first-batch benign/adversarial graph weight
        /// matrices to this packed file.
        #[arg(long)]
        dump_graphs: Option<PathBuf>,
    },
    /// Rank layers by robustness contribution.
    RankLayers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// Relative weight-perturbation radius (accepts rationals).
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Stage II: standard fine-tuning of the selected layers.
    Stage2 {
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sensitivity: PathBuf,
        /// Fraction of least-robust layers to fine-tune.
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate TA/RA/ASR under an attack.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// pgd | uap | file:<path> | none
        #[arg(long)]
        attack: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Generate adversarial examples or a universal perturbation.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// Perturbation budget, e.g. 10/255.
        #[arg(long)]
        eps: Option<String>,
        /// pgd | uap
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run the full pipeline: baseline, stage1, rank, stage2, eval.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out_root: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Ablation sweep over one axis.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// lambda | epsilon | learning_rates | topk_ratio
        #[arg(long)]
        axis: String,
        /// Comma-separated values (learning_rates uses lrE:lrC pairs).
        #[arg(long)]
        values: String,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Render metric charts for a sweep directory.
    Plot { dir: PathBuf },
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>, Error> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))
        })
        .collect()
}

fn load_config(path: Option<&PathBuf>, set: &[String]) -> Result<RunConfig, Error> {
    RunConfig::load(path.map(|p| p.as_path()), &overrides(set)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain {
            data,
            out,
            config,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.pretrain.dataset_path = d;
            }
            let (model, log) = pretrain_encoder(&cfg.pretrain, &cfg.arch, cfg.seed)?;
            save_checkpoint(
                &out,
                &model,
                &CheckpointMeta {
                    stage: "pretrain".into(),
                    epoch: cfg.pretrain.epochs,
                    seed: cfg.seed,
                    config_hash: cfg.config_hash(),
                },
            )?;
            if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.epoch_losses.last())
            {
                println!(
                    "pretrained {} epochs, contrastive loss {first:.4} -> {last:.4}",
                    log.epoch_losses.len()
                );
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Stage1 {
            encoder,
            data,
            config,
            out,
            set,
            dump_graphs,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.data_train = d;
            }
            let (mut model, _) = load_checkpoint(&encoder)?;
            let train = load_dataset(
                &cfg.data_train,
                Some((model.arch().input_height, model.arch().input_width)),
            )?;
            let log = train_stage1(&mut model, &train, &cfg.stage1)?;
            save_checkpoint(
                &out,
                &model,
                &CheckpointMeta {
                    stage: "stage1".into(),
                    epoch: cfg.stage1.epochs,
                    seed: cfg.seed,
                    config_hash: cfg.config_hash(),
                },
            )?;
            log.write_jsonl(&out.join("train_log.jsonl"))?;
            if let Some(path) = dump_graphs {
                dump_first_batch_graphs(&model, &train, &cfg, &path)?;
                println!("graph weights dumped to {}", path.display());
            }
            println!(
                "stage1 finished: {} steps, checkpoint at {}",
                log.records.len(),
                out.display()
            );
            Ok(())
        }
        Command::RankLayers {
            checkpoint,
            data,
            gamma,
            out,
            config,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.data_train = d;
            }
            if let Some(g) = gamma {
                cfg.rc.gamma = parse_rational(&g)?;
            }
            let (mut model, _) = load_checkpoint(&checkpoint)?;
            let train = load_dataset(
                &cfg.data_train,
                Some((model.arch().input_height, model.arch().input_width)),
            )?;
            let eval_set = prepare_eval_set(&model, &train, &cfg.rc, &cfg.stage1.attack)?;
            let dict = build_sensitivity_dictionary(&mut model, &eval_set, &cfg.rc)?;
            dict.write(&out)?;
            for (id, rc) in dict.entries() {
                println!("{rc:.6}  {id}");
            }
            println!("sensitivity written to {}", out.display());
            Ok(())
        }
        Command::Stage2 {
            checkpoint,
            sensitivity,
            ratio,
            data,
            out,
            config,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.data_train = d;
            }
            if let Some(r) = ratio {
                cfg.stage2.topk_ratio = parse_rational(&r)?;
            }
            let (mut model, _) = load_checkpoint(&checkpoint)?;
            let train = load_dataset(
                &cfg.data_train,
                Some((model.arch().input_height, model.arch().input_width)),
            )?;
            let dict = SensitivityDictionary::read(&sensitivity)?;
            let selection = select_topk_least_robust(&dict, cfg.stage2.topk_ratio)?;
            println!(
                "fine-tuning {} layer(s): {}",
                selection.len(),
                selection.iter().cloned().collect::<Vec<_>>().join(", ")
            );
            let log = train_stage2(&mut model, &train, &selection, &cfg.stage2)?;
            save_checkpoint(
                &out,
                &model,
                &CheckpointMeta {
                    stage: "stage2".into(),
                    epoch: cfg.stage2.epochs,
                    seed: cfg.seed,
                    config_hash: cfg.config_hash(),
                },
            )?;
            log.write_jsonl(&out.join("train_log.jsonl"))?;
            println!("stage2 checkpoint at {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            attack,
            out,
            config,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.data_test = d;
            }
            let (model, _) = load_checkpoint(&checkpoint)?;
            let test = load_dataset(
                &cfg.data_test,
                Some((model.arch().input_height, model.arch().input_width)),
            )?;
            let report = if attack == "pgd" {
                evaluate(&model, &test, &EvalAttack::Pgd(&cfg.attack), cfg.seed)?
            } else if attack == "uap" {
                evaluate(
                    &model,
                    &test,
                    &EvalAttack::Uap {
                        cfg: &cfg.attack,
                        passes: cfg.uap_passes,
                        construction: &test,
                    },
                    cfg.seed,
                )?
            } else if let Some(path) = attack.strip_prefix("file:") {
                let uap = UniversalPerturbation::load(Path::new(path))?;
                evaluate(&model, &test, &EvalAttack::Fixed(&uap), cfg.seed)?
            } else if attack == "none" {
                evaluate(&model, &test, &EvalAttack::None, cfg.seed)?
            } else {
                return Err(Error::Config(format!(
                    "unknown attack '{attack}' (pgd | uap | file:<path> | none)"
                )));
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| Error::io(parent.display().to_string(), e))?;
                }
            }
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::io(out.display().to_string(), e))?,
            )
            .map_err(|e| Error::io(out.display().to_string(), e))?;
            println!(
                "TA {:.2}  RA {:.2}  ASR {:.2}  ({})",
                report.ta, report.ra, report.asr, report.attack_descriptor
            );
            Ok(())
        }
        Command::Attack {
            checkpoint,
            data,
            eps,
            method,
            out,
            config,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(d) = data {
                cfg.data_train = d;
            }
            if let Some(e) = eps {
                let v = parse_rational(&e)?;
                let ratio = if cfg.attack.epsilon > 0.0 {
                    cfg.attack.step_size / cfg.attack.epsilon
                } else {
                    0.25
                };
                cfg.attack.epsilon = v;
                if v > 0.0 {
                    cfg.attack.step_size = v * ratio;
                }
            }
            let (model, _) = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(
                &cfg.data_train,
                Some((model.arch().input_height, model.arch().input_width)),
            )?;
            match method.as_str() {
                "uap" => {
                    let (uap, rate) =
                        uap_attack(&model, &ds, &cfg.attack, cfg.uap_passes, cfg.seed)?;
                    uap.save(&out, cfg.seed)?;
                    println!(
                        "universal perturbation saved to {} (fooling rate {:.1}%)",
                        out.display(),
                        100.0 * rate
                    );
                }
                "pgd" => {
                    let (c, h, w) = ds.image_dims();
                    let mut deltas = Vec::with_capacity(ds.pixels().numel());
                    for (bi, idx) in ds.batch_indices(256).into_iter().enumerate() {
                        let batch = ds.batch(&idx);
                        let adv = pgd_attack(&model, &batch, &cfg.attack, cfg.seed + bi as u64)?;
                        for (a, b) in adv.pixels().data().iter().zip(batch.pixels().data()) {
                            deltas.push(a - b);
                        }
                    }
                    let meta = format!(
                        "{{\"epsilon\":{},\"norm_p\":\"{}\",\"seed\":{}}}",
                        cfg.attack.epsilon, cfg.attack.norm_p, cfg.seed
                    );
                    PackedFile {
                        arrays: vec![PackedArray::f64("delta", &[ds.len(), c, h, w], deltas)],
                        meta: Some(meta),
                    }
                    .write(&out)?;
                    println!(
                        "per-sample perturbations for {} images saved to {}",
                        ds.len(),
                        out.display()
                    );
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown attack method '{other}' (pgd | uap)"
                    )));
                }
            }
            Ok(())
        }
        Command::Pipeline {
            config,
            encoder,
            out_root,
            set,
        } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(e) = encoder {
                cfg.encoder = Some(e.to_string_lossy().into_owned());
            }
            if let Some(root) = out_root {
                cfg.output_root = root.to_string_lossy().into_owned();
            }
            let dir = run_pipeline(&cfg)?;
            println!("pipeline complete: {}", dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            set,
        } => {
            let cfg = load_config(config.as_ref(), &set)?;
            let axis = AblationAxis::parse(&axis)?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            let dir = run_ablation(&cfg, axis, &values)?;
            for row in genaf_core::pipeline::read_aggregate(&dir)? {
                println!(
                    "{} = {:>8}  TA {:.2}  RA {:.2}  ASR {:.2}",
                    axis.name(),
                    row.value,
                    row.ta,
                    row.ra,
                    row.asr
                );
            }
            println!("sweep complete: {}", dir.display());
            Ok(())
        }
        Command::Plot { dir } => {
            let files = emit_plots(&dir)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

/// Debug dump: benign and adversarial graph weight matrices for the
/// first training batch at the current parameters.
fn dump_first_batch_graphs(
    model: &genaf_core::model::DownstreamModel,
    train: &genaf_core::data::LabeledDataset,
    cfg: &RunConfig,
    path: &Path,
) -> Result<(), Error> {
    let idx: Vec<usize> = (0..cfg.stage1.batch_size.min(train.len())).collect();
    let benign = train.batch(&idx);
    let adv = pgd_attack(model, &benign, &cfg.stage1.attack, cfg.seed)?;
    let wb = build_feature_graph(&model.forward(&benign)?.logits)?.weights;
    let wa = build_feature_graph(&model.forward(&adv)?.logits)?.weights;
    let to_arr = |name: &str, t: &Tensor| PackedArray::f64(name, t.shape(), t.data().to_vec());
    PackedFile {
        arrays: vec![to_arr("w_benign", &wb), to_arr("w_adversarial", &wa)],
        meta: None,
    }
    .write(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
