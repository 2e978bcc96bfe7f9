//! Stage I: genetic-driven dual-track adversarial fine-tuning.
//!
//! Minimizes L_GDAT = L_dat + lambda * L_gr, where L_dat is the
//! cross-entropy on adversarial examples and L_gr the binary-KL
//! divergence between the benign and adversarial feature-graph edge
//! weights. The encoder and classifier are updated by two independent
//! Adam instances at their own learning rates.

use crate::attack::{pgd_attack, AttackConfig};
use crate::data::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::feature_graph::{build_feature_graph, genetic_regularization_loss, GraphPair};
use crate::graph::{Graph, Var};
use crate::model::{BnMode, DownstreamModel, GraphForward};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainlog::{StepRecord, TrainLog};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvSchedule {
    /// Regenerate the adversarial batch at the current parameters every
    /// step.
    PerBatch,
    /// Build one adversarial dataset at the initial parameters and reuse
    /// it for all epochs.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFeatures {
    /// Classifier logits (pre-softmax) as graph nodes.
    Logits,
    /// Encoder representation as graph nodes.
    Encoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Config {
    pub lambda: f64,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub attack: AttackConfig,
    pub adv_schedule: AdvSchedule,
    pub graph_features: GraphFeatures,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lambda: 20.0,
            lr_encoder: 1e-4,
            lr_classifier: 5e-3,
            epochs: 50,
            batch_size: 256,
            attack: AttackConfig::default(),
            adv_schedule: AdvSchedule::PerBatch,
            graph_features: GraphFeatures::Logits,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.lr_encoder < 0.0 || self.lr_classifier < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "stage-1 batch size must be >= 2 (feature graphs need 2 nodes)".into(),
            ));
        }
        self.attack.validate()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GdatLoss {
    pub total: f64,
    pub dat: f64,
    pub gr: f64,
}

fn check_aligned(benign: &ImageBatch, adversarial: &ImageBatch) -> Result<()> {
    if benign.len() != adversarial.len() || benign.labels() != adversarial.labels() {
        return Err(Error::Input(
            "benign and adversarial batches are not sample-aligned".into(),
        ));
    }
    Ok(())
}

fn node_features(out: &GraphForward, which: GraphFeatures) -> Var {
    match which {
        GraphFeatures::Logits => out.logits,
        GraphFeatures::Encoder => out.features,
    }
}

/// The composed loss (total, dat, gr) on one aligned batch pair,
/// evaluated in inference mode with default (logit) graph nodes.
pub fn compute_gdat_loss(
    model: &DownstreamModel,
    benign: &ImageBatch,
    adversarial: &ImageBatch,
    lambda: f64,
) -> Result<GdatLoss> {
    compute_gdat_loss_with(model, benign, adversarial, lambda, GraphFeatures::Logits)
}

pub fn compute_gdat_loss_with(
    model: &DownstreamModel,
    benign: &ImageBatch,
    adversarial: &ImageBatch,
    lambda: f64,
    which: GraphFeatures,
) -> Result<GdatLoss> {
    check_aligned(benign, adversarial)?;
    let adv_out = model.forward(adversarial)?;
    let ben_out = model.forward(benign)?;
    let dat = crate::model::cross_entropy(&adv_out.logits, adversarial.labels())?;
    let pick = |o: &crate::model::ForwardOutput| match which {
        GraphFeatures::Logits => o.logits.clone(),
        GraphFeatures::Encoder => o.features.clone(),
    };
    let pair = GraphPair::aligned(
        build_feature_graph(&pick(&ben_out))?,
        build_feature_graph(&pick(&adv_out))?,
    );
    let gr = genetic_regularization_loss(&pair)?;
    Ok(GdatLoss {
        total: dat + lambda * gr,
        dat,
        gr,
    })
}

/// One optimizer step on an aligned batch pair; returns the logged loss
/// components.
#[allow(clippy::too_many_arguments)]
fn gdat_step(
    model: &mut DownstreamModel,
    benign: &ImageBatch,
    adversarial: &ImageBatch,
    cfg: &Stage1Config,
    opt_encoder: &mut Adam,
    opt_classifier: &mut Adam,
    epoch: usize,
    step: usize,
) -> Result<GdatLoss> {
    check_aligned(benign, adversarial)?;
    let labels = adversarial.labels().to_vec();
    // With lambda = 0 the benign branch carries no gradient; when the
    // adversarial batch also equals the benign batch (epsilon = 0) its
    // graphs are identical and gr is exactly zero, so one forward pass
    // suffices.
    let identical = adversarial.pixels() == benign.pixels();
    let single_branch = cfg.lambda == 0.0 && identical;
    let mut g = Graph::new();
    let binding = model.bind_params(&mut g, |_| true);
    let xa = g.constant(adversarial.pixels().clone());
    let out_adv = model.forward_graph(&mut g, &binding, xa, BnMode::Train { frozen: None })?;
    let out_ben = if single_branch {
        None
    } else {
        let xb = g.constant(benign.pixels().clone());
        Some(model.forward_graph(&mut g, &binding, xb, BnMode::Train { frozen: None })?)
    };
    let dat = g.cross_entropy_mean(out_adv.logits, &labels)?;
    let dat_val = g.value(dat).item();

    let (loss_var, gr_val) = match (&out_ben, cfg.lambda > 0.0) {
        (None, _) => (dat, 0.0),
        (Some(ben), true) => {
            let fb = node_features(ben, cfg.graph_features);
            let fa = node_features(&out_adv, cfg.graph_features);
            let wb = g.feature_graph_weights(fb)?;
            let wa = g.feature_graph_weights(fa)?;
            let gr = g.binary_kl_graphs(wb, wa);
            let gr_val = g.value(gr).item();
            (g.add_scaled(dat, gr, cfg.lambda), gr_val)
        }
        (Some(ben), false) => {
            // No gradient path needed; the value is still reported.
            let fb = node_features(ben, cfg.graph_features);
            let fa = node_features(&out_adv, cfg.graph_features);
            let pair = GraphPair::aligned(
                build_feature_graph(g.value(fb))?,
                build_feature_graph(g.value(fa))?,
            );
            (dat, genetic_regularization_loss(&pair)?)
        }
    };
    let total_val = dat_val + cfg.lambda * gr_val;
    if !total_val.is_finite() {
        return Err(Error::Training {
            epoch,
            step,
            msg: format!("non-finite loss (dat={dat_val}, gr={gr_val})"),
        });
    }

    let mut grads = g.backward(loss_var);
    let collect = |grads: &mut crate::graph::Gradients, layers: &[usize]| {
        layers
            .iter()
            .map(|&li| {
                binding.vars[li]
                    .iter()
                    .map(|&v| grads.take(v))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let enc_layers = opt_encoder.layer_indices().to_vec();
    let cls_layers = opt_classifier.layer_indices().to_vec();
    let enc_grads = collect(&mut grads, &enc_layers);
    let cls_grads = collect(&mut grads, &cls_layers);
    opt_encoder.step(model, &enc_grads);
    opt_classifier.step(model, &cls_grads);
    // Stat updates in forward order: adversarial branch, then benign.
    model.apply_stat_updates(&out_adv.stat_updates);
    if let Some(ben) = &out_ben {
        model.apply_stat_updates(&ben.stat_updates);
    }
    Ok(GdatLoss {
        total: total_val,
        dat: dat_val,
        gr: gr_val,
    })
}

fn attack_seed(base: u64, epoch: usize, step: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 20)
        .wrapping_add(step as u64)
}

/// Runs stage-1 fine-tuning in place, returning the training log.
pub fn train_stage1(
    model: &mut DownstreamModel,
    data: &LabeledDataset,
    cfg: &Stage1Config,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let start = Instant::now();
    let mut opt_encoder = Adam::new(model, model.encoder_layer_indices(), cfg.lr_encoder);
    let mut opt_classifier = Adam::new(model, model.classifier_layer_indices(), cfg.lr_classifier);

    // Precomputed schedule: one-shot adversarial dataset built at the
    // initial parameters, indexed by sample position.
    let precomputed: Option<Tensor> = match cfg.adv_schedule {
        AdvSchedule::PerBatch => None,
        AdvSchedule::Precomputed => {
            let (c, h, w) = data.image_dims();
            let mut pixels = Vec::with_capacity(data.pixels().numel());
            for (bi, idx) in data.batch_indices(cfg.batch_size).into_iter().enumerate() {
                let batch = data.batch(&idx);
                let adv = pgd_attack(model, &batch, &cfg.attack, attack_seed(cfg.seed, 0, bi))?;
                pixels.extend_from_slice(adv.pixels().data());
            }
            Some(Tensor::from_vec(&[data.len(), c, h, w], pixels))
        }
    };

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        for (step, idx) in data
            .shuffled_batch_indices(cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 {
                continue;
            }
            let benign = data.batch(&idx);
            let adversarial = match &precomputed {
                None => pgd_attack(
                    model,
                    &benign,
                    &cfg.attack,
                    attack_seed(cfg.seed, epoch + 1, step),
                )?,
                Some(adv_pixels) => {
                    let (c, h, w) = data.image_dims();
                    let per = c * h * w;
                    let mut out = Vec::with_capacity(idx.len() * per);
                    for &i in &idx {
                        out.extend_from_slice(&adv_pixels.data()[i * per..(i + 1) * per]);
                    }
                    benign.with_pixels(Tensor::from_vec(&[idx.len(), c, h, w], out))?
                }
            };
            let loss = gdat_step(
                model,
                &benign,
                &adversarial,
                cfg,
                &mut opt_encoder,
                &mut opt_classifier,
                epoch,
                step,
            )?;
            log.records.push(StepRecord {
                epoch,
                step,
                dat: loss.dat,
                gr: loss.gr,
                total: loss.total,
                lr_e: cfg.lr_encoder,
                lr_c: cfg.lr_classifier,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}
