//! Encoder provisioning: contrastive self-supervised pre-training at
//! desk scale (normalized temperature-scaled cross-entropy over two
//! augmented views per image), or loading an external checkpoint.

use crate::augment::augment_view;
use crate::checkpoint;
use crate::data::{load_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::Graph;
use crate::model::{ArchSpec, BnMode, DownstreamModel};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::util::rng_for;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub dataset_path: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub augmentation_seed: u64,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dataset_path: String::new(),
            epochs: 10,
            batch_size: 128,
            temperature: 0.5,
            augmentation_seed: 0,
            lr: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pre-training batch size must be >= 2".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("pre-training lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainLog {
    /// Mean contrastive loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Pre-trains an encoder on the configured dataset (labels unused).
/// The classifier is freshly initialized and never touched.
pub fn pretrain_encoder(
    cfg: &PretrainConfig,
    arch: &ArchSpec,
    seed: u64,
) -> Result<(DownstreamModel, PretrainLog)> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset_path, None)?;
    if data.is_empty() {
        return Err(Error::Input("pre-training dataset is empty".into()));
    }
    let mut model = DownstreamModel::new(arch.clone(), seed)?;
    let log = pretrain_in_place(&mut model, &data, cfg, seed)?;
    Ok((model, log))
}

/// Same as [`pretrain_encoder`] but over an in-memory dataset.
pub fn pretrain_in_place(
    model: &mut DownstreamModel,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("pre-training dataset is empty".into()));
    }
    let (c, h, w) = data.image_dims();
    let encoder_layers = model.encoder_layer_indices();
    let classifier_hash_before: Vec<Tensor> = model
        .classifier_layer_indices()
        .iter()
        .flat_map(|&li| model.layers()[li].params.clone())
        .collect();
    let mut opt = Adam::new(model, encoder_layers.clone(), cfg.lr);
    let is_encoder = {
        let set: std::collections::BTreeSet<usize> = encoder_layers.iter().copied().collect();
        move |i: usize| set.contains(&i)
    };
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in data
            .shuffled_batch_indices(cfg.batch_size, seed, epoch)
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 {
                continue;
            }
            let batch = data.batch(&idx);
            let b = idx.len();
            let per = c * h * w;
            // Two independent augmented views per image, view blocks
            // stacked so sample i pairs with i + b.
            let views: Vec<Vec<f64>> = exec::par_map(2 * b, |vi| {
                let (img_i, view_i) = (vi % b, vi / b);
                let mut rng = rng_for(
                    cfg.augmentation_seed,
                    "pretrain-aug",
                    ((epoch * 1_000_003 + bi) * 2 + view_i) as u64 * b as u64 + img_i as u64,
                );
                let img = &batch.pixels().data()[img_i * per..(img_i + 1) * per];
                augment_view(img, c, h, w, &mut rng)
            });
            let mut stacked = Vec::with_capacity(2 * b * per);
            for v in &views {
                stacked.extend_from_slice(v);
            }
            let pixels = Tensor::from_vec(&[2 * b, c, h, w], stacked);
            let pairs: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();

            let mut g = Graph::new();
            let x = g.constant(pixels);
            let binding = model.bind_params(&mut g, &is_encoder);
            let out = model.forward_graph(&mut g, &binding, x, BnMode::Train { frozen: None })?;
            let z = g.l2_normalize_rows(out.features)?;
            let sim = g.matmul_nt(z, z);
            let sim = g.mul_const(sim, 1.0 / cfg.temperature);
            let loss = g.paired_log_softmax_nll(sim, &pairs);
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step: bi,
                    msg: "non-finite contrastive loss".into(),
                });
            }
            let mut grads = g.backward(loss);
            let group_grads: Vec<Vec<Option<Tensor>>> = encoder_layers
                .iter()
                .map(|&li| {
                    binding.vars[li]
                        .iter()
                        .map(|&v| grads.take(v))
                        .collect()
                })
                .collect();
            opt.step(model, &group_grads);
            model.apply_stat_updates(&out.stat_updates);
            epoch_loss += loss_val;
            batches += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    // Pre-training never touches classifier parameters.
    let classifier_after: Vec<Tensor> = model
        .classifier_layer_indices()
        .iter()
        .flat_map(|&li| model.layers()[li].params.clone())
        .collect();
    debug_assert_eq!(classifier_hash_before, classifier_after);
    Ok(log)
}

/// Loads a model checkpoint from disk (see checkpoint module for the
/// directory format).
pub fn load_encoder(path: &Path) -> Result<DownstreamModel> {
    Ok(checkpoint::load_checkpoint(path)?.0)
}

/// Trains a logistic-regression probe on frozen encoder features and
/// returns its accuracy on the test split. Used as an independent check
/// that pre-training learned a linearly separable representation.
pub fn linear_probe_accuracy(
    model: &DownstreamModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let k = train.num_classes();
    let feats = |ds: &LabeledDataset| -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut d = 0;
        for idx in ds.batch_indices(256) {
            let b = ds.batch(&idx);
            let out = model.forward(&b)?;
            d = out.features.shape()[1];
            rows.extend_from_slice(out.features.data());
        }
        Ok(Tensor::from_vec(&[ds.len(), d], rows))
    };
    let ftr = feats(train)?;
    let fte = feats(test)?;
    let d = ftr.shape()[1];
    let mut wdata = vec![0.0; k * d + k];
    // Plain full-batch gradient descent on softmax regression.
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.constant(ftr.clone());
        let wv = g.leaf(Tensor::from_vec(&[k, d], wdata[..k * d].to_vec()));
        let bv = g.leaf(Tensor::from_vec(&[k], wdata[k * d..].to_vec()));
        let logits = g.linear(x, wv, bv);
        let loss = g.cross_entropy_mean(logits, train.labels())?;
        let mut grads = g.backward(loss);
        let gw = grads.take(wv).unwrap();
        let gb = grads.take(bv).unwrap();
        for (p, gv) in wdata[..k * d].iter_mut().zip(gw.data()) {
            *p -= lr * gv;
        }
        for (p, gv) in wdata[k * d..].iter_mut().zip(gb.data()) {
            *p -= lr * gv;
        }
    }
    let mut correct = 0usize;
    for i in 0..fte.shape()[0] {
        let row = &fte.data()[i * d..(i + 1) * d];
        let mut best = (0usize, f64::NEG_INFINITY);
        for o in 0..k {
            let mut acc = wdata[k * d + o];
            for j in 0..d {
                acc += wdata[o * d + j] * row[j];
            }
            if acc > best.1 {
                best = (o, acc);
            }
        }
        if best.0 == test.labels()[i] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / fte.shape()[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerRole;
    use crate::synth;

    fn blob_arch() -> ArchSpec {
        let mut arch = ArchSpec::desk(4);
        arch.input_height = 16;
        arch.input_width = 16;
        arch.feature_dim = 32;
        arch
    }

    fn blob_config(n: usize, epochs: usize) -> (PretrainConfig, LabeledDataset) {
        let spec = format!("synth:blobs:4:{n}:16:3");
        let cfg = PretrainConfig {
            dataset_path: spec.clone(),
            epochs,
            batch_size: 64,
            temperature: 0.5,
            augmentation_seed: 5,
            lr: 1e-3,
        };
        let data = synth::generate_from_spec(&spec).unwrap();
        (cfg, data)
    }

    #[test]
    fn zero_epochs_is_random_initialization() {
        let (cfg, _) = blob_config(16, 0);
        let (model, log) = pretrain_encoder(&cfg, &blob_arch(), 7).unwrap();
        let fresh = DownstreamModel::new(blob_arch(), 7).unwrap();
        assert_eq!(model.model_hash(), fresh.model_hash());
        assert!(log.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_reproduces_parameters() {
        let (cfg, _) = blob_config(32, 2);
        let (a, _) = pretrain_encoder(&cfg, &blob_arch(), 9).unwrap();
        let (b, _) = pretrain_encoder(&cfg, &blob_arch(), 9).unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn classifier_untouched_and_loss_decreases() {
        let (cfg, data) = blob_config(128, 4);
        let mut model = DownstreamModel::new(blob_arch(), 11).unwrap();
        let cls_before: Vec<_> = model
            .classifier_layer_indices()
            .iter()
            .map(|&li| model.layers()[li].params.clone())
            .collect();
        let log = pretrain_in_place(&mut model, &data, &cfg, 11).unwrap();
        let cls_after: Vec<_> = model
            .classifier_layer_indices()
            .iter()
            .map(|&li| model.layers()[li].params.clone())
            .collect();
        assert_eq!(cls_before, cls_after);
        assert!(
            log.epoch_losses.last().unwrap() <= log.epoch_losses.first().unwrap(),
            "contrastive loss should not increase: {:?}",
            log.epoch_losses
        );
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = PretrainConfig {
            dataset_path: "synth:blobs:2:4:16:0".into(),
            ..Default::default()
        };
        let data = synth::generate_from_spec(&cfg.dataset_path)
            .unwrap()
            .subset(&[]);
        let mut model = DownstreamModel::new(blob_arch(), 1).unwrap();
        assert!(matches!(
            pretrain_in_place(&mut model, &data, &cfg, 1),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn linear_probe_separates_blobs_after_pretraining() {
        let (cfg, _) = blob_config(512, 20);
        let (model, _) = pretrain_encoder(&cfg, &blob_arch(), 21).unwrap();
        let train = synth::generate_from_spec("synth:blobs:2:256:16:41").unwrap();
        let test = synth::generate_from_spec("synth:blobs:2:128:16:42").unwrap();
        let acc = linear_probe_accuracy(&model, &train, &test, 300, 0.5).unwrap();
        assert!(acc > 90.0, "linear probe accuracy {acc} on blobs");
    }

    #[test]
    fn role_partition_is_stable() {
        let model = DownstreamModel::new(blob_arch(), 1).unwrap();
        for &li in &model.encoder_layer_indices() {
            assert_eq!(model.layers()[li].role, LayerRole::Encoder);
        }
        for &li in &model.classifier_layer_indices() {
            assert_eq!(model.layers()[li].role, LayerRole::Classifier);
        }
    }
}
