//! Stage II: standard supervised fine-tuning of the selected
//! robust-redundant layers, everything else frozen. Frozen layers run in
//! inference-statistics mode so their normalization buffers never drift;
//! no attack is invoked anywhere in this stage.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{BnMode, DownstreamModel};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainlog::{StepRecord, TrainLog};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Fraction of layers (least robust first) to fine-tune.
    pub topk_ratio: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            topk_ratio: 0.2,
            lr: 1e-3,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.topk_ratio) {
            return Err(Error::Config("topk_ratio must be in [0, 1]".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("stage-2 lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("stage-2 batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fine-tunes only the selected layers on benign data with one Adam
/// instance; all other parameters (and the running statistics of frozen
/// normalization layers) stay bitwise unchanged.
pub fn train_stage2(
    model: &mut DownstreamModel,
    data: &LabeledDataset,
    selection: &BTreeSet<String>,
    cfg: &Stage2Config,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let mut selected_indices = BTreeSet::new();
    for id in selection {
        match model.layer_index(id) {
            Some(i) => {
                selected_indices.insert(i);
            }
            None => {
                return Err(Error::Input(format!(
                    "selection names unknown layer '{id}'"
                )))
            }
        }
    }
    let frozen: BTreeSet<usize> = (0..model.layers().len())
        .filter(|i| !selected_indices.contains(i))
        .collect();
    let start = Instant::now();
    let mut opt = Adam::new(model, selected_indices.iter().copied().collect(), cfg.lr);
    let mut log = TrainLog::default();
    if selected_indices.is_empty() {
        // Everything frozen: training is a no-op by construction.
        return Ok(log);
    }
    for epoch in 0..cfg.epochs {
        for (step, idx) in data
            .shuffled_batch_indices(cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let batch = data.batch(&idx);
            let labels = batch.labels().to_vec();
            let mut g = Graph::new();
            let binding = model.bind_params(&mut g, |i| selected_indices.contains(&i));
            let x = g.constant(batch.pixels().clone());
            let out = model.forward_graph(
                &mut g,
                &binding,
                x,
                BnMode::Train {
                    frozen: Some(&frozen),
                },
            )?;
            let loss = g.cross_entropy_mean(out.logits, &labels)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    msg: "non-finite stage-2 loss".into(),
                });
            }
            let mut grads = g.backward(loss);
            let group_grads: Vec<Vec<Option<Tensor>>> = opt
                .layer_indices()
                .to_vec()
                .iter()
                .map(|&li| binding.vars[li].iter().map(|&v| grads.take(v)).collect())
                .collect();
            opt.step(model, &group_grads);
            // Only selected batchnorm layers produced train-mode stats.
            debug_assert!(out
                .stat_updates
                .iter()
                .all(|u| selected_indices.contains(&u.layer_index)));
            model.apply_stat_updates(&out.stat_updates);
            log.records.push(StepRecord {
                epoch,
                step,
                dat: loss_val,
                gr: 0.0,
                total: loss_val,
                lr_e: cfg.lr,
                lr_c: cfg.lr,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}
