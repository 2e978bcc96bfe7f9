//! Testing accuracy, robust accuracy, and attack success rate.
//!
//! TA and RA are label-based accuracies on clean and adversarial data;
//! ASR is label-free, counting prediction flips between paired clean and
//! adversarial samples. Argmax ties resolve to the lowest class index on
//! both sides.

use crate::attack::{
    apply_perturbation, pgd_attack, predictions_chunked, uap_attack, AttackConfig,
    UniversalPerturbation,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::DownstreamModel;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent correct on clean data.
    pub ta: f64,
    /// Percent correct on adversarial data.
    pub ra: f64,
    /// Percent of paired samples whose prediction flips.
    pub asr: f64,
    pub n_clean: usize,
    pub n_adv: usize,
    pub attack_descriptor: String,
    pub model_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Model predictions over a dataset, evaluated in chunks.
pub fn predictions(model: &DownstreamModel, data: &LabeledDataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    predictions_chunked(model, data.pixels())
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    100.0 * preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Percent of clean samples classified correctly.
pub fn compute_ta(model: &DownstreamModel, clean: &LabeledDataset) -> Result<f64> {
    let preds = predictions(model, clean)?;
    Ok(accuracy(&preds, clean.labels()))
}

/// Percent of adversarial samples classified into their true label.
pub fn compute_ra(model: &DownstreamModel, adv: &LabeledDataset) -> Result<f64> {
    let preds = predictions(model, adv)?;
    Ok(accuracy(&preds, adv.labels()))
}

/// Percent of pairs whose predictions differ between clean and
/// adversarial inputs. Labels are irrelevant; pairing is by index.
pub fn compute_asr(
    model: &DownstreamModel,
    clean: &LabeledDataset,
    adv: &LabeledDataset,
) -> Result<f64> {
    if clean.len() != adv.len() {
        return Err(Error::Input(format!(
            "unpaired evaluation sets: {} clean vs {} adversarial",
            clean.len(),
            adv.len()
        )));
    }
    let pc = predictions(model, clean)?;
    let pa = predictions(model, adv)?;
    Ok(100.0 * pc.iter().zip(&pa).filter(|(a, b)| a != b).count() as f64 / pc.len() as f64)
}

/// Attack used for an evaluation run.
pub enum EvalAttack<'a> {
    /// Adversarial set equals the clean set.
    None,
    Pgd(&'a AttackConfig),
    /// Universal perturbation built on a construction set, then applied
    /// to the test set.
    Uap {
        cfg: &'a AttackConfig,
        passes: usize,
        construction: &'a LabeledDataset,
    },
    /// A pre-built perturbation (e.g. loaded from file).
    Fixed(&'a UniversalPerturbation),
}

impl EvalAttack<'_> {
    fn descriptor(&self) -> String {
        match self {
            EvalAttack::None => "none".into(),
            EvalAttack::Pgd(cfg) => cfg.descriptor(),
            EvalAttack::Uap { cfg, passes, .. } => format!(
                "uap(eps={:.6},p={},passes={passes})",
                cfg.epsilon, cfg.norm_p
            ),
            EvalAttack::Fixed(uap) => format!(
                "file(eps={:.6},p={})",
                uap.epsilon, uap.norm_p
            ),
        }
    }
}

/// Builds the adversarial counterpart of `test` under the given attack.
pub fn adversarial_counterpart(
    model: &DownstreamModel,
    test: &LabeledDataset,
    attack: &EvalAttack<'_>,
    seed: u64,
) -> Result<LabeledDataset> {
    match attack {
        EvalAttack::None => Ok(test.clone()),
        EvalAttack::Pgd(cfg) => {
            let mut advs = Vec::new();
            for (bi, idx) in test.batch_indices(256).into_iter().enumerate() {
                let batch = test.batch(&idx);
                let adv = pgd_attack(model, &batch, cfg, seed.wrapping_add(bi as u64))?;
                advs.push(adv);
            }
            let (c, h, w) = test.image_dims();
            let mut pixels = Vec::with_capacity(test.pixels().numel());
            let mut labels = Vec::with_capacity(test.len());
            for b in advs {
                pixels.extend_from_slice(b.pixels().data());
                labels.extend_from_slice(b.labels());
            }
            LabeledDataset::new(
                crate::tensor::Tensor::from_vec(&[test.len(), c, h, w], pixels),
                labels,
                test.num_classes(),
            )
        }
        EvalAttack::Uap {
            cfg,
            passes,
            construction,
        } => {
            let (uap, _rate) = uap_attack(model, construction, cfg, *passes, seed)?;
            let adv = apply_perturbation(&test.full_batch(), &uap)?;
            LabeledDataset::new(
                adv.pixels().clone(),
                adv.labels().to_vec(),
                test.num_classes(),
            )
        }
        EvalAttack::Fixed(uap) => {
            let adv = apply_perturbation(&test.full_batch(), uap)?;
            LabeledDataset::new(
                adv.pixels().clone(),
                adv.labels().to_vec(),
                test.num_classes(),
            )
        }
    }
}

/// Full TA/RA/ASR evaluation of a model under one attack.
pub fn evaluate(
    model: &DownstreamModel,
    test: &LabeledDataset,
    attack: &EvalAttack<'_>,
    seed: u64,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let adv = adversarial_counterpart(model, test, attack, seed)?;
    let ta = compute_ta(model, test)?;
    let ra = compute_ra(model, &adv)?;
    let asr = compute_asr(model, test, &adv)?;
    Ok(MetricsReport {
        ta,
        ra,
        asr,
        n_clean: test.len(),
        n_adv: adv.len(),
        attack_descriptor: attack.descriptor(),
        model_hash: model.model_hash(),
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
