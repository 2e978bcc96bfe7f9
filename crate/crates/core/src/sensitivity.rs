//! Per-layer robustness contribution: the maximal increase of the
//! adversarial loss achievable by perturbing a single layer's weights
//! within a relative norm ball, estimated by projected gradient ascent
//! with the zero perturbation always included as a candidate. Layers
//! with low contribution are "robust-redundant" and safe to fine-tune on
//! benign data in stage 2.

use crate::attack::{pgd_attack, AttackConfig, NormP};
use crate::data::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{cross_entropy, BnMode, DownstreamModel};
use crate::util::sign;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RcConfig {
    /// Relative weight-perturbation radius: the ball is
    /// gamma * ||theta_layer||_p.
    pub gamma: f64,
    pub norm_p: NormP,
    pub ascent_steps: usize,
    pub eval_subset_size: usize,
    pub seed: u64,
}

impl Default for RcConfig {
    fn default() -> Self {
        RcConfig {
            gamma: 0.01,
            norm_p: NormP::L2,
            ascent_steps: 5,
            eval_subset_size: 1024,
            seed: 0,
        }
    }
}

impl RcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.ascent_steps == 0 {
            return Err(Error::Config("ascent_steps must be >= 1".into()));
        }
        if self.eval_subset_size == 0 {
            return Err(Error::Config("eval_subset_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed evaluation material shared by every layer's RC trial: a benign
/// subset and its one-shot adversarial counterpart, both frozen.
#[derive(Clone, Debug)]
pub struct RcEvalSet {
    batches: Vec<ImageBatch>,
    total: usize,
}

impl RcEvalSet {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// The frozen adversarial batches, in evaluation order.
    pub fn batches(&self) -> &[ImageBatch] {
        &self.batches
    }
}

/// Samples the fixed evaluation subset and generates its adversarial
/// examples at the current parameters.
pub fn prepare_eval_set(
    model: &DownstreamModel,
    data: &LabeledDataset,
    cfg: &RcConfig,
    attack: &AttackConfig,
) -> Result<RcEvalSet> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("sensitivity evaluation dataset is empty".into()));
    }
    let n = cfg.eval_subset_size.min(data.len());
    let indices: Vec<usize> = data
        .shuffled_batch_indices(data.len(), cfg.seed, 0)
        .into_iter()
        .flatten()
        .take(n)
        .collect();
    let subset = data.subset(&indices);
    let mut batches = Vec::new();
    for (bi, idx) in subset.batch_indices(256).into_iter().enumerate() {
        let batch = subset.batch(&idx);
        batches.push(pgd_attack(
            model,
            &batch,
            attack,
            cfg.seed.wrapping_add(bi as u64),
        )?);
    }
    Ok(RcEvalSet { batches, total: n })
}

/// Mean adversarial cross-entropy over the fixed evaluation set.
pub fn adversarial_loss(model: &DownstreamModel, eval: &RcEvalSet) -> Result<f64> {
    let mut total = 0.0;
    for b in &eval.batches {
        let out = model.forward(b)?;
        total += cross_entropy(&out.logits, b.labels())? * b.len() as f64;
    }
    Ok(total / eval.total as f64)
}

/// Gradient of the mean adversarial loss with respect to one layer's
/// parameters, flattened in parameter order.
fn layer_gradient(model: &DownstreamModel, eval: &RcEvalSet, layer: usize) -> Result<Vec<f64>> {
    let mut flat: Vec<f64> = Vec::new();
    for b in &eval.batches {
        let mut g = Graph::new();
        let x = g.constant(b.pixels().clone());
        let binding = model.bind_params(&mut g, |i| i == layer);
        let out = model.forward_graph(&mut g, &binding, x, BnMode::Eval)?;
        let loss = g.cross_entropy_mean(out.logits, b.labels())?;
        let mut grads = g.backward(loss);
        let weight = b.len() as f64 / eval.total as f64;
        let mut offset = 0usize;
        for &v in &binding.vars[layer] {
            let gt = grads.take(v);
            let numel = g.value(v).numel();
            if flat.len() < offset + numel {
                flat.resize(offset + numel, 0.0);
            }
            if let Some(gt) = gt {
                for (acc, gv) in flat[offset..offset + numel].iter_mut().zip(gt.data()) {
                    *acc += weight * gv;
                }
            }
            offset += numel;
        }
    }
    Ok(flat)
}

fn layer_flat(model: &DownstreamModel, layer: usize) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in &model.layers()[layer].params {
        flat.extend_from_slice(t.data());
    }
    flat
}

fn set_layer_flat(model: &mut DownstreamModel, layer: usize, flat: &[f64]) {
    let mut offset = 0;
    for t in &mut model.layers_mut()[layer].params {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn norm_of(v: &[f64], p: NormP) -> f64 {
    match p {
        NormP::Inf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        NormP::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

fn project_ball(v: &mut [f64], radius: f64, p: NormP) {
    match p {
        NormP::Inf => {
            for x in v.iter_mut() {
                *x = x.clamp(-radius, radius);
            }
        }
        NormP::L2 => {
            let n = norm_of(v, NormP::L2);
            if n > radius && n > 0.0 {
                let s = radius / n;
                for x in v.iter_mut() {
                    *x *= s;
                }
            }
        }
    }
}

/// RC estimates for an ascending list of gamma values, sharing one
/// ascent path: the path is walked at the largest radius, and each
/// smaller radius evaluates the projections of the same path points.
/// Candidate sets are cumulative across radii (every candidate feasible
/// at a smaller radius is feasible at a larger one), which makes the
/// profile monotone by construction.
pub fn layer_rc_profile(
    model: &mut DownstreamModel,
    layer_id: &str,
    eval: &RcEvalSet,
    cfg: &RcConfig,
    gammas: &[f64],
) -> Result<Vec<f64>> {
    layer_rc_profile_with_probe(model, layer_id, eval, cfg, gammas, &mut |_| {})
}

/// Probe variant: `probe` runs after every trial mutation so callers can
/// verify locality (only the target layer changes during a trial).
pub fn layer_rc_profile_with_probe(
    model: &mut DownstreamModel,
    layer_id: &str,
    eval: &RcEvalSet,
    cfg: &RcConfig,
    gammas: &[f64],
    probe: &mut dyn FnMut(&DownstreamModel),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if gammas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("gamma list must be ascending".into()));
    }
    let layer = model
        .layer_index(layer_id)
        .ok_or_else(|| Error::Input(format!("model has no layer '{layer_id}'")))?;
    let snapshot = model.snapshot();
    let result = rc_profile_inner(model, layer, eval, cfg, gammas, probe);
    // Bitwise restoration, even on error.
    model
        .restore(&snapshot)
        .expect("snapshot from the same model always restores");
    result
}

fn rc_profile_inner(
    model: &mut DownstreamModel,
    layer: usize,
    eval: &RcEvalSet,
    cfg: &RcConfig,
    gammas: &[f64],
    probe: &mut dyn FnMut(&DownstreamModel),
) -> Result<Vec<f64>> {
    let theta0 = layer_flat(model, layer);
    let base_norm = norm_of(&theta0, cfg.norm_p);
    let r_max = gammas.last().copied().unwrap_or(0.0) * base_norm;
    if r_max == 0.0 {
        return Ok(vec![0.0; gammas.len()]);
    }
    let base_loss = adversarial_loss(model, eval)?;

    // Ascent path at the largest radius.
    let mut delta = vec![0.0; theta0.len()];
    let mut path: Vec<Vec<f64>> = Vec::with_capacity(cfg.ascent_steps);
    let alpha = r_max / cfg.ascent_steps as f64;
    for _ in 0..cfg.ascent_steps {
        let grad = layer_gradient(model, eval, layer)?;
        let mut stepv: Vec<f64> = match cfg.norm_p {
            NormP::Inf => grad.iter().map(|g| sign(*g)).collect(),
            NormP::L2 => {
                let n = norm_of(&grad, NormP::L2);
                if n == 0.0 {
                    break;
                }
                grad.iter().map(|g| g / n).collect()
            }
        };
        for (d, s) in delta.iter_mut().zip(stepv.iter_mut()) {
            *d += alpha * *s;
        }
        project_ball(&mut delta, r_max, cfg.norm_p);
        path.push(delta.clone());
        let cand: Vec<f64> = theta0.iter().zip(&delta).map(|(t, d)| t + d).collect();
        set_layer_flat(model, layer, &cand);
        probe(model);
    }

    // Evaluate cumulative candidate sets per radius; the zero
    // perturbation is always a candidate, so RC >= 0.
    let mut results = Vec::with_capacity(gammas.len());
    let mut best = 0.0f64;
    for &gamma in gammas {
        let r = gamma * base_norm;
        if r > 0.0 {
            for p in &path {
                let mut cand_delta = p.clone();
                project_ball(&mut cand_delta, r, cfg.norm_p);
                let cand: Vec<f64> = theta0
                    .iter()
                    .zip(&cand_delta)
                    .map(|(t, d)| t + d)
                    .collect();
                set_layer_flat(model, layer, &cand);
                probe(model);
                let loss = adversarial_loss(model, eval)?;
                best = best.max(loss - base_loss);
            }
        }
        results.push(best);
    }
    Ok(results)
}

/// The robustness contribution of a single layer at the configured
/// gamma. The model is bitwise restored afterward.
pub fn layer_robustness_contribution(
    model: &mut DownstreamModel,
    layer_id: &str,
    eval: &RcEvalSet,
    cfg: &RcConfig,
) -> Result<f64> {
    Ok(layer_rc_profile(model, layer_id, eval, cfg, &[cfg.gamma])?[0])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SensitivityEntry {
    layer_id: String,
    rc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityDictionary {
    pub model_hash: String,
    pub config: RcConfig,
    /// Entries sorted ascending by rc (registry order on ties).
    entries: Vec<SensitivityEntry>,
}

impl SensitivityDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rc(&self, layer_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer_id == layer_id)
            .map(|e| e.rc)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|e| (e.layer_id.as_str(), e.rc))
    }

    /// Builds from (layer_id, rc) pairs given in registry order.
    pub fn from_registry_order(
        pairs: Vec<(String, f64)>,
        config: RcConfig,
        model_hash: String,
    ) -> Self {
        let mut entries: Vec<(usize, SensitivityEntry)> = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (layer_id, rc))| (i, SensitivityEntry { layer_id, rc }))
            .collect();
        entries.sort_by(|(ia, a), (ib, b)| {
            a.rc.partial_cmp(&b.rc)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        });
        SensitivityDictionary {
            model_hash,
            config,
            entries: entries.into_iter().map(|(_, e)| e).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("invalid sensitivity file: {e}")))
    }
}

/// One RC per layer on the shared evaluation set; parameters unchanged
/// afterward.
pub fn build_sensitivity_dictionary(
    model: &mut DownstreamModel,
    eval: &RcEvalSet,
    cfg: &RcConfig,
) -> Result<SensitivityDictionary> {
    let hash = model.model_hash();
    let ids: Vec<String> = model.layers().iter().map(|l| l.id.clone()).collect();
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let rc = layer_robustness_contribution(model, &id, eval, cfg)?;
        pairs.push((id, rc));
    }
    debug_assert_eq!(model.model_hash(), hash);
    Ok(SensitivityDictionary::from_registry_order(
        pairs,
        *cfg,
        hash,
    ))
}

/// The floor(ratio * L) layer ids with smallest robustness contribution;
/// ties resolve in registry order.
pub fn select_topk_least_robust(
    dict: &SensitivityDictionary,
    ratio: f64,
) -> Result<BTreeSet<String>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Input(format!("ratio {ratio} outside [0, 1]")));
    }
    let k = (ratio * dict.len() as f64).floor() as usize;
    Ok(dict
        .entries
        .iter()
        .take(k)
        .map(|e| e.layer_id.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use crate::tensor::Tensor;
    use crate::util::rng_for;
    use rand::Rng;

    fn tiny_setup(seed: u64) -> (DownstreamModel, RcEvalSet, RcConfig) {
        let model = DownstreamModel::new(ArchSpec::tiny(2), seed).unwrap();
        let mut rng = rng_for(seed, "rc-data", 0);
        let pixels: Vec<f64> = (0..12 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let data = LabeledDataset::new(
            Tensor::from_vec(&[12, 1, 8, 8], pixels),
            (0..12).map(|i| i % 2).collect(),
            2,
        )
        .unwrap();
        let cfg = RcConfig {
            eval_subset_size: 12,
            ascent_steps: 3,
            ..Default::default()
        };
        let attack = AttackConfig {
            epsilon: 0.05,
            steps: 2,
            step_size: 0.02,
            random_start: false,
            ..Default::default()
        };
        let eval = prepare_eval_set(&model, &data, &cfg, &attack).unwrap();
        (model, eval, cfg)
    }

    #[test]
    fn gamma_zero_gives_zero_rc() {
        let (mut model, eval, mut cfg) = tiny_setup(1);
        cfg.gamma = 0.0;
        for id in ["encoder.conv1", "classifier.fc"] {
            assert_eq!(
                layer_robustness_contribution(&mut model, id, &eval, &cfg).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn zero_parameter_layer_gives_zero_rc() {
        let (mut model, eval, cfg) = tiny_setup(2);
        let li = model.layer_index("encoder.conv2").unwrap();
        for t in &mut model.layers_mut()[li].params {
            t.data_mut().fill(0.0);
        }
        assert_eq!(
            layer_robustness_contribution(&mut model, "encoder.conv2", &eval, &cfg).unwrap(),
            0.0
        );
    }

    #[test]
    fn parameters_restored_bitwise_and_rc_nonnegative() {
        let (mut model, eval, cfg) = tiny_setup(3);
        let hash = model.model_hash();
        for rec in model.layer_registry() {
            let rc =
                layer_robustness_contribution(&mut model, &rec.layer_id, &eval, &cfg).unwrap();
            assert!(rc >= 0.0, "rc for {} is {rc}", rec.layer_id);
            assert_eq!(model.model_hash(), hash, "after {}", rec.layer_id);
        }
    }

    #[test]
    fn locality_only_target_layer_changes() {
        let (mut model, eval, cfg) = tiny_setup(4);
        let target = "encoder.conv1";
        let ti = model.layer_index(target).unwrap();
        let others: Vec<(usize, Vec<Tensor>)> = (0..model.layers().len())
            .filter(|&i| i != ti)
            .map(|i| (i, model.layers()[i].params.clone()))
            .collect();
        let mut probes = 0usize;
        layer_rc_profile_with_probe(
            &mut model,
            target,
            &eval,
            &cfg,
            &[cfg.gamma],
            &mut |m: &DownstreamModel| {
                for (i, params) in &others {
                    assert_eq!(&m.layers()[*i].params, params, "layer {i} changed");
                }
                probes += 1;
            },
        )
        .unwrap();
        assert!(probes > 0);
    }

    #[test]
    fn dictionary_has_one_entry_per_layer_and_matches_individual_calls() {
        let (mut model, eval, cfg) = tiny_setup(5);
        let dict = build_sensitivity_dictionary(&mut model, &eval, &cfg).unwrap();
        assert_eq!(dict.len(), model.layer_registry().len());
        for rec in model.layer_registry() {
            let rc =
                layer_robustness_contribution(&mut model, &rec.layer_id, &eval, &cfg).unwrap();
            let stored = dict.rc(&rec.layer_id).unwrap();
            assert_eq!(rc, stored, "rc mismatch for {}", rec.layer_id);
        }
        // Entries sorted ascending.
        let rcs: Vec<f64> = dict.entries().map(|(_, rc)| rc).collect();
        assert!(rcs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gamma_zero_dictionary_is_all_zero() {
        let (mut model, eval, mut cfg) = tiny_setup(6);
        cfg.gamma = 0.0;
        let dict = build_sensitivity_dictionary(&mut model, &eval, &cfg).unwrap();
        assert!(dict.entries().all(|(_, rc)| rc == 0.0));
    }

    #[test]
    fn profile_is_monotone_in_gamma() {
        let (mut model, eval, cfg) = tiny_setup(7);
        let gammas = [0.0, 0.002, 0.005, 0.01, 0.02, 0.05];
        for id in ["encoder.conv1", "encoder.bn2", "classifier.fc"] {
            let profile = layer_rc_profile(&mut model, id, &eval, &cfg, &gammas).unwrap();
            assert!(
                profile.windows(2).all(|w| w[0] <= w[1]),
                "profile for {id} not monotone: {profile:?}"
            );
            assert_eq!(profile[0], 0.0);
        }
    }

    #[test]
    fn unknown_layer_is_input_error() {
        let (mut model, eval, cfg) = tiny_setup(8);
        assert!(matches!(
            layer_robustness_contribution(&mut model, "nope", &eval, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn topk_selection_oracle() {
        let cfg = RcConfig::default();
        let dict = SensitivityDictionary::from_registry_order(
            vec![
                ("a".into(), 0.5),
                ("b".into(), 0.1),
                ("c".into(), 0.9),
            ],
            cfg,
            "h".into(),
        );
        assert!(select_topk_least_robust(&dict, 0.0).unwrap().is_empty());
        let one = select_topk_least_robust(&dict, 1.0 / 3.0).unwrap();
        assert_eq!(one.into_iter().collect::<Vec<_>>(), vec!["b".to_string()]);
        let all = select_topk_least_robust(&dict, 1.0).unwrap();
        assert_eq!(all.len(), 3);
        assert!(select_topk_least_robust(&dict, 1.5).is_err());
        // Ties break by registry order.
        let tied = SensitivityDictionary::from_registry_order(
            vec![
                ("x".into(), 0.2),
                ("y".into(), 0.2),
                ("z".into(), 0.2),
            ],
            cfg,
            "h".into(),
        );
        let pick = select_topk_least_robust(&tied, 1.0 / 3.0).unwrap();
        assert_eq!(pick.into_iter().collect::<Vec<_>>(), vec!["x".to_string()]);
    }

    #[test]
    fn dictionary_file_roundtrip() {
        let (mut model, eval, cfg) = tiny_setup(9);
        let dict = build_sensitivity_dictionary(&mut model, &eval, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sensitivity.json");
        dict.write(&path).unwrap();
        let back = SensitivityDictionary::read(&path).unwrap();
        assert_eq!(back.model_hash, dict.model_hash);
        assert_eq!(
            back.entries().collect::<Vec<_>>(),
            dict.entries().collect::<Vec<_>>()
        );
    }
}
