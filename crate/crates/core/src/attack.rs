//! Adversarial example generation: per-sample PGD for training and
//! evaluation, and a universal perturbation for quasi-black-box
//! evaluation. Attacks never modify labels, always satisfy the norm
//! bound and pixel range, and bump a global call counter so training
//! stages can prove they ran benign-only.

use crate::data::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{per_sample_cross_entropy, BnMode, DownstreamModel};
use crate::packed::{PackedArray, PackedFile};
use crate::tensor::Tensor;
use crate::util::{argmax, rng_for, sign};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

static ATTACK_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of attack invocations (PGD or UAP) in this process.
pub fn attack_call_count() -> u64 {
    ATTACK_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    #[serde(rename = "inf")]
    Inf,
    #[serde(rename = "2")]
    L2,
}

impl std::fmt::Display for NormP {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormP::Inf => write!(f, "inf"),
            NormP::L2 => write!(f, "2"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget in pixel units.
    pub epsilon: f64,
    pub norm_p: NormP,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let epsilon = 10.0 / 255.0;
        AttackConfig {
            epsilon,
            norm_p: NormP::Inf,
            steps: 10,
            step_size: epsilon / 4.0,
            random_start: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("attack epsilon must be >= 0".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("attack step_size must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "pgd(eps={:.6},p={},steps={},step={:.6},random_start={})",
            self.epsilon, self.norm_p, self.steps, self.step_size, self.random_start
        )
    }
}

/// A single image-shaped perturbation applied to every sample.
#[derive(Clone, Debug)]
pub struct UniversalPerturbation {
    pub delta: Tensor,
    pub epsilon: f64,
    pub norm_p: NormP,
}

impl UniversalPerturbation {
    pub fn new(delta: Tensor, epsilon: f64, norm_p: NormP) -> Result<Self> {
        let norm = match norm_p {
            NormP::Inf => delta.linf_norm(),
            NormP::L2 => delta.l2_norm(),
        };
        if norm > epsilon * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Input(format!(
                "perturbation norm {norm} exceeds budget {epsilon}"
            )));
        }
        Ok(UniversalPerturbation {
            delta,
            epsilon,
            norm_p,
        })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let meta = format!(
            "{{\"epsilon\":{},\"norm_p\":\"{}\",\"seed\":{}}}",
            self.epsilon, self.norm_p, seed
        );
        PackedFile {
            arrays: vec![PackedArray::from_tensor("delta", &self.delta)],
            meta: Some(meta),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = PackedFile::read(path)?;
        let delta = file.array("delta")?.as_tensor()?;
        let meta: serde_json::Value = file
            .meta
            .as_deref()
            .map(serde_json::from_str)
            .transpose()
            .map_err(|e| Error::Input(format!("bad perturbation metadata: {e}")))?
            .unwrap_or(serde_json::Value::Null);
        let epsilon = meta
            .get("epsilon")
            .and_then(|v| v.as_f64())
            .unwrap_or_else(|| delta.linf_norm());
        let norm_p = match meta.get("norm_p").and_then(|v| v.as_str()) {
            Some("2") => NormP::L2,
            _ => NormP::Inf,
        };
        UniversalPerturbation::new(delta, epsilon, norm_p)
    }
}

/// Per-sample losses and the input gradient of the mean cross-entropy,
/// evaluated in inference mode.
fn loss_and_input_grad(
    model: &DownstreamModel,
    pixels: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let x = g.leaf(pixels.clone());
    let binding = model.bind_params(&mut g, |_| false);
    let out = model.forward_graph(&mut g, &binding, x, BnMode::Eval)?;
    let per = per_sample_cross_entropy(g.value(out.logits), labels)?;
    let loss = g.cross_entropy_mean(out.logits, labels)?;
    let mut grads = g.backward(loss);
    let gx = grads
        .take(x)
        .expect("input leaf always receives a gradient");
    Ok((per, gx))
}

fn ensure_finite_grads(grad: &Tensor, batch: usize) -> Result<()> {
    if grad.is_finite() {
        return Ok(());
    }
    let per = grad.numel() / batch;
    for i in 0..batch {
        if grad.data()[i * per..(i + 1) * per]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite attack gradient for batch index {i}"
            )));
        }
    }
    unreachable!("non-finite tensor must contain a non-finite sample slice");
}

/// Projects `delta` onto the configured norm ball, in place.
fn project(delta: &mut [f64], epsilon: f64, norm_p: NormP) {
    match norm_p {
        NormP::Inf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-epsilon, epsilon);
            }
        }
        NormP::L2 => {
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > epsilon && norm > 0.0 {
                let s = epsilon / norm;
                for d in delta.iter_mut() {
                    *d *= s;
                }
            }
        }
    }
}

/// Iterative gradient-ascent attack on the classification loss within
/// the epsilon ball around each input. Returns the iterate with maximal
/// per-sample loss among all visited iterates, including the start.
pub fn pgd_attack(
    model: &DownstreamModel,
    batch: &ImageBatch,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<ImageBatch> {
    cfg.validate()?;
    ATTACK_CALLS.fetch_add(1, Ordering::Relaxed);
    if cfg.epsilon == 0.0 {
        return Ok(batch.clone());
    }
    let n = batch.len();
    let labels = batch.labels().to_vec();
    let x0 = batch.pixels().clone();
    let per = x0.numel() / n;

    let mut x = x0.clone();
    if cfg.random_start {
        let xd = x.data_mut();
        for i in 0..n {
            let mut rng = rng_for(seed, "pgd-start", i as u64);
            let slice = &mut xd[i * per..(i + 1) * per];
            match cfg.norm_p {
                NormP::Inf => {
                    for v in slice.iter_mut() {
                        *v = (*v + rng.gen_range(-cfg.epsilon..=cfg.epsilon)).clamp(0.0, 1.0);
                    }
                }
                NormP::L2 => {
                    // Gaussian direction, radius scaled into the ball.
                    let dir: Vec<f64> = (0..per)
                        .map(|_| {
                            let u1: f64 = rng.gen_range(1e-12..1.0);
                            let u2: f64 = rng.gen_range(0.0..1.0);
                            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let r = cfg.epsilon * rng.gen_range(0.0..1.0f64);
                    for (v, d) in slice.iter_mut().zip(&dir) {
                        *v = (*v + r * d / norm).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let mut best_pixels = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    fn consider(
        n: usize,
        per: usize,
        pixels: &Tensor,
        losses: &[f64],
        best_pixels: &mut Tensor,
        best_loss: &mut [f64],
    ) {
        for i in 0..n {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best_pixels.data_mut()[i * per..(i + 1) * per]
                    .copy_from_slice(&pixels.data()[i * per..(i + 1) * per]);
            }
        }
    }

    for _ in 0..cfg.steps {
        let (losses, grad) = loss_and_input_grad(model, &x, &labels)?;
        ensure_finite_grads(&grad, n)?;
        consider(n, per, &x, &losses, &mut best_pixels, &mut best_loss);
        let xd = x.data_mut();
        let gd = grad.data();
        for i in 0..n {
            let gs = &gd[i * per..(i + 1) * per];
            let xs = &mut xd[i * per..(i + 1) * per];
            match cfg.norm_p {
                NormP::Inf => {
                    for (v, g) in xs.iter_mut().zip(gs) {
                        *v += cfg.step_size * sign(*g);
                    }
                }
                NormP::L2 => {
                    let norm = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for (v, g) in xs.iter_mut().zip(gs) {
                            *v += cfg.step_size * g / norm;
                        }
                    }
                }
            }
            // Project the per-sample delta, then clip to pixel range.
            let x0s = &x0.data()[i * per..(i + 1) * per];
            let mut delta: Vec<f64> = xs.iter().zip(x0s).map(|(a, b)| a - b).collect();
            project(&mut delta, cfg.epsilon, cfg.norm_p);
            for (v, (d, o)) in xs.iter_mut().zip(delta.iter().zip(x0s)) {
                *v = (o + d).clamp(0.0, 1.0);
            }
        }
    }
    let (losses, _) = loss_and_input_grad(model, &x, &labels)?;
    consider(n, per, &x, &losses, &mut best_pixels, &mut best_loss);
    batch.with_pixels(best_pixels)
}

pub(crate) fn predictions_chunked(model: &DownstreamModel, pixels: &Tensor) -> Result<Vec<usize>> {
    let shape = pixels.shape().to_vec();
    let (n, per) = (shape[0], pixels.numel() / shape[0]);
    let k = model.num_classes();
    let mut preds = Vec::with_capacity(n);
    let chunk = 256usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let sub = Tensor::from_vec(
            &[end - start, shape[1], shape[2], shape[3]],
            pixels.data()[start * per..end * per].to_vec(),
        );
        let logits = model.logits(&sub)?;
        for i in 0..end - start {
            preds.push(argmax(&logits.data()[i * k..(i + 1) * k]));
        }
        start = end;
    }
    Ok(preds)
}

/// Universal perturbation: iterates over the dataset accumulating
/// minimal per-sample pushes (sign-gradient steps until the prediction
/// flips), projecting onto the norm ball after each update. Returns the
/// perturbation and its fooling rate on the construction set.
pub fn uap_attack(
    model: &DownstreamModel,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    max_passes: usize,
    seed: u64,
) -> Result<(UniversalPerturbation, f64)> {
    cfg.validate()?;
    ATTACK_CALLS.fetch_add(1, Ordering::Relaxed);
    if data.is_empty() {
        return Err(Error::Input(
            "universal attack needs a non-empty dataset".into(),
        ));
    }
    let (c, h, w) = data.image_dims();
    let per = c * h * w;
    let mut delta = vec![0.0; per];
    let clean_preds = predictions_chunked(model, data.pixels())?;

    for pass in 0..max_passes {
        if cfg.epsilon == 0.0 {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = rng_for(seed, "uap-order", pass as u64);
        order.shuffle(&mut rng);
        for idx in order {
            let xs = &data.pixels().data()[idx * per..(idx + 1) * per];
            let adv = |delta: &[f64]| {
                let pix: Vec<f64> = xs
                    .iter()
                    .zip(delta)
                    .map(|(x, d)| (x + d).clamp(0.0, 1.0))
                    .collect();
                Tensor::from_vec(&[1, c, h, w], pix)
            };
            let target = clean_preds[idx];
            let logits = model.logits(&adv(&delta))?;
            if argmax(logits.data()) != target {
                continue;
            }
            // Push this sample across its decision boundary, stopping as
            // soon as the prediction flips.
            for _ in 0..cfg.steps {
                let pix = adv(&delta);
                let (_, grad) = loss_and_input_grad(model, &pix, &[target])?;
                ensure_finite_grads(&grad, 1)?;
                for (d, g) in delta.iter_mut().zip(grad.data()) {
                    *d += cfg.step_size * sign(*g);
                }
                project(&mut delta, cfg.epsilon, cfg.norm_p);
                let logits = model.logits(&adv(&delta))?;
                if argmax(logits.data()) != target {
                    break;
                }
            }
        }
    }

    let delta_t = Tensor::from_vec(&[c, h, w], delta);
    let uap = UniversalPerturbation::new(delta_t, cfg.epsilon, cfg.norm_p)?;
    let full = data.full_batch();
    let adv = apply_perturbation(&full, &uap)?;
    let adv_preds = predictions_chunked(model, adv.pixels())?;
    let fooled = adv_preds
        .iter()
        .zip(&clean_preds)
        .filter(|(a, b)| a != b)
        .count() as f64
        / data.len() as f64;
    Ok((uap, fooled))
}

/// Attaches a universal perturbation to a batch, clipping to [0, 1].
pub fn apply_perturbation(batch: &ImageBatch, uap: &UniversalPerturbation) -> Result<ImageBatch> {
    let (c, h, w) = batch.image_dims();
    if uap.delta.shape() != [c, h, w] {
        return Err(Error::Input(format!(
            "perturbation shape {:?} does not match images ({c}, {h}, {w})",
            uap.delta.shape()
        )));
    }
    let n = batch.len();
    let per = c * h * w;
    let mut out = batch.pixels().data().to_vec();
    for i in 0..n {
        for (v, d) in out[i * per..(i + 1) * per].iter_mut().zip(uap.delta.data()) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    batch.with_pixels(Tensor::from_vec(&[n, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, LayerKind};
    use crate::util::rng_for;
    use rand::Rng;

    fn random_batch(arch: &ArchSpec, n: usize, seed: u64) -> ImageBatch {
        let (c, h, w) = (arch.input_channels, arch.input_height, arch.input_width);
        let mut rng = rng_for(seed, "attack-test", 0);
        let pixels: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % arch.num_classes).collect();
        ImageBatch::new(Tensor::from_vec(&[n, c, h, w], pixels), labels).unwrap()
    }

    fn dataset_1x8x8(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng_for(seed, "uap-data", 0);
        let pixels: Vec<f64> = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        LabeledDataset::new(Tensor::from_vec(&[n, 1, 8, 8], pixels), labels, 2).unwrap()
    }

    #[test]
    fn epsilon_zero_is_bitwise_identity() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 1).unwrap();
        let batch = random_batch(&ArchSpec::tiny(2), 3, 2);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let adv = pgd_attack(&model, &batch, &cfg, 7).unwrap();
        assert_eq!(adv.pixels().data(), batch.pixels().data());
        assert_eq!(adv.labels(), batch.labels());
    }

    #[test]
    fn projection_and_range_contract() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 3).unwrap();
        for trial in 0..20u64 {
            let batch = random_batch(&ArchSpec::tiny(2), 2, trial);
            let mut rng = rng_for(trial, "cfg", 0);
            let eps = rng.gen_range(0.001..0.2);
            let cfg = AttackConfig {
                epsilon: eps,
                norm_p: if trial % 2 == 0 { NormP::Inf } else { NormP::L2 },
                steps: 1 + (trial as usize % 5),
                step_size: eps / 2.0,
                random_start: trial % 3 == 0,
            };
            let adv = pgd_attack(&model, &batch, &cfg, trial).unwrap();
            assert_eq!(adv.labels(), batch.labels());
            let per = adv.pixels().numel() / adv.len();
            for i in 0..adv.len() {
                let d: Vec<f64> = adv.pixels().data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&batch.pixels().data()[i * per..(i + 1) * per])
                    .map(|(a, b)| a - b)
                    .collect();
                match cfg.norm_p {
                    NormP::Inf => {
                        assert!(d.iter().all(|v| v.abs() <= eps + 1e-12));
                    }
                    NormP::L2 => {
                        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                        assert!(norm <= eps * (1.0 + 1e-9) + 1e-12);
                    }
                }
            }
            assert!(adv.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    /// With center-tap conv kernels at stride 1 the whole model is affine
    /// in the pixels, so the input gradient has a closed form the test
    /// composes by hand; single-step PGD must equal x + eps*sign(g).
    #[test]
    fn single_step_matches_sign_gradient_on_linear_model() {
        let mut arch = ArchSpec::tiny(2);
        arch.conv_strides = vec![1, 1];
        let mut model = DownstreamModel::new(arch.clone(), 5).unwrap();
        let mut mats: Vec<Vec<f64>> = Vec::new();
        for (li, id) in ["encoder.conv1", "encoder.conv2"].iter().enumerate() {
            let idx = model.layer_index(id).unwrap();
            let (out_c, in_c) = match model.layers()[idx].kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => (out_channels, in_channels),
                _ => unreachable!(),
            };
            let mut wdata = vec![0.0; out_c * in_c * 9];
            let mut mat = vec![0.0; out_c * in_c];
            let mut rng = rng_for(33, "lin", li as u64);
            for o in 0..out_c {
                for i in 0..in_c {
                    let a = rng.gen_range(0.2..0.8);
                    wdata[(o * in_c + i) * 9 + 4] = a; // center tap only
                    mat[o * in_c + i] = a;
                }
            }
            model.layers_mut()[idx].params[0] = Tensor::from_vec(&[out_c, in_c, 3, 3], wdata);
            model.layers_mut()[idx].params[1] = Tensor::from_vec(&[out_c], vec![0.1; out_c]);
            mats.push(mat);
        }
        let x0 = 0.5;
        let batch =
            ImageBatch::new(Tensor::from_vec(&[1, 1, 8, 8], vec![x0; 64]), vec![0]).unwrap();

        // Hand-composed affine forward: conv center taps, eval-mode
        // batchnorm at init stats (mean 0, var 1), active relus, gap,
        // head, classifier.
        let inv = 1.0 / (1.0f64 + 1e-5).sqrt();
        let a1 = &mats[0]; // 2x1
        let a2 = &mats[1]; // 3x2
        let head = model.layers()[model.layer_index("encoder.head").unwrap()].params[0]
            .data()
            .to_vec(); // 4x3
        let cls = model.layers()[model.layer_index("classifier.fc").unwrap()].params[0]
            .data()
            .to_vec(); // 2x4
        let h1: Vec<f64> = (0..2).map(|o| (a1[o] * x0 + 0.1) * inv).collect();
        let h2: Vec<f64> = (0..3)
            .map(|o| ((0..2).map(|i| a2[o * 2 + i] * h1[i]).sum::<f64>() + 0.1) * inv)
            .collect();
        assert!(
            h1.iter().chain(&h2).all(|&v| v > 0.0),
            "relus must be active"
        );
        let feats: Vec<f64> = (0..4)
            .map(|o| (0..3).map(|i| head[o * 3 + i] * h2[i]).sum::<f64>())
            .collect();
        let logits: Vec<f64> = (0..2)
            .map(|o| (0..4).map(|i| cls[o * 4 + i] * feats[i]).sum::<f64>())
            .collect();
        let mx = logits[0].max(logits[1]);
        let z: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let zs: f64 = z.iter().sum();
        let p: Vec<f64> = z.iter().map(|v| v / zs).collect();
        let dl = [p[0] - 1.0, p[1]];
        let df: Vec<f64> = (0..4).map(|i| dl[0] * cls[i] + dl[1] * cls[4 + i]).collect();
        let dh2: Vec<f64> = (0..3)
            .map(|i| (0..4).map(|o| df[o] * head[o * 3 + i]).sum::<f64>())
            .collect();
        let dh1: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|o| dh2[o] * inv * a2[o * 2 + i]).sum::<f64>())
            .collect();
        let gpix: f64 = (0..2).map(|o| dh1[o] * inv * a1[o]).sum::<f64>() / 64.0;
        assert!(gpix.abs() > 1e-9, "test needs a nonzero gradient");

        let eps = 0.05;
        let cfg = AttackConfig {
            epsilon: eps,
            norm_p: NormP::Inf,
            steps: 1,
            step_size: eps,
            random_start: false,
        };
        let adv = pgd_attack(&model, &batch, &cfg, 0).unwrap();
        let expected = x0 + eps * sign(gpix);
        for v in adv.pixels().data() {
            assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
        }
    }

    #[test]
    fn best_iterate_never_below_clean_loss() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 9).unwrap();
        for trial in 0..10u64 {
            let batch = random_batch(&ArchSpec::tiny(2), 4, 100 + trial);
            let cfg = AttackConfig {
                epsilon: 0.05,
                norm_p: NormP::Inf,
                steps: 3,
                step_size: 0.02,
                random_start: false,
            };
            let adv = pgd_attack(&model, &batch, &cfg, trial).unwrap();
            let clean =
                per_sample_cross_entropy(&model.forward(&batch).unwrap().logits, batch.labels())
                    .unwrap();
            let advl =
                per_sample_cross_entropy(&model.forward(&adv).unwrap().logits, adv.labels())
                    .unwrap();
            for (a, c) in advl.iter().zip(&clean) {
                assert!(*a >= c - 1e-12, "adversarial loss {a} below clean {c}");
            }
        }
    }

    #[test]
    fn uap_zero_passes_returns_zero_delta() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 11).unwrap();
        let ds = dataset_1x8x8(4, 1);
        let (uap, _) = uap_attack(&model, &ds, &AttackConfig::default(), 0, 3).unwrap();
        assert!(uap.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uap_respects_norm_bound_and_labels() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 13).unwrap();
        let ds = dataset_1x8x8(6, 5);
        let cfg = AttackConfig {
            epsilon: 0.06,
            ..Default::default()
        };
        let (uap, rate) = uap_attack(&model, &ds, &cfg, 2, 3).unwrap();
        assert!(uap.delta.linf_norm() <= 0.06 + 1e-12);
        assert!((0.0..=1.0).contains(&rate));
        let batch = ds.full_batch();
        let adv = apply_perturbation(&batch, &uap).unwrap();
        assert_eq!(adv.labels(), batch.labels());
    }

    #[test]
    fn uap_rejects_empty_dataset() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 13).unwrap();
        let ds = dataset_1x8x8(2, 0).subset(&[]);
        assert!(ds.is_empty());
        assert!(matches!(
            uap_attack(&model, &ds, &AttackConfig::default(), 1, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn apply_perturbation_arithmetic_and_clipping() {
        let batch = ImageBatch::new(
            Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, 0.5, 1.0, 1.0]),
            vec![0],
        )
        .unwrap();
        let uap = UniversalPerturbation::new(
            Tensor::from_vec(&[1, 2, 2], vec![0.03; 4]),
            0.05,
            NormP::Inf,
        )
        .unwrap();
        let out = apply_perturbation(&batch, &uap).unwrap();
        assert_eq!(out.pixels().data(), &[0.53, 0.53, 1.0, 1.0]);
        let zero =
            UniversalPerturbation::new(Tensor::zeros(&[1, 2, 2]), 0.0, NormP::Inf).unwrap();
        let same = apply_perturbation(&batch, &zero).unwrap();
        assert_eq!(same.pixels().data(), batch.pixels().data());
        let bad =
            UniversalPerturbation::new(Tensor::zeros(&[3, 2, 2]), 0.0, NormP::Inf).unwrap();
        assert!(matches!(
            apply_perturbation(&batch, &bad),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn perturbation_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delta.gapk");
        let uap = UniversalPerturbation::new(
            Tensor::from_vec(&[1, 2, 2], vec![0.01, -0.02, 0.0, 0.039]),
            10.0 / 255.0,
            NormP::Inf,
        )
        .unwrap();
        uap.save(&path, 77).unwrap();
        let back = UniversalPerturbation::load(&path).unwrap();
        assert_eq!(back.delta.data(), uap.delta.data());
        assert_eq!(back.norm_p, NormP::Inf);
        assert!((back.epsilon - 10.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn attack_counter_increments() {
        let model = DownstreamModel::new(ArchSpec::tiny(2), 1).unwrap();
        let batch = random_batch(&ArchSpec::tiny(2), 1, 0);
        let before = attack_call_count();
        let cfg = AttackConfig {
            epsilon: 0.01,
            steps: 1,
            ..Default::default()
        };
        pgd_attack(&model, &batch, &cfg, 0).unwrap();
        assert!(attack_call_count() > before);
    }
}
