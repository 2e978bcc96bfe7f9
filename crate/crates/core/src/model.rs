//! The downstream model: a small convolutional encoder composed with a
//! linear classifier, with an explicit registry of named per-layer
//! parameter groups. Every trainable parameter belongs to exactly one
//! layer record; normalization running statistics are buffers, not
//! parameters, and are frozen whenever their owning layer is frozen.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::util::{rng_for, sha256_hex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Encoder,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub id: String,
    pub role: LayerRole,
    pub kind: LayerKind,
    /// Trainable tensors: conv/linear [weight, bias], batchnorm [gamma, beta].
    pub params: Vec<Tensor>,
    /// Non-trainable state: batchnorm [running_mean, running_var].
    pub buffers: Vec<Tensor>,
}

impl Layer {
    pub fn param_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => &["weight", "bias"],
            LayerKind::BatchNorm { .. } => &["gamma", "beta"],
        }
    }

    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::BatchNorm { .. } => &["running_mean", "running_var"],
            _ => &[],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }
}

/// One row of the model's layer registry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_id: String,
    pub role: LayerRole,
    pub param_count: usize,
}

/// Architecture descriptor; serialized verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each conv block (conv + batchnorm + relu).
    pub conv_channels: Vec<usize>,
    /// Stride of each conv block; same length as `conv_channels`.
    pub conv_strides: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ArchSpec {
    /// Desk-scale default: two stride-2 conv blocks on 32x32 inputs,
    /// global pooling, 128-d features, linear classifier.
    pub fn desk(num_classes: usize) -> Self {
        ArchSpec {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            conv_channels: vec![8, 16],
            conv_strides: vec![2, 2],
            feature_dim: 128,
            num_classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Sub-thousand-parameter model for gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        ArchSpec {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            conv_channels: vec![2, 3],
            conv_strides: vec![2, 2],
            feature_dim: 4,
            num_classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::Config(format!(
                "conv_channels ({}) and conv_strides ({}) must be non-empty and equal length",
                self.conv_channels.len(),
                self.conv_strides.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for &s in &self.conv_strides {
            if s == 0 {
                return Err(Error::Config("conv stride must be positive".into()));
            }
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
            if h == 0 || w == 0 {
                return Err(Error::Config(
                    "input too small for the configured conv stack".into(),
                ));
            }
        }
        Ok(())
    }

}

/// Encoder features and classifier logits for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub logits: Tensor,
}

/// Full parameter-and-buffer state capture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    layers: Vec<(Vec<Tensor>, Vec<Tensor>)>,
}

/// Batch statistics produced by a train-mode forward, to be folded into
/// running statistics after the optimizer step.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub layer_index: usize,
    pub mean: Tensor,
    /// Biased batch variance.
    pub var: Tensor,
    /// Number of elements each statistic was computed over.
    pub count: usize,
}

/// Normalization behavior during a graph forward.
#[derive(Clone, Copy)]
pub enum BnMode<'a> {
    /// Running statistics, no updates.
    Eval,
    /// Batch statistics and stat updates, except for frozen layers which
    /// run in inference-statistics mode.
    Train { frozen: Option<&'a BTreeSet<usize>> },
}

/// Parameter leaves bound into a graph, indexed [layer][param].
pub struct ParamBinding {
    pub vars: Vec<Vec<Var>>,
}

/// Result of building a forward pass on a graph.
pub struct GraphForward {
    pub features: Var,
    pub logits: Var,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct DownstreamModel {
    arch: ArchSpec,
    layers: Vec<Layer>,
}

impl DownstreamModel {
    /// Builds a model with seeded initialization. The layer registry
    /// order is a pure function of the architecture, so identical arch
    /// and seed give identical models.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut in_c = arch.input_channels;
        for (i, (&out_c, &stride)) in arch
            .conv_channels
            .iter()
            .zip(&arch.conv_strides)
            .enumerate()
        {
            let mut rng = rng_for(seed, "init-conv", i as u64);
            let fan_in = in_c * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let wdata = (0..out_c * in_c * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Layer {
                id: format!("encoder.conv{}", i + 1),
                role: LayerRole::Encoder,
                kind: LayerKind::Conv {
                    in_channels: in_c,
                    out_channels: out_c,
                    kernel: 3,
                    stride,
                    pad: 1,
                },
                params: vec![
                    Tensor::from_vec(&[out_c, in_c, 3, 3], wdata),
                    Tensor::zeros(&[out_c]),
                ],
                buffers: vec![],
            });
            layers.push(Layer {
                id: format!("encoder.bn{}", i + 1),
                role: LayerRole::Encoder,
                kind: LayerKind::BatchNorm { channels: out_c },
                params: vec![
                    Tensor::from_vec(&[out_c], vec![1.0; out_c]),
                    Tensor::zeros(&[out_c]),
                ],
                buffers: vec![
                    Tensor::zeros(&[out_c]),
                    Tensor::from_vec(&[out_c], vec![1.0; out_c]),
                ],
            });
            in_c = out_c;
        }
        let mut rng = rng_for(seed, "init-head", 0);
        let bound = (6.0 / in_c as f64).sqrt();
        let head_w = (0..arch.feature_dim * in_c)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        layers.push(Layer {
            id: "encoder.head".into(),
            role: LayerRole::Encoder,
            kind: LayerKind::Linear {
                in_dim: in_c,
                out_dim: arch.feature_dim,
            },
            params: vec![
                Tensor::from_vec(&[arch.feature_dim, in_c], head_w),
                Tensor::zeros(&[arch.feature_dim]),
            ],
            buffers: vec![],
        });
        let mut rng = rng_for(seed, "init-classifier", 0);
        let bound = (6.0 / arch.feature_dim as f64).sqrt();
        let cls_w = (0..arch.num_classes * arch.feature_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        layers.push(Layer {
            id: "classifier.fc".into(),
            role: LayerRole::Classifier,
            kind: LayerKind::Linear {
                in_dim: arch.feature_dim,
                out_dim: arch.num_classes,
            },
            params: vec![
                Tensor::from_vec(&[arch.num_classes, arch.feature_dim], cls_w),
                Tensor::zeros(&[arch.num_classes]),
            ],
            buffers: vec![],
        });
        Ok(DownstreamModel { arch, layers })
    }

    /// Re-initializes classifier parameters with a fresh seed, leaving
    /// the encoder untouched.
    pub fn reset_classifier(&mut self, seed: u64) {
        let arch = self.arch.clone();
        let mut rng = rng_for(seed, "init-classifier", 0);
        let bound = (6.0 / arch.feature_dim as f64).sqrt();
        for layer in &mut self.layers {
            if layer.role == LayerRole::Classifier {
                let w: Vec<f64> = (0..arch.num_classes * arch.feature_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                layer.params[0] = Tensor::from_vec(&[arch.num_classes, arch.feature_dim], w);
                layer.params[1] = Tensor::zeros(&[arch.num_classes]);
            }
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_index(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == layer_id)
    }

    pub fn layer_registry(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| LayerRecord {
                layer_id: l.id.clone(),
                role: l.role,
                param_count: l.param_count(),
            })
            .collect()
    }

    pub fn total_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn encoder_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].role == LayerRole::Encoder)
            .collect()
    }

    pub fn classifier_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].role == LayerRole::Classifier)
            .collect()
    }

    /// Content hash over all parameters and buffers in registry order.
    pub fn model_hash(&self) -> String {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            bytes.extend_from_slice(layer.id.as_bytes());
            for t in layer.params.iter().chain(&layer.buffers) {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        sha256_hex(&bytes)
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            layers: self
                .layers
                .iter()
                .map(|l| (l.params.clone(), l.buffers.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        if snap.layers.len() != self.layers.len() {
            return Err(Error::Config(
                "snapshot does not match model architecture".into(),
            ));
        }
        for (layer, (params, buffers)) in self.layers.iter_mut().zip(&snap.layers) {
            if layer.params.len() != params.len()
                || layer
                    .params
                    .iter()
                    .zip(params)
                    .any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::Config(
                    "snapshot does not match model architecture".into(),
                ));
            }
            layer.params.clone_from(params);
            layer.buffers.clone_from(buffers);
        }
        Ok(())
    }

    /// Restores only the given layer's parameters.
    pub fn restore_layer(&mut self, snap: &ParameterSnapshot, layer_index: usize) {
        self.layers[layer_index]
            .params
            .clone_from(&snap.layers[layer_index].0);
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        let (c, h, w) = batch.image_dims();
        if (c, h, w)
            != (
                self.arch.input_channels,
                self.arch.input_height,
                self.arch.input_width,
            )
        {
            return Err(Error::Config(format!(
                "batch images {c}x{h}x{w} do not match model input {}x{}x{}",
                self.arch.input_channels, self.arch.input_height, self.arch.input_width
            )));
        }
        Ok(())
    }

    fn check_params_finite(&self) -> Result<()> {
        for layer in &self.layers {
            for t in &layer.params {
                if !t.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite parameters in layer {}",
                        layer.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Binds every parameter tensor into the graph. `trainable` selects,
    /// per layer index, whether gradients should flow to that layer.
    pub fn bind_params(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> ParamBinding {
        let vars = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                layer
                    .params
                    .iter()
                    .map(|t| {
                        if trainable(i) {
                            g.leaf(t.clone())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        ParamBinding { vars }
    }

    /// Builds the differentiable forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        pixels: Var,
        bn: BnMode<'_>,
    ) -> Result<GraphForward> {
        let mut x = pixels;
        let mut stat_updates = Vec::new();
        let mut li = 0usize;
        while li < self.layers.len() {
            match &self.layers[li].kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let p = &binding.vars[li];
                    x = g.conv2d(x, p[0], p[1], *stride, *pad);
                    li += 1;
                }
                LayerKind::BatchNorm { .. } => {
                    let p = &binding.vars[li];
                    let layer = &self.layers[li];
                    let train_here = match bn {
                        BnMode::Eval => false,
                        BnMode::Train { frozen } => {
                            !frozen.map(|f| f.contains(&li)).unwrap_or(false)
                        }
                    };
                    if train_here {
                        let (y, mean, var) = g.batchnorm_train(x, p[0], p[1], self.arch.bn_eps);
                        let xs = g.value(x).shape();
                        let count = xs[0] * xs[2] * xs[3];
                        stat_updates.push(StatUpdate {
                            layer_index: li,
                            mean,
                            var,
                            count,
                        });
                        x = y;
                    } else {
                        x = g.batchnorm_eval(
                            x,
                            p[0],
                            p[1],
                            &layer.buffers[0],
                            &layer.buffers[1],
                            self.arch.bn_eps,
                        );
                    }
                    x = g.relu(x);
                    li += 1;
                }
                LayerKind::Linear { .. } => break,
            }
        }
        let pooled = g.global_avg_pool(x);
        // encoder.head
        let head_idx = self
            .layer_index("encoder.head")
            .expect("model always has an encoder head");
        let hp = &binding.vars[head_idx];
        let features = g.linear(pooled, hp[0], hp[1]);
        let cls_idx = self
            .layer_index("classifier.fc")
            .expect("model always has a classifier");
        let cp = &binding.vars[cls_idx];
        let logits = g.linear(features, cp[0], cp[1]);
        Ok(GraphForward {
            features,
            logits,
            stat_updates,
        })
    }

    /// Folds batch statistics into running statistics with the
    /// configured momentum (unbiased variance, matching common practice).
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        let m = self.arch.bn_momentum;
        for u in updates {
            let layer = &mut self.layers[u.layer_index];
            debug_assert!(matches!(layer.kind, LayerKind::BatchNorm { .. }));
            let correction = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            for (r, b) in layer.buffers[0].data_mut().iter_mut().zip(u.mean.data()) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in layer.buffers[1].data_mut().iter_mut().zip(u.var.data()) {
                *r = (1.0 - m) * *r + m * (b * correction);
            }
        }
    }

    /// Inference-mode forward returning encoder features and logits.
    pub fn forward(&self, batch: &ImageBatch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        self.check_params_finite()?;
        let (features, logits) = self.forward_pixels(batch.pixels())?;
        logits.ensure_finite("logits")?;
        Ok(ForwardOutput { features, logits })
    }

    /// Inference-mode forward on raw pixels (no gradients).
    pub fn forward_pixels(&self, pixels: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let binding = self.bind_params(&mut g, |_| false);
        let out = self.forward_graph(&mut g, &binding, x, BnMode::Eval)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }

    /// Inference-mode logits only.
    pub fn logits(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.forward_pixels(pixels)?.1)
    }
}

/// Mean softmax cross-entropy of logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(per_sample_cross_entropy(logits, labels)?.iter().sum::<f64>() / labels.len() as f64)
}

/// Per-sample negative log-likelihood under softmax.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Input(format!(
            "label count {} does not match logits rows {n}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.push(lse - row[labels[i]]);
    }
    Ok(out)
}
