//! Adaptive moment estimation over a set of model layers.

use crate::model::DownstreamModel;
use crate::tensor::Tensor;

/// Adam with the usual (0.9, 0.999) moment coefficients and no weight
/// decay. One instance owns the first/second moment state for a fixed
/// group of layer indices; the encoder and classifier each get their own
/// instance so they can run at different learning rates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    layer_indices: Vec<usize>,
    m: Vec<Vec<Tensor>>,
    v: Vec<Vec<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &DownstreamModel, layer_indices: Vec<usize>, lr: f64) -> Self {
        let m = layer_indices
            .iter()
            .map(|&li| {
                model.layers()[li]
                    .params
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect()
            })
            .collect();
        let v = layer_indices
            .iter()
            .map(|&li| {
                model.layers()[li]
                    .params
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect()
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            layer_indices,
            m,
            v,
            t: 0,
        }
    }

    pub fn layer_indices(&self) -> &[usize] {
        &self.layer_indices
    }

    /// Applies one update. `grads[group][param]` must align with the
    /// layer group this optimizer was built over; `None` entries (e.g. a
    /// parameter unused in this step) are skipped.
    pub fn step(&mut self, model: &mut DownstreamModel, grads: &[Vec<Option<Tensor>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, &li) in self.layer_indices.iter().enumerate() {
            let layer = &mut model.layers_mut()[li];
            for (pi, param) in layer.params.iter_mut().enumerate() {
                let Some(grad) = grads[gi][pi].as_ref() else {
                    continue;
                };
                let m = self.m[gi][pi].data_mut();
                let v = self.v[gi][pi].data_mut();
                let p = param.data_mut();
                let g = grad.data();
                for k in 0..p.len() {
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    #[test]
    fn single_step_matches_hand_formula() {
        let mut model = DownstreamModel::new(ArchSpec::tiny(2), 1).unwrap();
        let li = model.layer_index("classifier.fc").unwrap();
        let before = model.layers()[li].params[0].data().to_vec();
        let mut opt = Adam::new(&model, vec![li], 0.01);
        let gshape = model.layers()[li].params[0].shape().to_vec();
        let gval = 0.3;
        let grads = vec![vec![
            Some(Tensor::from_vec(
                &gshape,
                vec![gval; gshape.iter().product()],
            )),
            None,
        ]];
        opt.step(&mut model, &grads);
        // Hand Adam step at t=1: m_hat = g, v_hat = g^2,
        // delta = lr * g / (|g| + eps).
        let expected_delta = 0.01 * gval / (gval.abs() + 1e-8);
        for (b, a) in before.iter().zip(model.layers()[li].params[0].data()) {
            assert!((b - a - expected_delta).abs() < 1e-12);
        }
        // Bias untouched (None gradient).
        assert!(model.layers()[li].params[1]
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lr_never_moves_parameters() {
        let mut model = DownstreamModel::new(ArchSpec::tiny(2), 2).unwrap();
        let hash0 = model.model_hash();
        let li = 0;
        let mut opt = Adam::new(&model, vec![li], 0.0);
        let shapes: Vec<_> = model.layers()[li]
            .params
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        let grads = vec![shapes
            .iter()
            .map(|s| Some(Tensor::from_vec(s, vec![1.0; s.iter().product()])))
            .collect::<Vec<_>>()];
        opt.step(&mut model, &grads);
        opt.step(&mut model, &grads);
        assert_eq!(model.model_hash(), hash0);
    }
}
