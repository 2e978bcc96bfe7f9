//! Benign/adversarial feature graphs and the genetic regularization loss.
//!
//! Nodes are per-sample feature vectors; edges carry affinities derived
//! from cosine distance with a nearest-neighbor offset that keeps locally
//! dense points connected, normalized per source row into a stochastic
//! weight matrix. The regularizer is the summed binary KL divergence
//! between the benign and adversarial edge-weight matrices.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const WEIGHT_CLAMP: f64 = 1e-7;

/// Feature graph over one mini-batch.
#[derive(Clone, Debug)]
pub struct FeatureGraph {
    /// Node feature vectors, one row per sample.
    pub nodes: Tensor,
    /// Nearest-neighbor cosine-distance offset per node.
    pub rho: Vec<f64>,
    /// Row-stochastic edge weights with zero diagonal.
    pub weights: Tensor,
}

/// Benign and adversarial graphs over the same samples in matched order.
#[derive(Clone, Debug)]
pub struct GraphPair {
    pub benign: FeatureGraph,
    pub adversarial: FeatureGraph,
    /// Node i of each graph corresponds to the same underlying sample.
    pub aligned: bool,
}

impl GraphPair {
    pub fn aligned(benign: FeatureGraph, adversarial: FeatureGraph) -> Self {
        GraphPair {
            benign,
            adversarial,
            aligned: true,
        }
    }
}

/// Saved forward state for the fused weights op.
#[derive(Clone)]
struct WeightsForward {
    n: usize,
    d: usize,
    /// Unit-normalized feature rows.
    unit: Vec<f64>,
    norms: Vec<f64>,
    rho: Vec<f64>,
    /// argmin_{k != j} d_jk, first index on ties.
    argmin: Vec<usize>,
    weights: Vec<f64>,
    row_sums: Vec<f64>,
}

fn weights_forward(features: &Tensor) -> Result<WeightsForward> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::Input(format!(
            "feature matrix must be 2-d, got shape {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::Input(format!(
            "feature graph needs at least 2 nodes, got {n}"
        )));
    }
    let data = features.data();
    let mut unit = vec![0.0; n * d];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical(format!(
                "zero-norm feature vector at row {i}"
            )));
        }
        norms[i] = norm;
        for k in 0..d {
            unit[i * d + k] = row[k] / norm;
        }
    }
    // Cosine distances d_ij = 1 - u_i . u_j, clamped into [0, 2] against
    // unit-dot rounding spill.
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut dot = 0.0;
            for k in 0..d {
                dot += unit[i * d + k] * unit[j * d + k];
            }
            let dv = (1.0 - dot).clamp(0.0, 2.0);
            dist[i * n + j] = dv;
            dist[j * n + i] = dv;
        }
    }
    let mut rho = vec![0.0; n];
    let mut argmin = vec![0usize; n];
    for j in 0..n {
        let mut best = f64::INFINITY;
        let mut best_k = 0;
        for k in 0..n {
            if k == j {
                continue;
            }
            let dv = dist[j * n + k];
            if dv < best {
                best = dv;
                best_k = k;
            }
        }
        rho[j] = best;
        argmin[j] = best_k;
    }
    // Affinity to target j is boosted by j's nearest-neighbor offset, then
    // each source row is normalized over its off-diagonal targets.
    let mut weights = vec![0.0; n * n];
    let mut row_sums = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let a = 2.0 - (dist[i * n + j] - rho[j]);
            weights[i * n + j] = a;
            sum += a;
        }
        if sum == 0.0 {
            return Err(Error::Numerical(format!(
                "degenerate affinity row {i}: all edge affinities vanish"
            )));
        }
        row_sums[i] = sum;
        for j in 0..n {
            if j != i {
                weights[i * n + j] /= sum;
            }
        }
    }
    Ok(WeightsForward {
        n,
        d,
        unit,
        norms,
        rho,
        argmin,
        weights,
        row_sums,
    })
}

/// Gradient of the weights op: maps dL/dW back to dL/dfeatures.
fn weights_backward(fwd: &WeightsForward, gw: &[f64]) -> Vec<f64> {
    let (n, d) = (fwd.n, fwd.d);
    // Through the row normalization: dL/da_ij.
    let mut da = vec![0.0; n * n];
    for i in 0..n {
        let mut dot = 0.0;
        for k in 0..n {
            if k != i {
                dot += gw[i * n + k] * fwd.weights[i * n + k];
            }
        }
        for j in 0..n {
            if j != i {
                da[i * n + j] = (gw[i * n + j] - dot) / fwd.row_sums[i];
            }
        }
    }
    // a_ij = 2 - d_ij + rho_j: direct distance term plus the offset
    // routed to each target's nearest-neighbor distance.
    let mut dd = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if j != i {
                dd[i * n + j] -= da[i * n + j];
            }
        }
    }
    for j in 0..n {
        let mut r = 0.0;
        for i in 0..n {
            if i != j {
                r += da[i * n + j];
            }
        }
        // rho_j = d_{j, m_j}
        dd[j * n + fwd.argmin[j]] += r;
    }
    // d_ij = 1 - u_i . u_j.
    let mut du = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = dd[i * n + j];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                du[i * d + k] -= g * fwd.unit[j * d + k];
                du[j * d + k] -= g * fwd.unit[i * d + k];
            }
        }
    }
    // u_i = v_i / |v_i|.
    let mut dv = vec![0.0; n * d];
    for i in 0..n {
        let u = &fwd.unit[i * d..(i + 1) * d];
        let g = &du[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for k in 0..d {
            dot += g[k] * u[k];
        }
        for k in 0..d {
            dv[i * d + k] = (g[k] - u[k] * dot) / fwd.norms[i];
        }
    }
    dv
}

/// Builds the feature graph for one batch of features (rows).
pub fn build_feature_graph(features: &Tensor) -> Result<FeatureGraph> {
    let fwd = weights_forward(features)?;
    Ok(FeatureGraph {
        nodes: features.clone(),
        rho: fwd.rho.clone(),
        weights: Tensor::from_vec(&[fwd.n, fwd.n], fwd.weights),
    })
}

/// Clamped per-edge binary KL divergence term.
pub fn binary_kl_term(wc: f64, wa: f64) -> f64 {
    let c = wc.clamp(WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP);
    let a = wa.clamp(WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP);
    c * (c / a).ln() + (1.0 - c) * ((1.0 - c) / (1.0 - a)).ln()
}

/// Summed binary KL between the benign and adversarial edge weights.
pub fn genetic_regularization_loss(pair: &GraphPair) -> Result<f64> {
    if !pair.aligned {
        return Err(Error::Input(
            "graph pair is not sample-aligned".to_string(),
        ));
    }
    let wc = &pair.benign.weights;
    let wa = &pair.adversarial.weights;
    if wc.shape() != wa.shape() {
        return Err(Error::Input(format!(
            "graph size mismatch: {:?} vs {:?}",
            wc.shape(),
            wa.shape()
        )));
    }
    let n = wc.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += binary_kl_term(wc.at2(i, j), wa.at2(i, j));
            }
        }
    }
    Ok(total)
}

impl Graph {
    /// Differentiable edge-weight matrix of the feature graph.
    pub fn feature_graph_weights(&mut self, features: Var) -> Result<Var> {
        let fwd = weights_forward(self.value(features))?;
        let value = Tensor::from_vec(&[fwd.n, fwd.n], fwd.weights.clone());
        let req = self.requires_grad(features);
        let back = move |_g: &Graph, gout: &Tensor| {
            let dv = weights_backward(&fwd, gout.data());
            vec![(
                features.index(),
                Tensor::from_vec(&[fwd.n, fwd.d], dv),
            )]
        };
        Ok(self.push_custom(value, req, Box::new(back)))
    }

    /// Differentiable summed binary KL between two weight matrices.
    pub fn binary_kl_graphs(&mut self, wc: Var, wa: Var) -> Var {
        let wcv = self.value(wc);
        let wav = self.value(wa);
        assert_eq!(wcv.shape(), wav.shape());
        let n = wcv.shape()[0];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += binary_kl_term(wcv.at2(i, j), wav.at2(i, j));
                }
            }
        }
        let value = Tensor::scalar(total);
        let req = self.requires_grad(wc) || self.requires_grad(wa);
        let (nc, na) = (self.requires_grad(wc), self.requires_grad(wa));
        let back = move |g: &Graph, gout: &Tensor| {
            let gs = gout.item();
            let wcv = g.value(wc);
            let wav = g.value(wa);
            let lo = WEIGHT_CLAMP;
            let hi = 1.0 - WEIGHT_CLAMP;
            let mut res = Vec::new();
            if nc {
                let mut dc = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let c0 = wcv.at2(i, j);
                        if c0 <= lo || c0 >= hi {
                            continue;
                        }
                        let a = wav.at2(i, j).clamp(lo, hi);
                        dc[i * n + j] = gs * ((c0 / a).ln() - ((1.0 - c0) / (1.0 - a)).ln());
                    }
                }
                res.push((wc.index(), Tensor::from_vec(&[n, n], dc)));
            }
            if na {
                let mut dav = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let a0 = wav.at2(i, j);
                        if a0 <= lo || a0 >= hi {
                            continue;
                        }
                        let c = wcv.at2(i, j).clamp(lo, hi);
                        dav[i * n + j] = gs * (-(c / a0) + (1.0 - c) / (1.0 - a0));
                    }
                }
                res.push((wa.index(), Tensor::from_vec(&[n, n], dav)));
            }
            res
        };
        self.push_custom(value, req, Box::new(back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_difference_gradient, max_relative_error};
    use crate::util::rng_for;
    use rand::Rng;

    fn graph_of(rows: &[&[f64]]) -> FeatureGraph {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        build_feature_graph(&Tensor::from_vec(&[rows.len(), d], data)).unwrap()
    }

    #[test]
    fn two_identical_nodes() {
        let g = graph_of(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(g.weights.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(g.rho.iter().all(|&r| (0.0..1e-12).contains(&r)));
    }

    #[test]
    fn three_identical_nodes_uniform() {
        let g = graph_of(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((g.weights.at2(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_three_vector_case() {
        let s = 1.0 / 2f64.sqrt();
        let g = graph_of(&[&[1.0, 0.0], &[0.0, 1.0], &[s, s]]);
        // rho is the distance to the 45-degree vector for every node.
        let r = 1.0 - s;
        for j in 0..3 {
            assert!((g.rho[j] - r).abs() < 1e-12);
        }
        assert!((g.weights.at2(0, 1) - 0.39262).abs() < 1e-4);
        assert!((g.weights.at2(0, 2) - 0.60738).abs() < 1e-4);
    }

    #[test]
    fn rows_are_stochastic_and_scale_invariant() {
        let mut rng = rng_for(42, "fg-rows", 0);
        for trial in 0..200 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(2..=32);
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = Tensor::from_vec(&[n, d], data.clone());
            let g = build_feature_graph(&t).unwrap();
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    let w = g.weights.at2(i, j);
                    assert!((0.0..=1.0).contains(&w), "weight out of range");
                    if i == j {
                        assert_eq!(w, 0.0, "diagonal must be exactly zero");
                    }
                    sum += w;
                }
                assert!((sum - 1.0).abs() < 1e-6, "trial {trial} row {i} sum {sum}");
            }
            //

            let mut scaled = data;
            for i in 0..n {
                let c = rng.gen_range(0.1..10.0);
                for k in 0..d {
                    scaled[i * d + k] *= c;
                }
            }
            let g2 = build_feature_graph(&Tensor::from_vec(&[n, d], scaled)).unwrap();
            for (a, b) in g.weights.data().iter().zip(g2.weights.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let one = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]);
        assert!(matches!(build_feature_graph(&one), Err(Error::Input(_))));
        let zero_row = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        match build_feature_graph(&zero_row) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("row 1")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn identical_graphs_have_zero_loss() {
        let g = graph_of(&[&[1.0, 0.0], &[0.3, 0.7], &[-0.5, 0.5]]);
        let pair = GraphPair::aligned(g.clone(), g);
        assert_eq!(genetic_regularization_loss(&pair).unwrap(), 0.0);
    }

    #[test]
    fn loss_nonnegative_on_random_pairs() {
        let mut rng = rng_for(7, "fg-kl", 0);
        for _ in 0..200 {
            let n = rng.gen_range(2..=12);
            let d = rng.gen_range(2..=8);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                build_feature_graph(&Tensor::from_vec(&[n, d], data)).unwrap()
            };
            let pair = GraphPair::aligned(mk(&mut rng), mk(&mut rng));
            assert!(genetic_regularization_loss(&pair).unwrap() >= 0.0);
        }
    }

    #[test]
    fn misaligned_pair_rejected() {
        let g = graph_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let pair = GraphPair {
            benign: g.clone(),
            adversarial: g,
            aligned: false,
        };
        assert!(matches!(
            genetic_regularization_loss(&pair),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_edge_binary_kl_hand_value() {
        let term = binary_kl_term(0.39262, 0.5);
        let hand = 0.39262 * (0.39262f64 / 0.5).ln() + 0.60738 * (0.60738f64 / 0.5).ln();
        assert!((term - hand).abs() < 1e-12);
        assert!((term - 0.02331).abs() < 1e-4, "term {term}");
    }

    #[test]
    fn graph_op_matches_eager_and_gradchecks() {
        let mut rng = rng_for(99, "fg-grad", 0);
        for trial in 0..10 {
            let (n, d) = (8usize, 5usize);
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let eager = build_feature_graph(&Tensor::from_vec(&[n, d], data.clone())).unwrap();
            let mut g = Graph::new();
            let v = g.leaf(Tensor::from_vec(&[n, d], data.clone()));
            let w = g.feature_graph_weights(v).unwrap();
            assert_eq!(g.value(w).data(), eager.weights.data());

            // Loss: KL against a fixed second graph, differentiating both.
            let data2: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |xs: &[f64]| {
                let benign =
                    build_feature_graph(&Tensor::from_vec(&[n, d], xs[..n * d].to_vec()))
                        .unwrap();
                let adv = build_feature_graph(&Tensor::from_vec(
                    &[n, d],
                    xs[n * d..].to_vec(),
                ))
                .unwrap();
                genetic_regularization_loss(&GraphPair::aligned(benign, adv)).unwrap()
            };
            let mut joint = data.clone();
            joint.extend_from_slice(&data2);

            let mut g = Graph::new();
            let vb = g.leaf(Tensor::from_vec(&[n, d], data.clone()));
            let va = g.leaf(Tensor::from_vec(&[n, d], data2.clone()));
            let wb = g.feature_graph_weights(vb).unwrap();
            let wa = g.feature_graph_weights(va).unwrap();
            let loss = g.binary_kl_graphs(wb, wa);
            assert!((g.value(loss).item() - eval(&joint)).abs() < 1e-12);
            let grads = g.backward(loss);
            let mut analytic = grads.get(vb).unwrap().data().to_vec();
            analytic.extend_from_slice(grads.get(va).unwrap().data());
            let numeric = finite_difference_gradient(eval, &joint, 1e-6);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }
}
