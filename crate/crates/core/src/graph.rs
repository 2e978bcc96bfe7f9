//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each training step builds a fresh `Graph`, pushes leaves for the batch
//! pixels and the model parameters, composes ops, and calls
//! [`Graph::backward`] on a scalar loss. Backward closures read parent
//! values straight off the tape, so nothing is cloned on the forward
//! pass. Gradient contributions are accumulated in fixed parent order,
//! keeping results bitwise reproducible under any thread count.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackFn = Box<dyn Fn(&Graph, &Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Entry point for fused ops defined in sibling modules.
    pub(crate) fn push_custom(&mut self, value: Tensor, requires_grad: bool, back: BackFn) -> Var {
        self.push(value, requires_grad, Some(back))
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    /// Leaf treated as a constant; no gradient is computed for it or
    /// propagated through ops into it. Attack graphs bind model
    /// parameters this way so PGD only pays for input gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Backpropagates from a scalar root; returns one gradient slot per
    /// tape node (leaves included).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(
            self.nodes[root.0].value.shape(),
            vec![1.0],
        ));
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(self, &gout) {
                    debug_assert_eq!(contrib.shape(), self.nodes[pid].value.shape());
                    match &mut grads[pid] {
                        Some(t) => t.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise / scalar ops
    // ------------------------------------------------------------------

    /// `a + c * b` (same shape).
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + c * y)
            .collect();
        let value = Tensor::from_vec(av.shape(), data);
        let req = self.any_requires(&[a, b]);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let back: BackFn = Box::new(move |_, g| {
            let mut out = Vec::new();
            if na {
                out.push((a.0, g.clone()));
            }
            if nb {
                let mut gb = g.clone();
                gb.scale(c);
                out.push((b.0, gb));
            }
            out
        });
        self.push(value, req, Some(back))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(c);
        let req = self.requires_grad(a);
        let back: BackFn = Box::new(move |_, g| {
            let mut ga = g.clone();
            ga.scale(c);
            vec![(a.0, ga)]
        });
        self.push(value, req, Some(back))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        let req = self.requires_grad(x);
        let back: BackFn = Box::new(move |g, gout| {
            let xv = g.value(x);
            let data = xv
                .data()
                .iter()
                .zip(gout.data())
                .map(|(v, go)| if *v > 0.0 { *go } else { 0.0 })
                .collect();
            vec![(x.0, Tensor::from_vec(xv.shape(), data))]
        });
        self.push(value, req, Some(back))
    }

    // ------------------------------------------------------------------
    // Neural network layers
    // ------------------------------------------------------------------

    /// 2-d convolution, NCHW input, OIHW weights, per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, ic, "conv2d channel mismatch");
        assert_eq!(self.value(b).shape(), &[oc]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; n * oc * oh * ow];
        {
            let xd = self.value(x).data();
            let wdta = self.value(w).data();
            let bd = self.value(b).data();
            exec::par_fill_chunks(&mut out, oc * oh * ow, |ni, chunk| {
                conv_forward_sample(
                    &xd[ni * c * h * wd..(ni + 1) * c * h * wd],
                    wdta,
                    bd,
                    chunk,
                    (c, h, wd),
                    (oc, kh, kw),
                    (oh, ow),
                    stride,
                    pad,
                );
            });
        }
        let value = Tensor::from_vec(&[n, oc, oh, ow], out);
        let req = self.any_requires(&[x, w, b]);
        let (nx, nw, nb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let back: BackFn = Box::new(move |g, gout| {
            let xd = g.value(x).data();
            let wdta = g.value(w).data();
            let go = gout.data();
            let mut res = Vec::new();
            if nx {
                let mut dx = vec![0.0; n * c * h * wd];
                exec::par_fill_chunks(&mut dx, c * h * wd, |ni, chunk| {
                    conv_backward_input_sample(
                        chunk,
                        wdta,
                        &go[ni * oc * oh * ow..(ni + 1) * oc * oh * ow],
                        (c, h, wd),
                        (oc, kh, kw),
                        (oh, ow),
                        stride,
                        pad,
                    );
                });
                res.push((x.0, Tensor::from_vec(&[n, c, h, wd], dx)));
            }
            if nw || nb {
                // Per-sample partials, folded in index order.
                let partials = exec::par_map(n, |ni| {
                    conv_backward_params_sample(
                        &xd[ni * c * h * wd..(ni + 1) * c * h * wd],
                        &go[ni * oc * oh * ow..(ni + 1) * oc * oh * ow],
                        (c, h, wd),
                        (oc, kh, kw),
                        (oh, ow),
                        stride,
                        pad,
                    )
                });
                let mut dw = vec![0.0; oc * ic * kh * kw];
                let mut db = vec![0.0; oc];
                for (pw, pb) in partials {
                    for (a, v) in dw.iter_mut().zip(&pw) {
                        *a += v;
                    }
                    for (a, v) in db.iter_mut().zip(&pb) {
                        *a += v;
                    }
                }
                if nw {
                    res.push((w.0, Tensor::from_vec(&[oc, ic, kh, kw], dw)));
                }
                if nb {
                    res.push((b.0, Tensor::from_vec(&[oc], db)));
                }
            }
            res
        });
        self.push(value, req, Some(back))
    }

    /// Batch-normalization over (N, H, W) per channel using batch
    /// statistics. Also returns the biased batch mean/variance so the
    /// caller can fold them into running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Tensor, Tensor) {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = (n * h * w) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    s += xd[base + i];
                }
            }
            let mu = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mu;
                    v += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = v / m;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (g0, b0, mu, is) = (gd[ci], bd[ci], mean[ci], invstd[ci]);
                for i in 0..h * w {
                    out[base + i] = g0 * (xd[base + i] - mu) * is + b0;
                }
            }
        }
        let value = Tensor::from_vec(&xs, out);
        let req = self.any_requires(&[x, gamma, beta]);
        let (nx, ng, nb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let mean_t = Tensor::from_vec(&[c], mean.clone());
        let var_t = Tensor::from_vec(&[c], var.clone());
        let back: BackFn = Box::new(move |g, gout| {
            let xd = g.value(x).data();
            let gd = g.value(gamma).data();
            let go = gout.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let (mu, is) = (mean[ci], invstd[ci]);
                    for i in 0..h * w {
                        let dy = go[base + i];
                        let xhat = (xd[base + i] - mu) * is;
                        sum_dy[ci] += dy;
                        sum_dy_xhat[ci] += dy * xhat;
                    }
                }
            }
            for ci in 0..c {
                dbeta[ci] = sum_dy[ci];
                dgamma[ci] = sum_dy_xhat[ci];
            }
            let mut res = Vec::new();
            if nx {
                let mut dx = vec![0.0; xd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let (mu, is, g0) = (mean[ci], invstd[ci], gd[ci]);
                        let mdy = sum_dy[ci] / m;
                        let mdyx = sum_dy_xhat[ci] / m;
                        for i in 0..h * w {
                            let xhat = (xd[base + i] - mu) * is;
                            dx[base + i] = g0 * is * (go[base + i] - mdy - xhat * mdyx);
                        }
                    }
                }
                res.push((x.0, Tensor::from_vec(&[n, c, h, w], dx)));
            }
            if ng {
                res.push((gamma.0, Tensor::from_vec(&[c], dgamma)));
            }
            if nb {
                res.push((beta.0, Tensor::from_vec(&[c], dbeta)));
            }
            res
        });
        let out_var = self.push(value, req, Some(back));
        (out_var, mean_t, var_t)
    }

    /// Batch-normalization in inference mode: fixed running statistics,
    /// still differentiable with respect to input and affine parameters.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mean = running_mean.data().to_vec();
        let invstd: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (g0, b0, mu, is) = (gd[ci], bd[ci], mean[ci], invstd[ci]);
                for i in 0..h * w {
                    out[base + i] = g0 * (xd[base + i] - mu) * is + b0;
                }
            }
        }
        let value = Tensor::from_vec(&xs, out);
        let req = self.any_requires(&[x, gamma, beta]);
        let (nx, ng, nb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let back: BackFn = Box::new(move |g, gout| {
            let xd = g.value(x).data();
            let gd = g.value(gamma).data();
            let go = gout.data();
            let mut res = Vec::new();
            if nx {
                let mut dx = vec![0.0; xd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let k = gd[ci] * invstd[ci];
                        for i in 0..h * w {
                            dx[base + i] = go[base + i] * k;
                        }
                    }
                }
                res.push((x.0, Tensor::from_vec(&[n, c, h, w], dx)));
            }
            if ng || nb {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let (mu, is) = (mean[ci], invstd[ci]);
                        for i in 0..h * w {
                            let dy = go[base + i];
                            dbeta[ci] += dy;
                            dgamma[ci] += dy * (xd[base + i] - mu) * is;
                        }
                    }
                }
                if ng {
                    res.push((gamma.0, Tensor::from_vec(&[c], dgamma)));
                }
                if nb {
                    res.push((beta.0, Tensor::from_vec(&[c], dbeta)));
                }
            }
            res
        });
        self.push(value, req, Some(back))
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ni * c + ci] = xd[base..base + h * w].iter().sum::<f64>() / hw;
            }
        }
        let value = Tensor::from_vec(&[n, c], out);
        let req = self.requires_grad(x);
        let back: BackFn = Box::new(move |_, gout| {
            let go = gout.data();
            let mut dx = vec![0.0; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let g0 = go[ni * c + ci] / hw;
                    let base = (ni * c + ci) * h * w;
                    dx[base..base + h * w].fill(g0);
                }
            }
            vec![(x.0, Tensor::from_vec(&[n, c, h, w], dx))]
        });
        self.push(value, req, Some(back))
    }

    /// Fully connected layer: x (N, I), w (O, I), b (O) -> (N, O).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, i) = (xs[0], xs[1]);
        let (o, wi) = (ws[0], ws[1]);
        assert_eq!(i, wi, "linear dimension mismatch");
        let mut out = vec![0.0; n * o];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            exec::par_fill_chunks(&mut out, o, |ni, row| {
                let xr = &xd[ni * i..(ni + 1) * i];
                for (oi, slot) in row.iter_mut().enumerate() {
                    let wr = &wd[oi * i..(oi + 1) * i];
                    let mut acc = bd[oi];
                    for k in 0..i {
                        acc += xr[k] * wr[k];
                    }
                    *slot = acc;
                }
            });
        }
        let value = Tensor::from_vec(&[n, o], out);
        let req = self.any_requires(&[x, w, b]);
        let (nx, nw, nb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let back: BackFn = Box::new(move |g, gout| {
            let xd = g.value(x).data();
            let wd = g.value(w).data();
            let go = gout.data();
            let mut res = Vec::new();
            if nx {
                let mut dx = vec![0.0; n * i];
                exec::par_fill_chunks(&mut dx, i, |ni, row| {
                    let gr = &go[ni * o..(ni + 1) * o];
                    for (k, slot) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for oi in 0..o {
                            acc += gr[oi] * wd[oi * i + k];
                        }
                        *slot = acc;
                    }
                });
                res.push((x.0, Tensor::from_vec(&[n, i], dx)));
            }
            if nw {
                let mut dw = vec![0.0; o * i];
                for ni in 0..n {
                    let xr = &xd[ni * i..(ni + 1) * i];
                    let gr = &go[ni * o..(ni + 1) * o];
                    for oi in 0..o {
                        let g0 = gr[oi];
                        let wrow = &mut dw[oi * i..(oi + 1) * i];
                        for k in 0..i {
                            wrow[k] += g0 * xr[k];
                        }
                    }
                }
                res.push((w.0, Tensor::from_vec(&[o, i], dw)));
            }
            if nb {
                let mut db = vec![0.0; o];
                for ni in 0..n {
                    for oi in 0..o {
                        db[oi] += go[ni * o + oi];
                    }
                }
                res.push((b.0, Tensor::from_vec(&[o], db)));
            }
            res
        });
        self.push(value, req, Some(back))
    }

    // ------------------------------------------------------------------
    // Losses and similarity ops
    // ------------------------------------------------------------------

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::Input(format!(
                "label count {} does not match batch size {}",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for ni in 0..n {
            let row = &ld[ni * k..(ni + 1) * k];
            total += row_log_sum_exp(row) - row[labels[ni]];
        }
        let value = Tensor::scalar(total / n as f64);
        let req = self.requires_grad(logits);
        let labels = labels.to_vec();
        let back: BackFn = Box::new(move |g, gout| {
            let ld = g.value(logits).data();
            let gs = gout.item() / n as f64;
            let mut dl = vec![0.0; n * k];
            for ni in 0..n {
                let row = &ld[ni * k..(ni + 1) * k];
                let lse = row_log_sum_exp(row);
                let drow = &mut dl[ni * k..(ni + 1) * k];
                for ki in 0..k {
                    let p = (row[ki] - lse).exp();
                    drow[ki] = gs * (p - if ki == labels[ni] { 1.0 } else { 0.0 });
                }
            }
            vec![(logits.0, Tensor::from_vec(&[n, k], dl))]
        });
        Ok(self.push(value, req, Some(back)))
    }

    /// Rows rescaled to unit L2 norm; errors on a zero-norm row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, d) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for ni in 0..n {
            let row = &xd[ni * d..(ni + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "zero-norm feature vector at row {ni}"
                )));
            }
            norms[ni] = norm;
            for k in 0..d {
                out[ni * d + k] = row[k] / norm;
            }
        }
        let value = Tensor::from_vec(&[n, d], out);
        let req = self.requires_grad(x);
        let back: BackFn = Box::new(move |g, gout| {
            // The op output is this node's own value; recompute from x.
            let xd = g.value(x).data();
            let go = gout.data();
            let mut dx = vec![0.0; n * d];
            for ni in 0..n {
                let norm = norms[ni];
                let row = &xd[ni * d..(ni + 1) * d];
                let grow = &go[ni * d..(ni + 1) * d];
                let mut dot = 0.0;
                for k in 0..d {
                    dot += grow[k] * row[k] / norm;
                }
                for k in 0..d {
                    let y = row[k] / norm;
                    dx[ni * d + k] = (grow[k] - y * dot) / norm;
                }
            }
            vec![(x.0, Tensor::from_vec(&[n, d], dx))]
        });
        Ok(self.push(value, req, Some(back)))
    }

    /// a (N, D) x b (M, D)^T -> (N, M).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        let (n, d) = (ash[0], ash[1]);
        let (m, d2) = (bsh[0], bsh[1]);
        assert_eq!(d, d2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            exec::par_fill_chunks(&mut out, m, |ni, row| {
                let ar = &ad[ni * d..(ni + 1) * d];
                for (mi, slot) in row.iter_mut().enumerate() {
                    let br = &bd[mi * d..(mi + 1) * d];
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += ar[k] * br[k];
                    }
                    *slot = acc;
                }
            });
        }
        let value = Tensor::from_vec(&[n, m], out);
        let req = self.any_requires(&[a, b]);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let back: BackFn = Box::new(move |g, gout| {
            let ad = g.value(a).data();
            let bd = g.value(b).data();
            let go = gout.data();
            let mut res = Vec::new();
            if na {
                let mut da = vec![0.0; n * d];
                for ni in 0..n {
                    for mi in 0..m {
                        let g0 = go[ni * m + mi];
                        for k in 0..d {
                            da[ni * d + k] += g0 * bd[mi * d + k];
                        }
                    }
                }
                res.push((a.0, Tensor::from_vec(&[n, d], da)));
            }
            if nb {
                let mut db = vec![0.0; m * d];
                for ni in 0..n {
                    for mi in 0..m {
                        let g0 = go[ni * m + mi];
                        for k in 0..d {
                            db[mi * d + k] += g0 * ad[ni * d + k];
                        }
                    }
                }
                res.push((b.0, Tensor::from_vec(&[m, d], db)));
            }
            res
        });
        self.push(value, req, Some(back))
    }

    /// Mean NLL of each row's designated positive under a softmax over
    /// all non-diagonal entries; the contrastive objective applied to a
    /// similarity matrix.
    pub fn paired_log_softmax_nll(&mut self, sim: Var, pairs: &[usize]) -> Var {
        let ss = self.value(sim).shape().to_vec();
        let r = ss[0];
        assert_eq!(ss[1], r, "similarity matrix must be square");
        assert_eq!(pairs.len(), r);
        let sd = self.value(sim).data();
        let mut total = 0.0;
        for i in 0..r {
            let row = &sd[i * r..(i + 1) * r];
            total += masked_log_sum_exp(row, i) - row[pairs[i]];
        }
        let value = Tensor::scalar(total / r as f64);
        let req = self.requires_grad(sim);
        let pairs = pairs.to_vec();
        let back: BackFn = Box::new(move |g, gout| {
            let sd = g.value(sim).data();
            let gs = gout.item() / r as f64;
            let mut ds = vec![0.0; r * r];
            for i in 0..r {
                let row = &sd[i * r..(i + 1) * r];
                let lse = masked_log_sum_exp(row, i);
                let drow = &mut ds[i * r..(i + 1) * r];
                for k in 0..r {
                    if k == i {
                        continue;
                    }
                    let p = (row[k] - lse).exp();
                    drow[k] = gs * (p - if k == pairs[i] { 1.0 } else { 0.0 });
                }
            }
            vec![(sim.0, Tensor::from_vec(&[r, r], ds))]
        });
        self.push(value, req, Some(back))
    }
}

#[inline]
fn row_log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

#[inline]
fn masked_log_sum_exp(row: &[f64], skip: usize) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (k, v) in row.iter().enumerate() {
        if k != skip {
            mx = mx.max(*v);
        }
    }
    let mut s = 0.0;
    for (k, v) in row.iter().enumerate() {
        if k != skip {
            s += (v - mx).exp();
        }
    }
    mx + s.ln()
}

/// Lowers one sample into column-major patches: row (ci, ky, kx) holds
/// the input value under that kernel tap for every output position, so
/// convolution becomes a (oc) x (c*kh*kw) x (oh*ow) matrix product with
/// long contiguous inner loops.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    col: &mut [f64],
    (c, h, wd): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) {
    col.fill(0.0);
    let cols = oh * ow;
    for ci in 0..c {
        let xch = &x[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * cols
                    ..((ci * kh + ky) * kw + kx + 1) * cols];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let xrow = &xch[(iy - pad) * wd..(iy - pad + 1) * wd];
                    let rrow = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, slot) in rrow.iter_mut().enumerate() {
                        let ix = ox * stride + kx;
                        if ix >= pad && ix - pad < wd {
                            *slot = xrow[ix - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back into the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    dx: &mut [f64],
    (c, h, wd): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let cols = oh * ow;
    for ci in 0..c {
        let dxch = &mut dx[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..kh {
            for kx in 0..kw {
                let row =
                    &col[((ci * kh + ky) * kw + kx) * cols..((ci * kh + ky) * kw + kx + 1) * cols];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dxrow = &mut dxch[(iy - pad) * wd..(iy - pad + 1) * wd];
                    let rrow = &row[oy * ow..(oy + 1) * ow];
                    for (ox, v) in rrow.iter().enumerate() {
                        let ix = ox * stride + kx;
                        if ix >= pad && ix - pad < wd {
                            dxrow[ix - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_sample(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    (c, h, wd): (usize, usize, usize),
    (oc, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let rows = c * kh * kw;
    let cols = oh * ow;
    let mut col = vec![0.0; rows * cols];
    im2col(x, &mut col, (c, h, wd), (kh, kw), (oh, ow), stride, pad);
    for oi in 0..oc {
        let och = &mut out[oi * cols..(oi + 1) * cols];
        och.fill(b[oi]);
        for r in 0..rows {
            let wv = w[oi * rows + r];
            if wv == 0.0 {
                continue;
            }
            let crow = &col[r * cols..(r + 1) * cols];
            for (o, v) in och.iter_mut().zip(crow) {
                *o += wv * v;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input_sample(
    dx: &mut [f64],
    w: &[f64],
    go: &[f64],
    (c, h, wd): (usize, usize, usize),
    (oc, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let rows = c * kh * kw;
    let cols = oh * ow;
    let mut dcol = vec![0.0; rows * cols];
    for oi in 0..oc {
        let gch = &go[oi * cols..(oi + 1) * cols];
        for r in 0..rows {
            let wv = w[oi * rows + r];
            if wv == 0.0 {
                continue;
            }
            let drow = &mut dcol[r * cols..(r + 1) * cols];
            for (d, g) in drow.iter_mut().zip(gch) {
                *d += wv * g;
            }
        }
    }
    col2im(&dcol, dx, (c, h, wd), (kh, kw), (oh, ow), stride, pad);
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_params_sample(
    x: &[f64],
    go: &[f64],
    (c, h, wd): (usize, usize, usize),
    (oc, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rows = c * kh * kw;
    let cols = oh * ow;
    let mut col = vec![0.0; rows * cols];
    im2col(x, &mut col, (c, h, wd), (kh, kw), (oh, ow), stride, pad);
    let mut dw = vec![0.0; oc * rows];
    let mut db = vec![0.0; oc];
    for oi in 0..oc {
        let gch = &go[oi * cols..(oi + 1) * cols];
        db[oi] += gch.iter().sum::<f64>();
        for r in 0..rows {
            let crow = &col[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (g, v) in gch.iter().zip(crow) {
                acc += g * v;
            }
            dw[oi * rows + r] += acc;
        }
    }
    (dw, db)
}

/// Central-difference gradient of a scalar function; the independent
/// oracle used by every gradient-correctness check in the test suites.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest per-element relative error between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, "graph-test", 0);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Gradcheck scaffold: builds a scalar loss from a single leaf.
    fn check_grad(
        dims: usize,
        seed: u64,
        build: impl Fn(&mut Graph, Var) -> Var,
        tol: f64,
    ) {
        let x0 = rand_vec(dims, seed);
        let eval = |xs: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(&[dims], xs.to_vec()));
            let loss = build(&mut g, x);
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[dims], x0.clone()));
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().data().to_vec();
        let numeric = finite_difference_gradient(eval, &x0, 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn conv2d_gradcheck() {
        // 1 sample, 2x5x5 input, 3 output channels, stride 2.
        let (c, h, w, oc, k) = (2usize, 5usize, 5usize, 3usize, 3usize);
        let nx = c * h * w;
        let nw = oc * c * k * k;
        let dims = nx + nw + oc;
        check_grad(
            dims,
            1,
            move |g, all| {
                let x = g.slice_leaf(all, 0, nx, &[1, c, h, w]);
                let wt = g.slice_leaf(all, nx, nw, &[oc, c, k, k]);
                let b = g.slice_leaf(all, nx + nw, oc, &[oc]);
                let y = g.conv2d(x, wt, b, 2, 1);
                g.sum_of_squares(y)
            },
            1e-5,
        );
    }

    #[test]
    fn linear_and_relu_gradcheck() {
        let (n, i, o) = (3usize, 4usize, 5usize);
        let dims = n * i + o * i + o;
        check_grad(
            dims,
            2,
            move |g, all| {
                let x = g.slice_leaf(all, 0, n * i, &[n, i]);
                let w = g.slice_leaf(all, n * i, o * i, &[o, i]);
                let b = g.slice_leaf(all, n * i + o * i, o, &[o]);
                let y = g.linear(x, w, b);
                let y = g.relu(y);
                g.sum_of_squares(y)
            },
            1e-5,
        );
    }

    #[test]
    fn batchnorm_train_gradcheck() {
        // A plain sum of squares is constant in x for a batch-normalized
        // output (sum xhat = 0, sum xhat^2 = M); the relu head breaks
        // that degeneracy so the x-gradient is actually exercised.
        let (n, c, h, w) = (3usize, 2usize, 2usize, 2usize);
        let dims = n * c * h * w + 2 * c;
        check_grad(
            dims,
            3,
            move |g, all| {
                let x = g.slice_leaf(all, 0, n * c * h * w, &[n, c, h, w]);
                let ga = g.slice_leaf(all, n * c * h * w, c, &[c]);
                let be = g.slice_leaf(all, n * c * h * w + c, c, &[c]);
                let (y, _, _) = g.batchnorm_train(x, ga, be, 1e-5);
                let y = g.relu(y);
                g.sum_of_squares(y)
            },
            1e-4,
        );
    }

    #[test]
    fn batchnorm_eval_gradcheck() {
        let (n, c, h, w) = (2usize, 2usize, 2usize, 2usize);
        let dims = n * c * h * w + 2 * c;
        let rm = Tensor::from_vec(&[c], vec![0.1, -0.2]);
        let rv = Tensor::from_vec(&[c], vec![0.9, 1.4]);
        check_grad(
            dims,
            4,
            move |g, all| {
                let x = g.slice_leaf(all, 0, n * c * h * w, &[n, c, h, w]);
                let ga = g.slice_leaf(all, n * c * h * w, c, &[c]);
                let be = g.slice_leaf(all, n * c * h * w + c, c, &[c]);
                let y = g.batchnorm_eval(x, ga, be, &rm, &rv, 1e-5);
                g.sum_of_squares(y)
            },
            1e-5,
        );
    }

    #[test]
    fn cross_entropy_gradcheck_and_values() {
        let (n, k) = (4usize, 3usize);
        let labels = vec![0usize, 2, 1, 1];
        let l2 = labels.clone();
        check_grad(
            n * k,
            5,
            move |g, all| {
                let logits = g.slice_leaf(all, 0, n * k, &[n, k]);
                g.cross_entropy_mean(logits, &l2).unwrap()
            },
            1e-5,
        );
        // ln(10) for uniform logits over 10 classes.
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 10]));
        let loss = g.cross_entropy_mean(logits, &[3]).unwrap();
        assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-12);
        // Hand value: logits [1, 0], label 0 -> ln(1 + e^{-1}).
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let loss = g.cross_entropy_mean(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((g.value(loss).item() - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cross_entropy_mean(logits, &[0, 3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn normalize_matmul_paired_nll_gradcheck() {
        let (n, d) = (4usize, 3usize);
        let pairs = vec![2usize, 3, 0, 1];
        let p2 = pairs.clone();
        check_grad(
            n * d,
            6,
            move |g, all| {
                let x = g.slice_leaf(all, 0, n * d, &[n, d]);
                let z = g.l2_normalize_rows(x).unwrap();
                let sim = g.matmul_nt(z, z);
                let sim = g.mul_const(sim, 2.0);
                g.paired_log_softmax_nll(sim, &p2)
            },
            1e-4,
        );
    }

    #[test]
    fn global_avg_pool_gradcheck() {
        let (n, c, h, w) = (2usize, 3usize, 2usize, 2usize);
        check_grad(
            n * c * h * w,
            7,
            move |g, all| {
                let x = g.slice_leaf(all, 0, n * c * h * w, &[n, c, h, w]);
                let y = g.global_avg_pool(x);
                g.sum_of_squares(y)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::from_vec(&[2, 2], vec![0.5; 4]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b);
        let loss = g.sum_of_squares(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_some());
        assert!(grads.get(w).is_none());
        assert!(grads.get(b).is_none());
    }
}

// Test-only composition helpers; exposed to the crate's integration
// suites as well, which reuse the same gradcheck scaffolding.
impl Graph {
    /// View of a contiguous slice of a leaf as its own node (copies
    /// forward, scatters gradient back). Only used by tests to gradcheck
    /// multi-input ops through a single flat leaf.
    pub fn slice_leaf(&mut self, src: Var, offset: usize, len: usize, shape: &[usize]) -> Var {
        let data = self.value(src).data()[offset..offset + len].to_vec();
        let value = Tensor::from_vec(shape, data);
        let req = self.requires_grad(src);
        let total = self.value(src).numel();
        let src_shape = self.value(src).shape().to_vec();
        let back: BackFn = Box::new(move |_, gout| {
            let mut full = vec![0.0; total];
            full[offset..offset + len].copy_from_slice(gout.data());
            vec![(src.0, Tensor::from_vec(&src_shape, full))]
        });
        self.push(value, req, Some(back))
    }

    /// Scalar sum of squares; a convenient smooth test head.
    pub fn sum_of_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().map(|a| a * a).sum());
        let req = self.requires_grad(x);
        let back: BackFn = Box::new(move |g, gout| {
            let xv = g.value(x);
            let gs = gout.item();
            let data = xv.data().iter().map(|a| 2.0 * a * gs).collect();
            vec![(x.0, Tensor::from_vec(xv.shape(), data))]
        });
        self.push(value, req, Some(back))
    }
}
