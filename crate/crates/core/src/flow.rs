//! Affine-coupling normalizing flow fitted post hoc on frozen embeddings.
//!
//! Each layer keeps one half of the coordinates fixed and uses it to predict a
//! log-scale `s` and shift `t` for the other half: `y_b = x_b * exp(s) + t`.
//! Halves alternate between layers. The Jacobian is triangular, so the
//! log-determinant of a layer is `sum(s)`.

use std::f64::consts::PI;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, LrSchedule, OptimizerKind, Tensor, Var};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::evalsts::cosine;
use crate::train::Trainer;

const TENSORS_PER_LAYER: usize = 6;

/// Ordered affine coupling layers over `dim` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlow {
    dim: usize,
    hidden: usize,
    layers: usize,
    // Per layer: w1 [cond, hidden], b1, w_scale [hidden, out], b_scale, w_shift, b_shift.
    params: Vec<Tensor>,
}

/// Similarity used between latent vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowScoring {
    #[default]
    Cosine,
    NegativeEuclidean,
}

impl CouplingFlow {
    /// Flow whose scale and shift subnetworks output exactly zero.
    pub fn identity(dim: usize, layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::build(dim, layers, hidden, seed, 0.0)
    }

    /// Flow with random output layers of standard deviation `out_std` (testing and ablations).
    pub fn random(dim: usize, layers: usize, hidden: usize, seed: u64, out_std: f64) -> Result<Self> {
        Self::build(dim, layers, hidden, seed, out_std)
    }

    /// Four layers with hidden width `2 * dim`.
    pub fn default_for(dim: usize, seed: u64) -> Result<Self> {
        Self::identity(dim, 4, 2 * dim, seed)
    }

    fn build(dim: usize, layers: usize, hidden: usize, seed: u64, out_std: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("a coupling flow needs at least 2 dimensions"));
        }
        if layers < 2 {
            return Err(Error::invalid("a coupling flow needs at least 2 layers so every coordinate is transformed"));
        }
        if hidden == 0 {
            return Err(Error::invalid("coupling subnetwork width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers * TENSORS_PER_LAYER);
        for l in 0..layers {
            let (cond, out) = split_sizes(dim, l);
            params.push(Tensor::randn(&[cond, hidden], (cond as f64).powf(-0.5), &mut rng));
            params.push(Tensor::zeros(&[1, hidden]));
            for _ in 0..2 {
                if out_std > 0.0 {
                    params.push(Tensor::randn(&[hidden, out], out_std, &mut rng));
                    params.push(Tensor::randn(&[1, out], out_std, &mut rng));
                } else {
                    params.push(Tensor::zeros(&[hidden, out]));
                    params.push(Tensor::zeros(&[1, out]));
                }
            }
        }
        Ok(CouplingFlow {
            dim,
            hidden,
            layers,
            params,
        })
    }

    pub fn from_parts(dim: usize, layers: usize, hidden: usize, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::build(dim, layers, hidden, 0, 0.0)?;
        if params.len() != template.params.len() {
            return Err(Error::shape(format!(
                "flow expects {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (a, b)) in template.params.iter().zip(&params).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "flow tensor {i}: expected {:?}, found {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(CouplingFlow {
            dim,
            hidden,
            layers,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| {
                ["cond.weight", "cond.bias", "scale.weight", "scale.bias", "shift.weight", "shift.bias"]
                    .iter()
                    .map(move |n| format!("coupling{l}.{n}"))
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Graph forward for a `[batch, dim]` input: `(z, log_det [batch, 1])`.
    pub fn forward_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<(Var, Var)> {
        let (b, d) = g.value(x).dims2();
        if d != self.dim {
            return Err(Error::shape(format!("flow of dim {} given input of dim {d}", self.dim)));
        }
        let half = self.dim / 2;
        let mut h = x;
        let mut log_det: Option<Var> = None;
        for l in 0..self.layers {
            let w = &params[l * TENSORS_PER_LAYER..(l + 1) * TENSORS_PER_LAYER];
            let first = g.slice_cols(h, 0, half)?;
            let second = g.slice_cols(h, half, self.dim)?;
            let (cond, moving) = if l % 2 == 0 { (first, second) } else { (second, first) };
            let (s, t) = subnet(g, w, cond)?;
            let es = g.exp(s);
            let scaled = g.mul(moving, es)?;
            let moved = g.add(scaled, t)?;
            h = if l % 2 == 0 {
                g.concat_cols(&[cond, moved])?
            } else {
                g.concat_cols(&[moved, cond])?
            };
            let ld = g.sum_cols(s);
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => g.add(acc, ld)?,
            });
        }
        debug_assert_eq!(g.value(h).dims2(), (b, d));
        Ok((h, log_det.expect("at least two layers")))
    }

    /// Mean negative log-likelihood graph over a `[batch, dim]` input.
    pub fn nll_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let (z, log_det) = self.forward_var(g, params, x)?;
        let zz = g.square(z);
        let sq = g.sum_cols(zz);
        let half_sq = g.scale(sq, 0.5);
        let per_row = g.sub(half_sq, log_det)?;
        let m = g.mean(per_row);
        Ok(g.add_scalar(m, 0.5 * self.dim as f64 * (2.0 * PI).ln()))
    }

    fn batch_tensor(&self, xs: &[&[f64]]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut data = Vec::with_capacity(xs.len() * self.dim);
        for x in xs {
            if x.len() != self.dim {
                return Err(Error::shape(format!("flow of dim {} given vector of dim {}", self.dim, x.len())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite flow input"));
            }
            data.extend_from_slice(x);
        }
        Tensor::matrix(xs.len(), self.dim, data)
    }

    /// Latents and log-determinants for a batch of vectors.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<(Vec<f64>, f64)>> {
        let input = self.batch_tensor(xs)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(input);
        let (z, ld) = self.forward_var(&mut g, &params, x)?;
        let (zt, ldt) = (g.value(z), g.value(ld));
        Ok((0..xs.len()).map(|r| (zt.row_slice(r).to_vec(), ldt.data()[r])).collect())
    }

    fn subnet_values(&self, layer: usize, cond: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let w: Vec<Var> = self.params[layer * TENSORS_PER_LAYER..(layer + 1) * TENSORS_PER_LAYER]
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect();
        let c = g.constant(Tensor::row(cond.to_vec()));
        let (s, t) = subnet(&mut g, &w, c)?;
        Ok((g.value(s).data().to_vec(), g.value(t).data().to_vec()))
    }
}

fn split_sizes(dim: usize, layer: usize) -> (usize, usize) {
    let half = dim / 2;
    if layer.is_multiple_of(2) {
        (half, dim - half)
    } else {
        (dim - half, half)
    }
}

fn subnet(g: &mut Graph, w: &[Var], cond: Var) -> Result<(Var, Var)> {
    let h = g.matmul(cond, w[0])?;
    let h = g.add_row(h, w[1])?;
    let h = g.tanh(h);
    let s = g.matmul(h, w[2])?;
    let s = g.add_row(s, w[3])?;
    let t = g.matmul(h, w[4])?;
    let t = g.add_row(t, w[5])?;
    Ok((s, t))
}

/// `z = flow(x)` and the exact log-absolute-determinant of the Jacobian.
pub fn flow_forward(flow: &CouplingFlow, x: &Embedding) -> Result<(Vec<f64>, f64)> {
    Ok(flow.forward_batch(&[x.as_slice()])?.remove(0))
}

/// Algebraic inverse of [`flow_forward`].
pub fn flow_inverse(flow: &CouplingFlow, z: &[f64]) -> Result<Embedding> {
    if z.len() != flow.dim {
        return Err(Error::shape(format!("flow of dim {} given latent of dim {}", flow.dim, z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite flow input"));
    }
    let half = flow.dim / 2;
    let mut y = z.to_vec();
    for l in (0..flow.layers).rev() {
        let (cond_range, moving_range) = if l % 2 == 0 {
            (0..half, half..flow.dim)
        } else {
            (half..flow.dim, 0..half)
        };
        let (s, t) = flow.subnet_values(l, &y[cond_range])?;
        for ((v, si), ti) in y[moving_range].iter_mut().zip(&s).zip(&t) {
            *v = (*v - ti) * (-si).exp();
        }
    }
    Ok(Embedding::new(y))
}

/// Mean of `-[log N(z; 0, I) + log_det]` over the batch.
pub fn flow_nll(flow: &CouplingFlow, batch: &[Embedding]) -> Result<f64> {
    let rows: Vec<&[f64]> = batch.iter().map(|e| e.as_slice()).collect();
    let input = flow.batch_tensor(&rows)?;
    let mut g = Graph::new();
    let params = flow.bind(&mut g, false);
    let x = g.constant(input);
    let nll = flow.nll_var(&mut g, &params, x)?;
    Ok(g.value(nll).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub layers: usize,
    /// Subnetwork width; 0 means `2 * dim`.
    pub hidden: usize,
    pub scoring: FlowScoring,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            layers: 4,
            hidden: 0,
            scoring: FlowScoring::Cosine,
        }
    }
}

/// Outcome of [`fit_flow`].
#[derive(Debug, Clone)]
pub struct FlowFit {
    pub flow: CouplingFlow,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub degenerate_input: bool,
}

/// Maximum-likelihood fit by Adam; returns the epoch snapshot with the lowest training NLL.
pub fn fit_flow(flow: &CouplingFlow, embeddings: &[Embedding], config: &FlowConfig, seed: u64) -> Result<FlowFit> {
    let bs = config.batch_size.max(1);
    if embeddings.len() < 2 * bs {
        return Err(Error::invalid(format!(
            "flow fitting needs at least {} embeddings (2 x batch size), got {}",
            2 * bs,
            embeddings.len()
        )));
    }
    let degenerate = embeddings.iter().all(|e| e == &embeddings[0]);
    if degenerate {
        warn!("all {} flow training embeddings are identical; the fit is degenerate", embeddings.len());
    }
    let initial = flow_nll(flow, embeddings)?;
    let mut best = (initial, flow.clone());
    let mut current = flow.clone();
    let steps = (embeddings.len().div_ceil(bs) * config.epochs) as u64;
    let mut trainer = Trainer::new(OptimizerKind::adam(), LrSchedule::warmup(config.lr, 0.0, steps.max(1)), current.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| embeddings[i].as_slice()).collect();
            let input = current.batch_tensor(&rows)?;
            let mut g = Graph::new();
            let params = current.bind(&mut g, true);
            let x = g.constant(input);
            let loss = current.nll_var(&mut g, &params, x)?;
            let grads = g.backward(loss)?;
            let grad_list: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            trainer.step(current.params_mut(), &grad_list)?;
        }
        let nll = flow_nll(&current, embeddings)?;
        if nll.is_finite() && nll <= best.0 {
            best = (nll, current.clone());
        }
    }
    Ok(FlowFit {
        flow: best.1,
        initial_nll: initial,
        final_nll: best.0,
        degenerate_input: degenerate,
    })
}

/// Similarity of two embeddings in the flow's latent space.
pub fn flow_score_with(flow: &CouplingFlow, e1: &Embedding, e2: &Embedding, scoring: FlowScoring) -> Result<f64> {
    if e1.dim() != e2.dim() {
        return Err(Error::shape(format!("flow_score: dims {} and {}", e1.dim(), e2.dim())));
    }
    let mut out = flow.forward_batch(&[e1.as_slice(), e2.as_slice()])?;
    let (z2, _) = out.pop().expect("two rows");
    let (z1, _) = out.pop().expect("two rows");
    match scoring {
        FlowScoring::Cosine => cosine(&z1, &z2),
        FlowScoring::NegativeEuclidean => Ok(-z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
    }
}

/// Cosine similarity of the two latents.
pub fn flow_score(flow: &CouplingFlow, e1: &Embedding, e2: &Embedding) -> Result<f64> {
    flow_score_with(flow, e1, e2, FlowScoring::Cosine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identity_flow_is_identity() {
        let f = CouplingFlow::identity(6, 4, 12, 1).unwrap();
        let x = Embedding::new(vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.5]);
        let (z, ld) = flow_forward(&f, &x).unwrap();
        assert_eq!(z, x.as_slice());
        assert_eq!(ld, 0.0);
        assert_eq!(flow_inverse(&f, &z).unwrap(), x);
    }

    #[test]
    fn constant_log_scale_of_one_on_two_coords() {
        let mut f = CouplingFlow::identity(4, 2, 3, 0).unwrap();
        // Layer 0 scale bias: log-scale 1 on both transformed coordinates.
        f.params_mut()[3] = Tensor::row(vec![1.0, 1.0]);
        let (z, ld) = flow_forward(&f, &Embedding::new(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((ld - 2.0).abs() < 1e-15);
        assert!((z[2] - 3.0 * std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn identity_nll_values() {
        let f = CouplingFlow::identity(2, 2, 4, 0).unwrap();
        let at_mode = flow_nll(&f, &[Embedding::new(vec![0.0, 0.0])]).unwrap();
        assert!((at_mode - (2.0 * PI).ln()).abs() < 1e-15);
        let off = flow_nll(&f, &[Embedding::new(vec![1.0, -1.0])]).unwrap();
        assert!((off - ((2.0 * PI).ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = CouplingFlow::random(7, 3, 10, 2, 0.3).unwrap();
        for _ in 0..50 {
            let x = rand_vec(&mut rng, 7);
            let (z, _) = flow_forward(&f, &Embedding::new(x.clone())).unwrap();
            let back = flow_inverse(&f, &z).unwrap();
            for (a, b) in back.as_slice().iter().zip(&x) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let f = CouplingFlow::identity(2, 2, 2, 0).unwrap();
        assert!(flow_forward(&f, &Embedding::new(vec![f64::NAN, 0.0])).is_err());
        assert!(flow_inverse(&f, &[f64::INFINITY, 0.0]).is_err());
        assert!(CouplingFlow::identity(4, 1, 2, 0).is_err());
    }

    #[test]
    fn scoring() {
        let f = CouplingFlow::random(4, 2, 4, 3, 0.2).unwrap();
        let a = Embedding::new(vec![1.0, 0.5, -0.3, 2.0]);
        assert!((flow_score(&f, &a, &a).unwrap() - 1.0).abs() < 1e-12);
        let id = CouplingFlow::identity(4, 2, 4, 3).unwrap();
        let b = Embedding::new(vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            flow_score(&id, &a, &b).unwrap(),
            cosine(a.as_slice(), b.as_slice()).unwrap()
        );
    }

    #[test]
    fn zero_epochs_leaves_flow() {
        let f = CouplingFlow::identity(2, 2, 4, 0).unwrap();
        let data: Vec<Embedding> = (0..8).map(|i| Embedding::new(vec![i as f64, 1.0])).collect();
        let cfg = FlowConfig {
            epochs: 0,
            batch_size: 4,
            ..FlowConfig::default()
        };
        let fit = fit_flow(&f, &data, &cfg, 0).unwrap();
        assert_eq!(fit.flow, f);
        assert!(fit_flow(&f, &data[..7], &cfg, 0).is_err());
    }

    #[test]
    fn degenerate_input_flagged() {
        let f = CouplingFlow::identity(2, 2, 4, 0).unwrap();
        let data = vec![Embedding::new(vec![1.0, 1.0]); 8];
        let cfg = FlowConfig {
            batch_size: 4,
            ..FlowConfig::default()
        };
        assert!(fit_flow(&f, &data, &cfg, 0).unwrap().degenerate_input);
    }
}
