//! Batch / instance normalization with private per-modality parameters and
//! the masked l1 penalty on scaling factors.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_STAT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics per channel over `N*H*W`.
    Batch,
    /// Statistics per `(sample, channel)` over `H*W`.
    Instance,
}

/// Normalization parameters for one (modality, layer).
///
/// `gamma` and `beta` live in the model's [`ParamStore`]; the running
/// statistics and sparsity mask are buffers owned here.
#[derive(Debug, Clone)]
pub struct NormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub stat_momentum: f64,
    /// Channels whose scaling factor is under the l1 penalty.
    pub sparsity_mask: Vec<bool>,
    pub mode: NormMode,
    /// Use per-call statistics in eval mode too (instance-norm default).
    pub eval_batch_stats: bool,
}

/// Output of a training-mode forward pass.
pub struct NormOutput {
    pub y: Var,
    pub batch_mean: Vec<f64>,
    pub batch_std: Vec<f64>,
}

impl NormState {
    /// gamma = 1, beta = 0, running stats (0, 1).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        mode: NormMode,
        sparsity_mask: Vec<bool>,
    ) -> Result<Self> {
        if sparsity_mask.len() != channels {
            return Err(Error::shape("norm", &[channels], &[sparsity_mask.len()]));
        }
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            stat_momentum: DEFAULT_STAT_MOMENTUM,
            sparsity_mask,
            mode,
            eval_batch_stats: mode == NormMode::Instance,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn gammas<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.gamma).data()
    }

    /// Normalize with current statistics and fold them into the running
    /// averages.
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<NormOutput> {
        let (n, c, h, w) = g.value(x).dims4("norm")?;
        if c != self.channels() {
            return Err(Error::shape("norm", &[self.channels()], &[c]));
        }
        if self.mode == NormMode::Batch && n * h * w < 2 {
            return Err(Error::invalid(
                "norm",
                format!("batch statistics need N*H*W >= 2, got {}", n * h * w),
            ));
        }
        let stats = group_stats(g.value(x), self.mode);
        let (mean, var) = stats.channel_summary(n, c);
        let count = stats.count as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.stat_momentum;
        for ch in 0..c {
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean[ch];
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * var[ch] * unbias;
        }
        let y = self.apply(g, store, x, Stats::Batch(stats))?;
        let batch_std = var.iter().map(|v| (v + self.eps).sqrt()).collect();
        Ok(NormOutput {
            y,
            batch_mean: mean,
            batch_std,
        })
    }

    /// Normalize with running statistics (or per-call statistics when
    /// `eval_batch_stats` is set); no state is modified.
    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4("norm")?;
        if c != self.channels() {
            return Err(Error::shape("norm", &[self.channels()], &[c]));
        }
        let stats = if self.eval_batch_stats {
            Stats::Batch(group_stats(g.value(x), self.mode))
        } else {
            Stats::Running {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            }
        };
        self.apply(g, store, x, stats)
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stats: Stats) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.normalize(x, gamma, beta, stats, self.eps)
    }
}

/// Mean and (biased) variance for every normalization group.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Elements per group.
    count: usize,
    per_instance: bool,
}

impl GroupStats {
    fn group(&self, n: usize, c: usize, channels: usize) -> usize {
        if self.per_instance {
            n * channels + c
        } else {
            c
        }
    }

    /// Per-channel mean/variance, averaged over instances in instance mode.
    fn channel_summary(&self, n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
        if !self.per_instance {
            return (self.mean.clone(), self.var.clone());
        }
        let avg = |v: &[f64]| {
            (0..c)
                .map(|ch| (0..n).map(|i| v[i * c + ch]).sum::<f64>() / n as f64)
                .collect()
        };
        (avg(&self.mean), avg(&self.var))
    }
}

fn group_stats(x: &Tensor, mode: NormMode) -> GroupStats {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let per_instance = mode == NormMode::Instance;
    let groups = if per_instance { n * c } else { c };
    let count = if per_instance { hw } else { n * hw };
    let mut sum = vec![0.0; groups];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        let gi = if per_instance { i } else { i % c };
        sum[gi] += plane.iter().sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; groups];
    for (i, plane) in x.data().chunks(hw).enumerate() {
        let gi = if per_instance { i } else { i % c };
        sq[gi] += plane.iter().map(|v| (v - mean[gi]).powi(2)).sum::<f64>();
    }
    let var = sq.iter().map(|s| s / count as f64).collect();
    GroupStats {
        mean,
        var,
        count,
        per_instance,
    }
}

pub(crate) enum Stats {
    Batch(GroupStats),
    Running { mean: Vec<f64>, var: Vec<f64> },
}

struct NormalizeOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Group statistics depend on the input (batch/instance mode).
    stats: Option<GroupStats>,
    channels: usize,
    hw: usize,
}

impl Backward for NormalizeOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (c, hw) = (self.channels, self.hw);
        let gamma = ctx.inputs[1].data();
        let dy = ctx.grad;
        let group_of = |plane: usize| match &self.stats {
            Some(s) => s.group(plane / c, plane % c, c),
            None => plane % c,
        };
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; dy.len()];
            match &self.stats {
                None => {
                    for (p, chunk) in dx.chunks_mut(hw).enumerate() {
                        let scale = gamma[p % c] * self.inv_std[p % c];
                        let g = &dy[p * hw..(p + 1) * hw];
                        chunk.iter_mut().zip(g).for_each(|(d, g)| *d = g * scale);
                    }
                }
                Some(stats) => {
                    let groups = self.inv_std.len();
                    let mut sum_dxhat = vec![0.0; groups];
                    let mut sum_dxhat_xhat = vec![0.0; groups];
                    for p in 0..dy.len() / hw {
                        let gi = group_of(p);
                        let gm = gamma[p % c];
                        for i in p * hw..(p + 1) * hw {
                            let dxhat = dy[i] * gm;
                            sum_dxhat[gi] += dxhat;
                            sum_dxhat_xhat[gi] += dxhat * self.xhat[i];
                        }
                    }
                    let m = stats.count as f64;
                    for p in 0..dy.len() / hw {
                        let gi = group_of(p);
                        let gm = gamma[p % c];
                        let k = self.inv_std[gi] / m;
                        for i in p * hw..(p + 1) * hw {
                            dx[i] = k
                                * (m * dy[i] * gm
                                    - sum_dxhat[gi]
                                    - self.xhat[i] * sum_dxhat_xhat[gi]);
                        }
                    }
                }
            }
            dx
        });
        let dgamma = ctx.needs[1].then(|| {
            let mut d = vec![0.0; c];
            for (p, g) in dy.chunks(hw).enumerate() {
                let xh = &self.xhat[p * hw..(p + 1) * hw];
                d[p % c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            }
            d
        });
        let dbeta = ctx.needs[2].then(|| {
            let mut d = vec![0.0; c];
            for (p, g) in dy.chunks(hw).enumerate() {
                d[p % c] += g.iter().sum::<f64>();
            }
            d
        });
        vec![dx, dgamma, dbeta]
    }
}

struct L1Op {
    lambda: f64,
    mask: Vec<bool>,
}

impl Backward for L1Op {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad[0] * self.lambda;
        vec![ctx.needs[0].then(|| {
            ctx.inputs[0]
                .data()
                .iter()
                .zip(&self.mask)
                .map(|(&v, &m)| {
                    if !m || v == 0.0 {
                        0.0
                    } else {
                        g * v.signum()
                    }
                })
                .collect()
        })]
    }
}

impl Graph {
    /// `gamma * (x - mu) / sqrt(var + eps) + beta` on `[N, C, H, W]`.
    pub(crate) fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Stats,
        eps: f64,
    ) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4("norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("norm", &[c], self.shape(p)));
            }
        }
        let hw = h * w;
        let (mean, inv_std, group_stats) = match stats {
            Stats::Batch(s) => {
                let inv: Vec<f64> = s.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (s.mean.clone(), inv, Some(s))
            }
            Stats::Running { mean, var } => {
                let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv, None)
            }
        };
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for p in 0..xv.len() / hw {
            let ch = p % c;
            let gi = match &group_stats {
                Some(s) => s.group(p / c, ch, c),
                None => ch,
            };
            for i in p * hw..(p + 1) * hw {
                xhat[i] = (xv[i] - mean[gi]) * inv_std[gi];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let op = NormalizeOp {
            xhat,
            inv_std,
            stats: group_stats,
            channels: c,
            hw,
        };
        self.push("norm", value, vec![x, gamma, beta], op)
    }

    /// `lambda * sum_{c in mask} |v_c|` with subgradient `sign(0) = 0`.
    pub fn l1_masked(&mut self, v: Var, mask: &[bool], lambda: f64) -> Result<Var> {
        if self.shape(v) != [mask.len()] {
            return Err(Error::shape("l1_masked", &[mask.len()], self.shape(v)));
        }
        let total: f64 = self
            .value(v)
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x.abs())
            .sum();
        let op = L1Op {
            lambda,
            mask: mask.to_vec(),
        };
        self.push("l1_masked", Tensor::scalar(lambda * total), vec![v], op)
    }
}

/// `lambda * sum over states of sum_{c in mask} |gamma_c|`. A state shared
/// between modalities is penalized once.
pub fn sparsity_penalty(
    g: &mut Graph,
    store: &ParamStore,
    states: &[&NormState],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid("sparsity_penalty", "lambda must be >= 0"));
    }
    let mut seen = BTreeSet::new();
    let mut terms = Vec::new();
    for s in states {
        if !seen.insert(s.gamma) {
            continue;
        }
        let gamma = g.param(store, s.gamma);
        terms.push(g.l1_masked(gamma, &s.sparsity_mask, lambda)?);
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(store: &mut ParamStore, c: usize, mode: NormMode) -> NormState {
        NormState::new(store, "n", c, mode, vec![true; c]).unwrap()
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 1, NormMode::Batch);
        s.eps = 0.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let out = s.forward_train(&mut g, &store, x).unwrap();
        assert_eq!(g.value(out.y).data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 1, NormMode::Batch);
        s.eps = 0.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let out = s.forward_train(&mut g, &store, x).unwrap();
        assert_eq!(g.value(out.y).data(), &[-1.0, 1.0]);
        assert_eq!(out.batch_mean, vec![2.0]);
        assert_eq!(out.batch_std, vec![1.0]);
    }

    #[test]
    fn zero_gamma_outputs_beta_and_blocks_input_gradient() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 2, NormMode::Batch);
        store.get_mut(s.gamma).data_mut().fill(0.0);
        store.get_mut(s.beta).data_mut().copy_from_slice(&[0.3, -0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng));
        let out = s.forward_train(&mut g, &store, x).unwrap();
        for (i, v) in g.value(out.y).data().iter().enumerate() {
            let expect = if (i / 4) % 2 == 0 { 0.3 } else { -0.7 };
            assert_eq!(*v, expect);
        }
        let w = g.constant(Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng));
        let prod = g.mul(out.y, w).unwrap();
        let l = g.sum(prod).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 1, NormMode::Batch);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(s.forward_train(&mut g, &store, x).is_err());
        let bad = g.constant(Tensor::ones(&[2, 3, 1, 1]));
        assert!(s.forward_train(&mut g, &store, bad).is_err());
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 1, NormMode::Batch);
        let data = vec![1.0, 2.0, 4.0, 7.0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1, 1, 1], data.clone()).unwrap());
        s.forward_train(&mut g, &store, x).unwrap();
        let mean = data.iter().sum::<f64>() / 4.0;
        let unbiased = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((s.running_mean[0] - (0.9 * 0.0 + 0.1 * mean)).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 * 1.0 + 0.1 * unbiased)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats_and_is_deterministic() {
        let mut store = ParamStore::new();
        let s = state(&mut store, 2, NormMode::Batch);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let a = s.forward_eval(&mut g, &store, x).unwrap();
        let b = s.forward_eval(&mut g, &store, x).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let scale = 1.0 / (1.0 + s.eps).sqrt();
        for (y, x) in g.value(a).data().iter().zip(xv.data()) {
            assert!((y - x * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn instance_mode_normalizes_each_sample() {
        let mut store = ParamStore::new();
        let mut s = state(&mut store, 1, NormMode::Instance);
        s.eps = 0.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 10.0, 30.0]).unwrap());
        let out = s.forward_train(&mut g, &store, x).unwrap();
        assert_eq!(g.value(out.y).data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(out.batch_mean, vec![(2.0 + 20.0) / 2.0]);
    }

    #[test]
    fn penalty_values() {
        let mut store = ParamStore::new();
        let s = state(&mut store, 2, NormMode::Batch);
        store
            .get_mut(s.gamma)
            .data_mut()
            .copy_from_slice(&[0.5, -0.5]);
        let mut g = Graph::new();
        let p = sparsity_penalty(&mut g, &store, &[&s], 5e-3).unwrap();
        assert!((g.value(p).item() - 5e-3).abs() < 1e-18);
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param(s.gamma).unwrap().data(), &[5e-3, -5e-3]);

        let mut g = Graph::new();
        let p = sparsity_penalty(&mut g, &store, &[&s], 0.0).unwrap();
        assert_eq!(g.value(p).item(), 0.0);
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param(s.gamma).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn penalty_rejects_negative_lambda() {
        let mut store = ParamStore::new();
        let s = state(&mut store, 2, NormMode::Batch);
        let mut g = Graph::new();
        assert!(sparsity_penalty(&mut g, &store, &[&s], -1.0).is_err());
    }
}
