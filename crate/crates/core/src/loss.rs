//! Task losses and the multi-kernel MMD alignment term.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

/// Number of RBF kernels in the MMD ladder.
pub const MMD_KERNELS: usize = 11;

struct CrossEntropyOp {
    probs: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
    plane: usize,
}

impl Backward for CrossEntropyOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let scale = ctx.grad[0] / self.targets.len() as f64;
        let (k, plane) = (self.classes, self.plane);
        vec![ctx.needs[0].then(|| {
            let mut g: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
            for (i, &t) in self.targets.iter().enumerate() {
                let (n, s) = (i / plane, i % plane);
                g[(n * k + t) * plane + s] -= scale;
            }
            g
        })]
    }
}

struct SquaredErrorOp;

impl Backward for SquaredErrorOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let scale = 2.0 * ctx.grad[0] / p.len() as f64;
        let diff = || p.iter().zip(t).map(|(a, b)| (a - b) * scale);
        vec![
            ctx.needs[0].then(|| diff().collect()),
            ctx.needs[1].then(|| diff().map(|d| -d).collect()),
        ]
    }
}

struct AbsErrorOp;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Backward for AbsErrorOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (p, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let scale = ctx.grad[0] / p.len() as f64;
        let signs = || p.iter().zip(t).map(|(a, b)| sign(a - b) * scale);
        vec![
            ctx.needs[0].then(|| signs().collect()),
            ctx.needs[1].then(|| signs().map(|d| -d).collect()),
        ]
    }
}

struct MmdOp {
    bandwidths: Vec<f64>,
}

impl MmdOp {
    /// Summed kernel value and `sum_k dk/d(d^2)` for a squared distance.
    fn kernel(&self, sq: f64) -> (f64, f64) {
        self.bandwidths.iter().fold((0.0, 0.0), |(v, d), &b| {
            let k = (-sq / b).exp();
            (v + k, d - k / b)
        })
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl Backward for MmdOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let c = ctx.grad[0] / (n * (n - 1)) as f64;
        let row = |t: &'_ Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let mut ga = vec![0.0; n * d];
        let mut gb = vec![0.0; n * d];
        // d/dx K(x, y) = 2 * dK/d(d^2) * (x - y)
        let accumulate = |dst: &mut [f64], x: &[f64], y: &[f64], weight: f64| {
            let (_, dk) = self.kernel(sq_dist(x, y));
            for ((g, xi), yi) in dst.iter_mut().zip(x).zip(y) {
                *g += weight * 2.0 * dk * (xi - yi);
            }
        };
        for p in 0..n {
            let (ap, bp) = (row(a, p), row(b, p));
            for j in (0..n).filter(|&j| j != p) {
                let (aj, bj) = (row(a, j), row(b, j));
                accumulate(&mut ga[p * d..(p + 1) * d], &ap, &aj, 2.0 * c);
                accumulate(&mut ga[p * d..(p + 1) * d], &ap, &bj, -2.0 * c);
                accumulate(&mut gb[p * d..(p + 1) * d], &bp, &bj, 2.0 * c);
                accumulate(&mut gb[p * d..(p + 1) * d], &bp, &aj, -2.0 * c);
            }
        }
        vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
    }
}

/// Geometric ladder of squared bandwidths, x2 per step, centred on the
/// median pairwise squared distance of the pooled samples.
pub fn mmd_bandwidths(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = a.shape()[1];
    let rows: Vec<&[f64]> = a.data().chunks(d).chain(b.data().chunks(d)).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]));
        }
    }
    let median = if dists.is_empty() {
        1.0
    } else {
        dists.sort_by(f64::total_cmp);
        let m = dists[dists.len() / 2];
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let half = (MMD_KERNELS / 2) as i32;
    (0..MMD_KERNELS as i32)
        .map(|k| median * 2f64.powi(k - half))
        .collect()
}

impl Graph {
    /// Mean negative log-softmax of the target class. `logits` is `[N, K]`
    /// or `[N, K, H, W]` (per-pixel); `targets` has one entry per row/pixel.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("softmax_cross_entropy", "logits need rank >= 2"));
        }
        let (n, k) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if targets.len() != n * plane {
            return Err(Error::shape("softmax_cross_entropy", &[n * plane], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let (b, s) = (i / plane, i % plane);
            let idx = |c: usize| (b * k + c) * plane + s;
            let max = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[idx(c)] - max).exp()).sum();
            for c in 0..k {
                probs[idx(c)] = (x[idx(c)] - max).exp() / z;
            }
            total += z.ln() + max - x[idx(t)];
        }
        let loss = total / targets.len() as f64;
        let op = CrossEntropyOp {
            probs,
            targets: targets.to_vec(),
            classes: k,
            plane,
        };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), vec![logits], op)
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = self.check_pair("mse_loss", pred, target)?;
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push("mse_loss", Tensor::scalar(v), vec![pred, target], SquaredErrorOp)
    }

    pub fn mae_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = self.check_pair("mae_loss", pred, target)?;
        let v = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.push("mae_loss", Tensor::scalar(v), vec![pred, target], AbsErrorOp)
    }

    fn check_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(&[f64], &[f64])> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        if self.value(a).numel() == 0 {
            return Err(Error::invalid(op, "empty tensors"));
        }
        Ok((self.value(a).data(), self.value(b).data()))
    }

    /// Unbiased multi-kernel MMD^2 between paired `[N, D]` feature sets,
    /// summed over RBF kernels `exp(-|x - y|^2 / b)`. When `bandwidths` is
    /// `None` the ladder comes from [`mmd_bandwidths`] on the current values
    /// and is treated as a constant.
    pub fn mmd(&mut self, a: Var, b: Var, bandwidths: Option<&[f64]>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape("mmd", &sa, &sb));
        }
        let (n, d) = (sa[0], sa[1]);
        if n < 2 {
            return Err(Error::invalid("mmd", format!("need at least 2 samples, got {n}")));
        }
        let bandwidths = match bandwidths {
            Some(b) => b.to_vec(),
            None => mmd_bandwidths(self.value(a), self.value(b)),
        };
        if bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(Error::invalid("mmd", "bandwidths must be positive"));
        }
        let op = MmdOp { bandwidths };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        fn row(t: &[f64], i: usize, d: usize) -> &[f64] {
            &t[i * d..(i + 1) * d]
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                total += op.kernel(sq_dist(row(av, i, d), row(av, j, d))).0
                    + op.kernel(sq_dist(row(bv, i, d), row(bv, j, d))).0
                    - 2.0 * op.kernel(sq_dist(row(av, i, d), row(bv, j, d))).0;
            }
        }
        let value = total / (n * (n - 1)) as f64;
        self.push("mmd", Tensor::scalar(value), vec![a, b], op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3, 4]));
        let l = g.softmax_cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(&[1, 3], vec![margin, 0.0, 0.0]).unwrap());
            let l = g.softmax_cross_entropy(x, &[0]).unwrap();
            let l = g.value(l).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(xv.clone());
        let l = g.softmax_cross_entropy(x, &[2, 0]).unwrap();
        let grad = g.backward(l).unwrap().wrt(x);
        for (row, t) in [(0usize, 2usize), (1, 0)] {
            let p = crate::ops::softmax(&xv.data()[row * 3..row * 3 + 3]);
            for c in 0..3 {
                let expect = (p[c] - f64::from(u8::from(c == t))) / 2.0;
                assert!((grad.data()[row * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3]));
        assert!(g.softmax_cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn mse_mae_simple_cases() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let same = g.mse_loss(t, t).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let shifted = g.constant(Tensor::new(&[2, 2], vec![1.5, 0.0, 3.0, 1.0]).unwrap());
        let mse = g.mse_loss(shifted, t).unwrap();
        let mae = g.mae_loss(shifted, t).unwrap();
        assert_eq!(g.value(mse).item(), 1.0);
        assert_eq!(g.value(mae).item(), 1.0);
        let other = g.constant(Tensor::zeros(&[4]));
        assert!(g.mse_loss(other, t).is_err());
    }

    #[test]
    fn mae_sign_at_zero_is_zero() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = g.constant(Tensor::new(&[3], vec![1.0, 1.0, 4.0]).unwrap());
        let l = g.mae_loss(p, t).unwrap();
        let grad = g.backward(l).unwrap().wrt(p);
        assert_eq!(grad.data(), &[0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let va = g.leaf(a.clone());
        let vb = g.leaf(a);
        let m = g.mmd(va, vb, None).unwrap();
        assert!(g.value(m).item().abs() < 1e-14);
    }

    #[test]
    fn mmd_ladder_has_eleven_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let bw = mmd_bandwidths(&a, &b);
        assert_eq!(bw.len(), MMD_KERNELS);
        for w in bw.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        }
        // k(x, x) = 1 per kernel, so the summed kernel at distance 0 is 11
        let op = MmdOp { bandwidths: bw };
        assert_eq!(op.kernel(0.0).0, MMD_KERNELS as f64);
    }

    #[test]
    fn mmd_needs_two_samples() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[1, 2]));
        assert!(g.mmd(a, a, None).is_err());
    }
}
