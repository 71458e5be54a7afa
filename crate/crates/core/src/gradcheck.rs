//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{attention_fusion, concat_fusion, AttentionBlock, ConcatBlock};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::net::{Arch, CenModel, LossConfig, Mode, ModelConfig, Target, TaskLoss};
use crate::norm::{NormMode, NormState};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Absolute slack for entries whose true derivative is ~0.
pub const DEFAULT_ABS_TOL: f64 = 1e-8;
/// Entries smaller than this are left out of the reported worst relative
/// error (they are still checked against the tolerance).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Largest relative error over entries of magnitude above
/// `RELATIVE_FLOOR`, and the first entry violating
/// `|a - n| <= rel * max(|a|, |n|) + abs`.
pub fn compare(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> (f64, Option<Mismatch>) {
    let mut worst = 0.0f64;
    let mut first = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if scale > RELATIVE_FLOOR {
            worst = worst.max(diff / scale);
        }
        if !(diff <= rel * scale + abs) && first.is_none() {
            first = Some(Mismatch {
                index: i,
                analytic: a,
                numeric: n,
            });
        }
    }
    if analytic.len() != numeric.len() && first.is_none() {
        first = Some(Mismatch {
            index: analytic.len().min(numeric.len()),
            analytic: f64::NAN,
            numeric: f64::NAN,
        });
    }
    (worst, first)
}


/// Result of checking one graph against finite differences.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Number of coordinates compared.
    pub checked: usize,
    pub worst_rel: f64,
    pub mismatch: Option<Mismatch>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Compare backprop against central differences for `build`.
///
/// The graph output is reduced to `sum(out * r)` with a fixed random `r`
/// so every output entry contributes. Every leaf coordinate is checked;
/// parameters of `store` are checked at up to `param_coords` randomly
/// chosen coordinates (all when `None`).
pub fn check(
    name: &str,
    leaves: &[Tensor],
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
    h: f64,
    param_coords: Option<usize>,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        g.shape(out).to_vec()
    };
    let probe = Tensor::randn(&shape, 1.0, &mut rng);
    let reduce = |g: &mut Graph, out: Var| -> Result<Var> {
        let r = g.constant(probe.clone());
        let p = g.mul(out, r)?;
        g.sum(p)
    };
    let value = |store: &ParamStore, leaves: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        let l = reduce(&mut g, out)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars)?;
    let l = reduce(&mut g, out)?;
    let grads = g.backward(l)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut failure = None;
    for (k, &v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.wrt(v).data());
        let base = leaves[k].data().to_vec();
        let num = numeric_gradient(
            |x| {
                let mut probe_leaves = leaves.to_vec();
                probe_leaves[k].data_mut().copy_from_slice(x);
                value(store, &probe_leaves).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &base,
            h,
        );
        numeric.extend(num);
    }

    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    if let Some(limit) = param_coords {
        if coords.len() > limit {
            let picked = rand::seq::index::sample(&mut rng, coords.len(), limit);
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }
    let mut perturbed = store.clone();
    for &(id, i) in &coords {
        analytic.push(grads.param(id).map_or(0.0, |t| t.data()[i]));
        let x0 = store.get(id).data()[i];
        let mut at = |x: f64| -> Result<f64> {
            perturbed.get_mut(id).data_mut()[i] = x;
            value(&perturbed, leaves)
        };
        let up = at(x0 + h)?;
        let down = at(x0 - h)?;
        at(x0)?;
        numeric.push((up - down) / (2.0 * h));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let (worst_rel, mismatch) = compare(&analytic, &numeric, DEFAULT_REL_TOL, DEFAULT_ABS_TOL);
    Ok(CheckOutcome {
        name: name.to_string(),
        checked: analytic.len(),
        worst_rel,
        mismatch,
    })
}

/// Entries pushed at least `margin` away from zero, keeping kinks of
/// `relu`, `abs` and friends out of the finite-difference stencil.
fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// One finite-difference check per differentiable op, with shapes and
/// values drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let n = rng.random_range(1..=2);
    let c = rng.random_range(2..=3);
    let hw = 2 * rng.random_range(1..=2);
    let x4 = |rng: &mut ChaCha8Rng| Tensor::randn(&[n, c, hw, hw], 1.0, rng);
    let empty = ParamStore::new();
    let h = DEFAULT_STEP;
    let mut out = Vec::new();
    let s = seed;

    let (a, b) = (x4(rng), x4(rng));
    out.push(check("add", &[a.clone(), b.clone()], &empty, |g, _, v| g.add(v[0], v[1]), h, None, s)?);
    out.push(check("sub", &[a.clone(), b.clone()], &empty, |g, _, v| g.sub(v[0], v[1]), h, None, s)?);
    out.push(check("mul", &[a.clone(), b.clone()], &empty, |g, _, v| g.mul(v[0], v[1]), h, None, s)?);
    out.push(check("scale", std::slice::from_ref(&a), &empty, |g, _, v| g.scale(v[0], -1.7), h, None, s)?);
    out.push(check("sum", std::slice::from_ref(&a), &empty, |g, _, v| g.sum(v[0]), h, None, s)?);
    out.push(check("mean", std::slice::from_ref(&a), &empty, |g, _, v| g.mean(v[0]), h, None, s)?);
    let kinked = away_from_zero(a.clone(), 0.05);
    out.push(check("relu", &[kinked], &empty, |g, _, v| g.relu(v[0]), h, None, s)?);
    out.push(check("sigmoid", std::slice::from_ref(&a), &empty, |g, _, v| g.sigmoid(v[0]), h, None, s)?);
    out.push(check("reshape", std::slice::from_ref(&a), &empty, |g, _, v| g.reshape(v[0], &[n * c, hw * hw]), h, None, s)?);
    out.push(check("flatten", std::slice::from_ref(&a), &empty, |g, _, v| g.flatten(v[0]), h, None, s)?);

    let logits = Tensor::randn(&[3], 1.0, rng);
    out.push(check("softmax", std::slice::from_ref(&logits), &empty, |g, _, v| g.softmax(v[0]), h, None, s)?);
    let items = [logits, x4(rng), x4(rng), x4(rng)];
    out.push(check(
        "weighted_sum",
        &items,
        &empty,
        |g, _, v| g.weighted_sum(v[0], &v[1..]),
        h,
        None,
        s,
    )?);
    out.push(check("concat_channels", &[a.clone(), b.clone()], &empty, |g, _, v| g.concat_channels(v), h, None, s)?);
    let keep: Vec<bool> = (0..c).map(|i| i % 2 == 0).collect();
    out.push(check("channel_mask", std::slice::from_ref(&a), &empty, |g, _, v| g.channel_mask(v[0], &keep), h, None, s)?);
    out.push(check("upsample_nearest", std::slice::from_ref(&a), &empty, |g, _, v| g.upsample_nearest(v[0], 2), h, None, s)?);
    out.push(check("avg_pool", std::slice::from_ref(&a), &empty, |g, _, v| g.avg_pool(v[0], 2), h, None, s)?);
    let map = Tensor::randn(&[c, hw, hw], 1.0, rng);
    out.push(check("add_map", std::slice::from_ref(&a), &empty, |g, _, v| g.add_map(v[0], &map), h, None, s)?);

    let cout = rng.random_range(1..=3);
    let w3 = Tensor::randn(&[cout, c, 3, 3], 0.5, rng);
    let bias = Tensor::randn(&[cout], 0.5, rng);
    out.push(check(
        "conv2d",
        &[a.clone(), w3.clone(), bias.clone()],
        &empty,
        |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        h,
        None,
        s,
    )?);
    let odd = Tensor::randn(&[n, c, 5, 5], 1.0, rng);
    out.push(check(
        "conv2d_stride2",
        &[odd, w3.clone(), bias.clone()],
        &empty,
        |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        h,
        None,
        s,
    )?);
    let w1 = Tensor::randn(&[cout, c, 1, 1], 0.5, rng);
    out.push(check("conv2d_1x1_nobias", &[a.clone(), w1], &empty, |g, _, v| g.conv2d(v[0], v[1], None, 1, 0), h, None, s)?);

    let k = rng.random_range(2..=4);
    let scores = Tensor::randn(&[n, k, hw, hw], 1.0, rng);
    let labels: Vec<usize> = (0..n * hw * hw).map(|_| rng.random_range(0..k)).collect();
    out.push(check(
        "softmax_cross_entropy",
        &[scores],
        &empty,
        |g, _, v| g.softmax_cross_entropy(v[0], &labels),
        h,
        None,
        s,
    )?);
    out.push(check("mse_loss", &[a.clone(), b.clone()], &empty, |g, _, v| g.mse_loss(v[0], v[1]), h, None, s)?);
    let shifted = Tensor::new(a.shape(), a.data().iter().zip(away_from_zero(b.clone(), 0.05).data()).map(|(x, d)| x + d).collect())?;
    out.push(check("mae_loss", &[shifted, a.clone()], &empty, |g, _, v| g.mae_loss(v[0], v[1]), h, None, s)?);
    let rows = rng.random_range(3..=5);
    let (fa, fb) = (Tensor::randn(&[rows, 3], 1.0, rng), Tensor::randn(&[rows, 3], 1.0, rng));
    let bw = crate::loss::mmd_bandwidths(&fa, &fb);
    out.push(check("mmd", &[fa, fb], &empty, |g, _, v| g.mmd(v[0], v[1], Some(&bw)), h, None, s)?);
    let mask: Vec<bool> = (0..a.numel()).map(|i| i % 3 != 0).collect();
    let flat = away_from_zero(a.clone(), 0.05).reshape(&[a.numel()])?;
    out.push(check("l1_masked", &[flat], &empty, |g, _, v| g.l1_masked(v[0], &mask, 0.3), h, None, s)?);

    for m in [2usize, 3] {
        let feats: Vec<Tensor> = (0..m).map(|_| x4(rng)).collect();
        let replace: Vec<Vec<bool>> = (0..m)
            .map(|_| (0..c).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        out.push(check(
            &format!("channel_exchange_m{m}"),
            &feats,
            &empty,
            |g, _, v| {
                let ys = g.channel_exchange(v, &replace)?;
                g.concat_channels(&ys)
            },
            h,
            None,
            s,
        )?);
    }

    for mode in [NormMode::Batch, NormMode::Instance] {
        let mut store = ParamStore::new();
        let mut state = NormState::new(&mut store, "norm", c, mode, vec![true; c])?;
        *store.get_mut(state.gamma) = Tensor::randn(&[c], 1.0, rng);
        *store.get_mut(state.beta) = Tensor::randn(&[c], 1.0, rng);
        let mut wide = Tensor::randn(&[n, c, hw, hw], 2.0, rng);
        wide.data_mut().iter_mut().for_each(|v| *v += 0.5);
        state.running_mean = vec![0.3; c];
        let name = match mode {
            NormMode::Batch => "batch_norm",
            NormMode::Instance => "instance_norm",
        };
        out.push(check(
            name,
            &[wide],
            &store,
            |g, st, v| state.clone().forward_train(g, st, v[0]).map(|o| o.y),
            h,
            None,
            s,
        )?);
    }

    let m = 2;
    let feats: Vec<Tensor> = (0..m).map(|_| x4(rng)).collect();
    let mut store = ParamStore::new();
    let block = ConcatBlock::new(&mut store, "f", c, m);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.5, rng);
    }
    out.push(check("concat_fusion", &feats, &store, |g, st, v| concat_fusion(g, st, &block, v), h, None, s)?);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "f", 4, m, 2, rng)?;
    let feats: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&[n, 4, 2, 2], 1.0, rng)).collect();
    out.push(check(
        "attention_fusion",
        &feats,
        &store,
        |g, st, v| attention_fusion(g, st, &block, v),
        h,
        None,
        s,
    )?);
    Ok(out)
}

/// Finite-difference check of the full two-modality network loss
/// (batch norm, exchange, ensemble, l1) with several scaling factors
/// pinned under the threshold so exchange is active.
pub fn cen_forward_check(seed: u64, param_coords: usize) -> Result<(CheckOutcome, usize)> {
    let mut cfg = ModelConfig::new(2, Arch::segmentation(3, 3, 2, 8));
    cfg.seed = seed;
    let mut model = CenModel::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in 0..model.depth() {
        for s in 0..2 {
            let id = model.norms[l][s].gamma;
            let own = &model.plans[l].subparts[s];
            for ch in own.clone().step_by(2) {
                model.params.get_mut(id).data_mut()[ch] = 0.002 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    let inputs: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng)).collect();
    let labels: Vec<usize> = (0..2 * 64).map(|_| rng.random_range(0..3)).collect();
    let target = Target::Labels(labels);
    let loss_cfg = LossConfig {
        task: TaskLoss::CrossEntropy,
        lambda: 0.01,
        stream_weight: 0.5,
    };
    let replaced = {
        let mut g = Graph::new();
        model.clone().forward(&mut g, &inputs, Mode::Train)?.report.total()
    };
    let outcome = check(
        "cen_forward",
        &[],
        &model.params,
        |g, store, _| {
            let mut m = model.clone();
            m.params = store.clone();
            let out = m.forward(g, &inputs, Mode::Train)?;
            Ok(m.loss(g, &out, &target, &loss_cfg)?.total)
        },
        1e-6,
        Some(param_coords),
        seed,
    )?;
    Ok((outcome, replaced))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let x = [0.5, -1.5, 2.0];
        let num = numeric_gradient(|v| v.iter().map(|t| t.powi(3)).sum(), &x, DEFAULT_STEP);
        let exact: Vec<f64> = x.iter().map(|t| 3.0 * t * t).collect();
        assert!(compare(&exact, &num, 1e-8, 0.0).1.is_none());
        let (_, bad) = compare(&[1.0, 2.0], &[1.0, 2.1], 1e-4, 0.0);
        assert_eq!(bad.unwrap().index, 1);
    }

    #[test]
    fn op_suite_passes() {
        for outcome in op_suite(3).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // x * x with one factor hidden from backprop has half the true gradient.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let outcome = check(
            "half",
            &[x],
            &ParamStore::new(),
            |g, _, v| {
                let frozen = g.constant(g.value(v[0]).clone());
                g.mul(v[0], frozen)
            },
            DEFAULT_STEP,
            None,
            0,
        )
        .unwrap();
        assert!(!outcome.passed());
    }
}
