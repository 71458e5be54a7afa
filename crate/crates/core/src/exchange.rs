//! Channel exchanging guided by normalization scaling factors.
//!
//! For modality `m`, a channel `c` inside `m`'s sub-part whose scaling
//! factor is at or below `theta` is replaced by the mean of the other
//! modalities' normalized outputs at the same channel. The replaced
//! channel is detached: no gradient flows back into `m`'s own
//! pre-exchange activation (and hence to its gamma/beta) from it.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

/// Split `channels` into `modalities` equal contiguous sub-parts.
pub fn partition_channels(channels: usize, modalities: usize) -> Result<Vec<Range<usize>>> {
    if modalities == 0 {
        return Err(Error::invalid("partition_channels", "need at least one modality"));
    }
    if !channels.is_multiple_of(modalities) {
        return Err(Error::invalid(
            "partition_channels",
            format!("{channels} channels do not split into {modalities} equal sub-parts"),
        ));
    }
    let part = channels / modalities;
    Ok((0..modalities).map(|m| m * part..(m + 1) * part).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangePlan {
    pub theta: f64,
    /// Channels each modality may have replaced.
    pub subparts: Vec<Range<usize>>,
    /// Compare `|gamma|` (default) instead of the signed value.
    pub compare_abs: bool,
    pub enabled: bool,
}

impl ExchangePlan {
    /// Disjoint `C/M` sub-parts, one per modality.
    pub fn half_channel(channels: usize, modalities: usize, theta: f64) -> Result<Self> {
        Self::with_subparts(partition_channels(channels, modalities)?, theta)
    }

    /// Every modality may exchange every channel.
    pub fn all_channel(channels: usize, modalities: usize, theta: f64) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::invalid("exchange_plan", "need at least one modality"));
        }
        Self::with_subparts(vec![0..channels; modalities], theta)
    }

    fn with_subparts(subparts: Vec<Range<usize>>, theta: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::invalid("exchange_plan", format!("theta must be > 0, got {theta}")));
        }
        Ok(Self {
            theta,
            subparts,
            compare_abs: true,
            enabled: true,
        })
    }

    pub fn modalities(&self) -> usize {
        self.subparts.len()
    }

    pub fn below_threshold(&self, gamma: f64) -> bool {
        let v = if self.compare_abs { gamma.abs() } else { gamma };
        v <= self.theta
    }

    /// Replacement decisions `[modality][channel]` for the current factors.
    pub fn replaced(&self, gammas: &[&[f64]]) -> Result<Vec<Vec<bool>>> {
        if gammas.len() != self.modalities() {
            return Err(Error::shape("exchange", &[self.modalities()], &[gammas.len()]));
        }
        let channels = gammas.first().map_or(0, |g| g.len());
        let mut out = Vec::with_capacity(gammas.len());
        for (range, gamma) in self.subparts.iter().zip(gammas) {
            if gamma.len() != channels || range.end > channels {
                return Err(Error::shape("exchange", &[channels], &[gamma.len()]));
            }
            let mut mask = vec![false; channels];
            if self.enabled && gammas.len() > 1 {
                for c in range.clone() {
                    mask[c] = self.below_threshold(gamma[c]);
                }
            }
            out.push(mask);
        }
        Ok(out)
    }
}

/// Replaced channel indices for one layer, per modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerExchange {
    pub layer: usize,
    pub replaced: Vec<Vec<usize>>,
}

impl LayerExchange {
    pub fn from_masks(layer: usize, masks: &[Vec<bool>]) -> Self {
        Self {
            layer,
            replaced: masks
                .iter()
                .map(|m| m.iter().enumerate().filter(|(_, &r)| r).map(|(c, _)| c).collect())
                .collect(),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.replaced.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.replaced.iter().map(Vec::len).sum()
    }
}

/// One forward pass worth of exchange decisions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExchangeReport {
    pub layers: Vec<LayerExchange>,
}

impl ExchangeReport {
    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerExchange::total).sum()
    }
}

struct ExchangeOp {
    modality: usize,
    replace: Vec<bool>,
    hw: usize,
}

impl Backward for ExchangeOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let modalities = ctx.inputs.len();
        let c = self.replace.len();
        let share = 1.0 / (modalities - 1).max(1) as f64;
        (0..modalities)
            .map(|m| {
                if !ctx.needs[m] {
                    return None;
                }
                let own = m == self.modality;
                let mut g = vec![0.0; ctx.grad.len()];
                let mut any = false;
                for (p, (dst, src)) in g
                    .chunks_mut(self.hw)
                    .zip(ctx.grad.chunks(self.hw))
                    .enumerate()
                {
                    let replaced = self.replace[p % c];
                    if own != replaced {
                        any = true;
                        if own {
                            dst.copy_from_slice(src);
                        } else {
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * share);
                        }
                    }
                }
                any.then_some(g)
            })
            .collect()
    }
}

impl Graph {
    /// Apply replacement masks to same-shaped `[N, C, H, W]` inputs.
    pub fn channel_exchange(&mut self, inputs: &[Var], replace: &[Vec<bool>]) -> Result<Vec<Var>> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("exchange", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let (_, c, h, w) = self.value(first).dims4("exchange")?;
        if replace.len() != inputs.len() {
            return Err(Error::shape("exchange", &[inputs.len()], &[replace.len()]));
        }
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("exchange", &shape, self.shape(v)));
            }
        }
        for mask in replace {
            if mask.len() != c {
                return Err(Error::shape("exchange", &[c], &[mask.len()]));
            }
        }
        let modalities = inputs.len();
        if modalities == 1 && replace[0].iter().any(|&r| r) {
            return Err(Error::invalid("exchange", "a single modality has nothing to exchange with"));
        }
        let hw = h * w;
        let share = 1.0 / (modalities - 1).max(1) as f64;
        let mut outputs = Vec::with_capacity(modalities);
        for (m, mask) in replace.iter().enumerate() {
            if !mask.iter().any(|&r| r) {
                outputs.push(inputs[m]);
                continue;
            }
            let mut data = self.value(inputs[m]).data().to_vec();
            for (p, dst) in data.chunks_mut(hw).enumerate() {
                if !mask[p % c] {
                    continue;
                }
                dst.fill(0.0);
                for (other, &v) in inputs.iter().enumerate() {
                    if other == m {
                        continue;
                    }
                    let src = &self.value(v).data()[p * hw..(p + 1) * hw];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                dst.iter_mut().for_each(|d| *d *= share);
            }
            let op = ExchangeOp {
                modality: m,
                replace: mask.clone(),
                hw,
            };
            let value = Tensor::new(&shape, data)?;
            outputs.push(self.push("exchange", value, inputs.to_vec(), op)?);
        }
        Ok(outputs)
    }
}

/// Exchange normalized outputs of `M` modalities at one layer.
pub fn exchange_forward(
    g: &mut Graph,
    layer: usize,
    bn_outputs: &[Var],
    gammas: &[&[f64]],
    plan: &ExchangePlan,
) -> Result<(Vec<Var>, LayerExchange)> {
    if bn_outputs.len() != plan.modalities() {
        return Err(Error::shape("exchange", &[plan.modalities()], &[bn_outputs.len()]));
    }
    if let Some(&first) = bn_outputs.first() {
        let c = g.value(first).dims4("exchange")?.1;
        if let Some(bad) = gammas.iter().find(|gm| gm.len() != c) {
            return Err(Error::shape("exchange", &[c], &[bad.len()]));
        }
    }
    let masks = plan.replaced(gammas)?;
    let outputs = g.channel_exchange(bn_outputs, &masks)?;
    Ok((outputs, LayerExchange::from_masks(layer, &masks)))
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Tile the channels of each `[C_m, H, W]` (or `[N, C_m, H, W]`) input
/// cyclically up to the least common multiple of all channel counts.
pub fn widen_inputs(inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let axis = |t: &Tensor| -> Result<usize> {
        match t.ndim() {
            3 => Ok(0),
            4 => Ok(1),
            _ => Err(Error::invalid("widen_inputs", "expected [C,H,W] or [N,C,H,W] inputs")),
        }
    };
    let mut target = 1;
    for t in inputs {
        let c = t.shape()[axis(t)?];
        if c == 0 {
            return Err(Error::invalid("widen_inputs", "zero channels"));
        }
        target = lcm(target, c);
    }
    inputs
        .iter()
        .map(|t| {
            let ax = axis(t)?;
            let c = t.shape()[ax];
            if c == target {
                return Ok(t.clone());
            }
            let plane: usize = t.shape()[ax + 1..].iter().product();
            let batch: usize = t.shape()[..ax].iter().product();
            let mut data = Vec::with_capacity(batch * target * plane);
            for b in 0..batch {
                let item = &t.data()[b * c * plane..(b + 1) * c * plane];
                for k in 0..target {
                    let src = k % c;
                    data.extend_from_slice(&item[src * plane..(src + 1) * plane]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[ax] = target;
            Tensor::new(&shape, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partitions() {
        assert_eq!(partition_channels(64, 2).unwrap(), vec![0..32, 32..64]);
        assert_eq!(partition_channels(6, 3).unwrap(), vec![0..2, 2..4, 4..6]);
        assert!(partition_channels(5, 2).is_err());
        assert!(partition_channels(4, 0).is_err());
    }

    #[test]
    fn plan_rejects_nonpositive_theta() {
        assert!(ExchangePlan::half_channel(4, 2, 0.0).is_err());
        assert!(ExchangePlan::half_channel(4, 2, -1.0).is_err());
    }

    fn random_inputs(g: &mut Graph, m: usize, c: usize, seed: u64) -> (Vec<Var>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Tensor> = (0..m).map(|_| Tensor::randn(&[2, c, 2, 3], 1.0, &mut rng)).collect();
        (values.iter().map(|t| g.leaf(t.clone())).collect(), values)
    }

    #[test]
    fn nothing_below_threshold_is_identity() {
        let mut g = Graph::new();
        let (vars, values) = random_inputs(&mut g, 2, 4, 1);
        let plan = ExchangePlan::half_channel(4, 2, 0.01).unwrap();
        let gammas = [vec![0.5, -0.3, 1.0, 2.0], vec![0.2, 0.2, 0.2, 0.2]];
        let refs: Vec<&[f64]> = gammas.iter().map(Vec::as_slice).collect();
        let (out, report) = exchange_forward(&mut g, 0, &vars, &refs, &plan).unwrap();
        for (o, v) in out.iter().zip(&values) {
            assert_eq!(g.value(*o), v);
        }
        assert_eq!(report.counts(), vec![0, 0]);
    }

    #[test]
    fn two_modalities_copy_the_other_stream() {
        let mut g = Graph::new();
        let (vars, values) = random_inputs(&mut g, 2, 4, 2);
        let plan = ExchangePlan::half_channel(4, 2, 0.01).unwrap();
        let gammas = [vec![1.0, 0.005, 1.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]];
        let refs: Vec<&[f64]> = gammas.iter().map(Vec::as_slice).collect();
        let (out, report) = exchange_forward(&mut g, 3, &vars, &refs, &plan).unwrap();
        assert_eq!(report.replaced, vec![vec![1], vec![]]);
        assert_eq!(report.layer, 3);
        let got = g.value(out[0]).channel(1);
        assert_eq!(got, values[1].channel(1));
        assert_eq!(g.value(out[0]).channel(0), values[0].channel(0));
    }

    #[test]
    fn three_modalities_average_the_others() {
        let mut g = Graph::new();
        let (vars, values) = random_inputs(&mut g, 3, 6, 3);
        let plan = ExchangePlan::half_channel(6, 3, 0.02).unwrap();
        let mut gammas = vec![vec![1.0; 6]; 3];
        gammas[1][3] = -0.01;
        let refs: Vec<&[f64]> = gammas.iter().map(Vec::as_slice).collect();
        let (out, _) = exchange_forward(&mut g, 0, &vars, &refs, &plan).unwrap();
        let a = values[0].channel(3);
        let b = values[2].channel(3);
        for (got, (x, y)) in g.value(out[1]).channel(3).iter().zip(a.iter().zip(&b)) {
            assert!((got - (x + y) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_comparison_replaces_negative_factors() {
        let mut plan = ExchangePlan::half_channel(2, 2, 0.01).unwrap();
        plan.compare_abs = false;
        let masks = plan.replaced(&[&[-5.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(masks[0], vec![true, false]);
        plan.compare_abs = true;
        let masks = plan.replaced(&[&[-5.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(masks[0], vec![false, false]);
    }

    #[test]
    fn threshold_is_inclusive() {
        let plan = ExchangePlan::half_channel(2, 2, 0.02).unwrap();
        assert!(plan.below_threshold(0.02));
        assert!(plan.below_threshold(-0.02));
        assert!(!plan.below_threshold(0.020001));
    }

    #[test]
    fn gamma_length_mismatch_errors() {
        let mut g = Graph::new();
        let (vars, _) = random_inputs(&mut g, 2, 4, 4);
        let plan = ExchangePlan::half_channel(4, 2, 0.01).unwrap();
        let refs: [&[f64]; 2] = [&[1.0; 3], &[1.0; 3]];
        assert!(exchange_forward(&mut g, 0, &vars, &refs, &plan).is_err());
    }

    #[test]
    fn replaced_channel_is_detached_from_its_own_stream() {
        let mut g = Graph::new();
        let (vars, _) = random_inputs(&mut g, 2, 2, 5);
        let masks = vec![vec![true, false], vec![false, false]];
        let out = g.channel_exchange(&vars, &masks).unwrap();
        let s0 = g.sum(out[0]).unwrap();
        let grads = g.backward(s0).unwrap();
        let own = grads.wrt(vars[0]);
        let other = grads.wrt(vars[1]);
        assert!(own.channel(0).iter().all(|&v| v == 0.0));
        assert!(own.channel(1).iter().all(|&v| v == 1.0));
        assert!(other.channel(0).iter().all(|&v| v == 1.0));
        assert!(other.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn widening() {
        let rgb = Tensor::ones(&[3, 2, 2]);
        let depth = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = widen_inputs(&[rgb.clone(), depth.clone()]).unwrap();
        assert_eq!(out[0], rgb);
        assert_eq!(out[1].shape(), &[3, 2, 2]);
        assert_eq!(out[1].data(), [depth.data(); 3].concat().as_slice());

        let four = Tensor::zeros(&[2, 4, 1, 1]);
        let six = Tensor::zeros(&[2, 6, 1, 1]);
        let out = widen_inputs(&[four, six]).unwrap();
        assert_eq!(out[0].shape()[1], 12);
        assert_eq!(out[1].shape()[1], 12);

        let same = vec![Tensor::ones(&[2, 1, 1]), Tensor::zeros(&[2, 1, 1])];
        assert_eq!(widen_inputs(&same).unwrap(), same);
    }
}
