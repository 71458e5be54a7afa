//! Fusion baselines: aggregation (concat / average / attention), random
//! exchange, and discarding low-scaling-factor channels.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exchange::{ExchangePlan, LayerExchange};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ATTENTION_REDUCTION: usize = 16;

/// Channel-stack followed by a 1x1 convolution back to `C` channels.
#[derive(Debug, Clone)]
pub struct ConcatBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConcatBlock {
    /// Initialized to the average of the inputs: `W = (1/M) [I ... I]`.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, modalities: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, modalities * channels, 1, 1]);
        for o in 0..channels {
            for m in 0..modalities {
                w.data_mut()[o * modalities * channels + m * channels + o] = 1.0 / modalities as f64;
            }
        }
        Self {
            weight: store.add(format!("{prefix}.concat.weight"), w),
            bias: store.add(format!("{prefix}.concat.bias"), Tensor::zeros(&[channels])),
        }
    }
}

pub fn concat_fusion(
    g: &mut Graph,
    store: &ParamStore,
    block: &ConcatBlock,
    features: &[Var],
) -> Result<Var> {
    let stacked = g.concat_channels(features)?;
    let w = g.param(store, block.weight);
    let b = g.param(store, block.bias);
    g.conv2d(stacked, w, Some(b), 1, 0)
}

/// Elementwise mean of same-shaped features.
pub fn average_fusion(g: &mut Graph, features: &[Var]) -> Result<Var> {
    let first = *features
        .first()
        .ok_or_else(|| Error::invalid("average_fusion", "no inputs"))?;
    for &f in features {
        if g.shape(f) != g.shape(first) {
            return Err(Error::shape("average_fusion", g.shape(first), g.shape(f)));
        }
    }
    let total = g.add_all(features)?;
    g.scale(total, 1.0 / features.len() as f64)
}

/// Squeeze-and-excitation style gate over the concatenated features:
/// bottleneck 1x1 conv to `M*C/r`, ReLU, 1x1 conv back to `M*C`, sigmoid,
/// elementwise gating, then a 1x1 conv to `C`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub squeeze: (ParamId, ParamId),
    pub excite: (ParamId, ParamId),
    pub project: (ParamId, ParamId),
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        modalities: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(
                "attention_fusion",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let wide = modalities * channels;
        let narrow = wide / reduction;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let squeeze = (
            store.add(format!("{prefix}.attention.squeeze.weight"), Tensor::randn(&[narrow, wide, 1, 1], he(wide), rng)),
            store.add(format!("{prefix}.attention.squeeze.bias"), Tensor::zeros(&[narrow])),
        );
        let excite = (
            store.add(format!("{prefix}.attention.excite.weight"), Tensor::randn(&[wide, narrow, 1, 1], he(narrow), rng)),
            store.add(format!("{prefix}.attention.excite.bias"), Tensor::zeros(&[wide])),
        );
        let concat = ConcatBlock::new(store, &format!("{prefix}.attention"), channels, modalities);
        Ok(Self {
            squeeze,
            excite,
            project: (concat.weight, concat.bias),
        })
    }
}

pub fn attention_fusion(
    g: &mut Graph,
    store: &ParamStore,
    block: &AttentionBlock,
    features: &[Var],
) -> Result<Var> {
    let stacked = g.concat_channels(features)?;
    let (w, b) = (g.param(store, block.squeeze.0), g.param(store, block.squeeze.1));
    let z = g.conv2d(stacked, w, Some(b), 1, 0)?;
    let z = g.relu(z)?;
    let (w, b) = (g.param(store, block.excite.0), g.param(store, block.excite.1));
    let z = g.conv2d(z, w, Some(b), 1, 0)?;
    let gate = g.sigmoid(z)?;
    let gated = g.mul(stacked, gate)?;
    let (w, b) = (g.param(store, block.project.0), g.param(store, block.project.1));
    g.conv2d(gated, w, Some(b), 1, 0)
}

/// Exchange a uniformly random `fraction` of each modality's sub-part.
pub fn random_exchange<R: Rng + ?Sized>(
    g: &mut Graph,
    layer: usize,
    bn_outputs: &[Var],
    plan: &ExchangePlan,
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<Var>, LayerExchange)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("random_exchange", format!("fraction {fraction} outside [0, 1]")));
    }
    let first = *bn_outputs
        .first()
        .ok_or_else(|| Error::invalid("random_exchange", "no inputs"))?;
    let channels = g.value(first).dims4("random_exchange")?.1;
    let masks: Vec<Vec<bool>> = plan
        .subparts
        .iter()
        .map(|range| {
            let mut mask = vec![false; channels];
            if bn_outputs.len() > 1 && plan.enabled {
                let len = range.len();
                let count = (fraction * len as f64).round() as usize;
                for i in index::sample(rng, len, count.min(len)) {
                    mask[range.start + i] = true;
                }
            }
            mask
        })
        .collect();
    let outputs = g.channel_exchange(bn_outputs, &masks)?;
    Ok((outputs, LayerExchange::from_masks(layer, &masks)))
}

/// Zero the channels the exchange rule would have replaced.
pub fn discard_channels(
    g: &mut Graph,
    layer: usize,
    bn_outputs: &[Var],
    gammas: &[&[f64]],
    plan: &ExchangePlan,
) -> Result<(Vec<Var>, LayerExchange)> {
    let masks = plan.replaced(gammas)?;
    let outputs = bn_outputs
        .iter()
        .zip(&masks)
        .map(|(&v, mask)| {
            if mask.iter().any(|&r| r) {
                let keep: Vec<bool> = mask.iter().map(|r| !r).collect();
                g.channel_mask(v, &keep)
            } else {
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, LayerExchange::from_masks(layer, &masks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(g: &mut Graph, m: usize, shape: &[usize], seed: u64) -> (Vec<Var>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<Tensor> = (0..m).map(|_| Tensor::randn(shape, 1.0, &mut rng)).collect();
        (vals.iter().map(|t| g.leaf(t.clone())).collect(), vals)
    }

    #[test]
    fn concat_of_identical_features_with_average_init() {
        let mut store = ParamStore::new();
        let block = ConcatBlock::new(&mut store, "f", 3, 2);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let a = g.leaf(x.clone());
        let b = g.leaf(x.clone());
        let y = concat_fusion(&mut g, &store, &block, &[a, b]).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn concat_keeps_channel_count_for_any_m() {
        for m in 1..=4 {
            let mut store = ParamStore::new();
            let block = ConcatBlock::new(&mut store, "f", 5, m);
            let mut g = Graph::new();
            let (vars, _) = features(&mut g, m, &[1, 5, 2, 2], 2);
            let y = concat_fusion(&mut g, &store, &block, &vars).unwrap();
            assert_eq!(g.shape(y), &[1, 5, 2, 2]);
        }
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut store = ParamStore::new();
        let block = ConcatBlock::new(&mut store, "f", 2, 2);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let b = g.leaf(Tensor::zeros(&[1, 2, 3, 2]));
        assert!(concat_fusion(&mut g, &store, &block, &[a, b]).is_err());
    }

    #[test]
    fn average_cases() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let a = g.leaf(x.clone());
        let neg = g.leaf(x.map(|v| -v));
        let y = average_fusion(&mut g, &[a, neg]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let y = average_fusion(&mut g, &[a, a]).unwrap();
        assert_eq!(g.value(y), &x);
        let bad = g.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(average_fusion(&mut g, &[a, bad]).is_err());
    }

    #[test]
    fn attention_requires_divisible_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionBlock::new(&mut store, "a", 24, 2, 16, &mut rng).is_err());
        assert!(AttentionBlock::new(&mut store, "a", 32, 2, 16, &mut rng).is_ok());
    }

    #[test]
    fn attention_saturated_gates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = AttentionBlock::new(&mut store, "a", 16, 2, 16, &mut rng).unwrap();
        let concat = ConcatBlock {
            weight: block.project.0,
            bias: block.project.1,
        };
        let mut g = Graph::new();
        let (vars, _) = features(&mut g, 2, &[2, 16, 3, 3], 5);

        store.get_mut(block.excite.1).data_mut().fill(1e3);
        let open = attention_fusion(&mut g, &store, &block, &vars).unwrap();
        let plain = concat_fusion(&mut g, &store, &concat, &vars).unwrap();
        assert!(g.value(open).max_abs_diff(g.value(plain)) < 1e-12);

        let mut g = Graph::new();
        let (vars, _) = features(&mut g, 2, &[2, 16, 3, 3], 5);
        store.get_mut(block.excite.1).data_mut().fill(-1e3);
        store.get_mut(block.project.1).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64);
        let closed = attention_fusion(&mut g, &store, &block, &vars).unwrap();
        for (i, v) in g.value(closed).data().iter().enumerate() {
            assert!((v - ((i / 9) % 16) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn random_exchange_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = ExchangePlan::half_channel(100, 2, 0.01).unwrap();
        let mut g = Graph::new();
        let (vars, vals) = features(&mut g, 2, &[1, 100, 1, 1], 7);

        let (out, report) = random_exchange(&mut g, 0, &vars, &plan, 0.0, &mut rng).unwrap();
        assert_eq!(report.total(), 0);
        assert_eq!(g.value(out[0]), &vals[0]);

        let (_, report) = random_exchange(&mut g, 0, &vars, &plan, 0.3, &mut rng).unwrap();
        assert_eq!(report.counts(), vec![15, 15]);
        assert!(report.replaced[0].iter().all(|&c| c < 50));
        assert!(report.replaced[1].iter().all(|&c| c >= 50));

        let (out, _) = random_exchange(&mut g, 0, &vars, &plan, 1.0, &mut rng).unwrap();
        assert_eq!(&g.value(out[0]).data()[..50], &vals[1].data()[..50]);
        assert_eq!(&g.value(out[1]).data()[50..], &vals[0].data()[50..]);
        assert_eq!(&g.value(out[0]).data()[50..], &vals[0].data()[50..]);
    }

    #[test]
    fn discard_matches_exchange_criterion() {
        let plan = ExchangePlan::half_channel(4, 2, 0.02).unwrap();
        let mut g = Graph::new();
        let (vars, vals) = features(&mut g, 2, &[1, 4, 2, 1], 8);
        let gammas = [vec![0.01, 0.5, 0.0, 0.0], vec![1.0, 0.0, -0.015, 0.3]];
        let refs: Vec<&[f64]> = gammas.iter().map(Vec::as_slice).collect();

        let (out, report) = discard_channels(&mut g, 0, &vars, &refs, &plan).unwrap();
        let (_, ex) = crate::exchange::exchange_forward(&mut g, 0, &vars, &refs, &plan).unwrap();
        assert_eq!(report, ex);
        assert_eq!(report.replaced, vec![vec![0], vec![2]]);
        assert!(g.value(out[0]).channel(0).iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out[0]).channel(1), vals[0].channel(1));

        let none = [vec![1.0; 4], vec![1.0; 4]];
        let refs: Vec<&[f64]> = none.iter().map(Vec::as_slice).collect();
        let (out, _) = discard_channels(&mut g, 0, &vars, &refs, &plan).unwrap();
        assert_eq!(g.value(out[1]), &vals[1]);

        let all = [vec![0.0; 4], vec![0.0; 4]];
        let refs: Vec<&[f64]> = all.iter().map(Vec::as_slice).collect();
        let (out, _) = discard_channels(&mut g, 0, &vars, &refs, &plan).unwrap();
        assert!(g.value(out[0]).data()[..4].iter().all(|&v| v == 0.0));
        assert_eq!(&g.value(out[0]).data()[4..], &vals[0].data()[4..]);
    }
}
