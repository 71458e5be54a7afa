//! Numerical checks of the attraction of l1-penalized scaling factors to
//! zero, the constant-map construction that makes a zero-scaled channel
//! free to exchange, and scaling-factor instrumentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::net::{CenModel, ConvLayer, FusionKind, Sharing};
use crate::tensor::Tensor;

/// Levels below which a scaling factor counts as having reached zero.
pub const DEFAULT_THETA_LOW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttractionQuery {
    pub lambda: f64,
    /// `|dL/dx'|` at the channel.
    pub grad_magnitude: f64,
    pub samples: usize,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `2 Phi(lambda / |g|) - 1`.
pub fn attraction_probability_theory(q: &AttractionQuery) -> Result<f64> {
    if !(q.grad_magnitude > 0.0) {
        return Err(Error::invalid("attraction_probability", "gradient magnitude must be > 0"));
    }
    if q.lambda < 0.0 {
        return Err(Error::invalid("attraction_probability", "lambda must be >= 0"));
    }
    Ok(libm::erf(q.lambda / q.grad_magnitude / std::f64::consts::SQRT_2))
}

/// Frequency with which both one-sided derivatives at `gamma = 0` point back
/// to zero: `g z + lambda > 0` and `g z - lambda < 0`, `z ~ N(0, 1)`.
pub fn attraction_probability_empirical(q: &AttractionQuery, seed: u64) -> Result<f64> {
    if q.samples < 1000 {
        return Err(Error::invalid("attraction_probability", "need at least 1000 samples"));
    }
    if q.lambda < 0.0 {
        return Err(Error::invalid("attraction_probability", "lambda must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = q.grad_magnitude;
    let hits = (0..q.samples)
        .filter(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            g * z + q.lambda > 0.0 && g * z - q.lambda < 0.0
        })
        .count();
    Ok(hits as f64 / q.samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GammaKey {
    pub layer: usize,
    /// Normalization slot (the modality, or 0 when fully shared).
    pub modality: usize,
    pub channel: usize,
}

/// Time series of the sparsity-masked scaling factors.
#[derive(Debug, Clone, Default)]
pub struct GammaTrace {
    pub record_every: usize,
    pub steps: Vec<u64>,
    pub keys: Vec<GammaKey>,
    /// `series[key][t]`.
    pub series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    /// Channels whose `|gamma|` fell below `theta_low`.
    pub reached: usize,
    /// Of those, channels that later exceeded `theta`.
    pub recovered: usize,
}

impl Recovery {
    pub fn rate(&self) -> f64 {
        self.recovered as f64 / self.reached as f64
    }
}

impl GammaTrace {
    pub fn new(model: &CenModel, record_every: usize) -> Self {
        let mut keys = Vec::new();
        for (layer, slots) in model.norms.iter().enumerate() {
            for (modality, state) in slots.iter().enumerate() {
                for (channel, &masked) in state.sparsity_mask.iter().enumerate() {
                    if masked {
                        keys.push(GammaKey { layer, modality, channel });
                    }
                }
            }
        }
        Self {
            record_every,
            steps: Vec::new(),
            series: vec![Vec::new(); keys.len()],
            keys,
        }
    }

    /// Record when `step` is a multiple of `record_every`.
    pub fn maybe_record(&mut self, step: u64, model: &CenModel) {
        if self.record_every == 0 || !step.is_multiple_of(self.record_every as u64) {
            return;
        }
        self.steps.push(step);
        for (key, series) in self.keys.iter().zip(&mut self.series) {
            let gammas = model.norms[key.layer][key.modality].gammas(&model.params);
            series.push(gammas[key.channel]);
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `None` when no channel ever reaches `theta_low`.
    pub fn recovery(&self, theta_low: f64, theta: f64) -> Option<Recovery> {
        let mut stats = Recovery { reached: 0, recovered: 0 };
        for series in &self.series {
            if let Some(t) = series.iter().position(|g| g.abs() < theta_low) {
                stats.reached += 1;
                if series[t + 1..].iter().any(|g| g.abs() > theta) {
                    stats.recovered += 1;
                }
            }
        }
        (stats.reached > 0).then_some(stats)
    }
}

/// Build `f'` from an unshared, exchange-free model `f` whose scaling
/// factor at (`modality`, `layer`, `channel`) is exactly zero.
///
/// The channel then carries the constant `relu(beta)`, so its contribution
/// to the next layer is a constant map. `f'` zeroes that input channel of
/// the next convolution, adds the constant map back (into the bias when it
/// is spatially uniform, otherwise as a constant offset), and enables
/// exchange with a threshold that only catches exact zeros. Outputs of `f`
/// and `f'` agree for any input of spatial size `input_hw`.
pub fn corollary_construct(
    f: &CenModel,
    modality: usize,
    layer: usize,
    channel: usize,
    input_hw: (usize, usize),
) -> Result<CenModel> {
    let op = "corollary_construct";
    if f.config.sharing != Sharing::Unshared {
        return Err(Error::invalid(op, "model must not share parameters across modalities"));
    }
    if f.config.strategy.kind != FusionKind::Cen {
        return Err(Error::invalid(op, "model must use the exchange strategy"));
    }
    if modality >= f.modalities() || layer >= f.depth() {
        return Err(Error::invalid(op, "target out of range"));
    }
    let state = f.norm(layer, modality);
    if channel >= state.channels() {
        return Err(Error::invalid(op, "channel out of range"));
    }
    let gamma = state.gammas(&f.params)[channel];
    if gamma != 0.0 {
        return Err(Error::invalid(op, format!("scaling factor at target is {gamma}, not 0")));
    }

    if !f.plans[layer].subparts[modality].contains(&channel) {
        return Err(Error::invalid(op, "channel is outside the modality's exchangeable sub-part"));
    }

    let mut g = f.clone();
    g.set_theta(f64::MIN_POSITIVE)?;
    g.plans.iter_mut().for_each(|p| p.compare_abs = true);
    g.set_exchange_enabled(true);
    for (l, plan) in g.plans.iter().enumerate() {
        for (m, range) in plan.subparts.iter().enumerate() {
            let gammas = g.gammas(l, m);
            for c in range.clone() {
                let is_target = (m, l, c) == (modality, layer, channel);
                if plan.below_threshold(gammas[c]) && !is_target && plan.modalities() > 1 {
                    return Err(Error::invalid(
                        op,
                        format!("modality {m} layer {l} channel {c} would also be exchanged"),
                    ));
                }
            }
        }
    }

    let beta = f.params.get(state.beta).data()[channel];
    let (h, w) = f.config.arch.feature_hw(input_hw.0, input_hw.1)?[layer];
    let c_in = state.channels();
    let mut constant = Tensor::zeros(&[1, c_in, h, w]);
    constant.data_mut()[channel * h * w..(channel + 1) * h * w].fill(beta.max(0.0));

    let next: &mut ConvLayer = if layer + 1 < g.depth() {
        &mut g.convs[layer + 1][modality]
    } else {
        &mut g.heads[modality]
    };
    let weight = g.params.get(next.weight).clone();
    let contribution = conv2d_forward(&constant, &weight, None, next.stride, next.padding)?;
    let (_, c_out, ho, wo) = contribution.dims4(op)?;

    let (_, _, kh, kw) = weight.dims4(op)?;
    let w_mut = g.params.get_mut(next.weight);
    for o in 0..c_out {
        let start = (o * c_in + channel) * kh * kw;
        w_mut.data_mut()[start..start + kh * kw].fill(0.0);
    }

    let plane = ho * wo;
    let uniform = (0..c_out).all(|o| {
        let row = &contribution.data()[o * plane..(o + 1) * plane];
        row.iter().all(|&v| v == row[0])
    });
    if uniform && next.offset.is_none() {
        let bias = g.params.get_mut(next.bias);
        for o in 0..c_out {
            bias.data_mut()[o] += contribution.data()[o * plane];
        }
    } else {
        let map = contribution.reshape(&[c_out, ho, wo])?;
        next.offset = Some(match next.offset.take() {
            Some(prev) => {
                let data = prev.data().iter().zip(map.data()).map(|(a, b)| a + b).collect();
                Tensor::new(&[c_out, ho, wo], data)?
            }
            None => map,
        });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proportion {
    pub channel: usize,
    /// `|gamma_m| / sum_m' |gamma_m'|` per modality.
    pub shares: Vec<f64>,
    /// Every modality's factor is zero; shares are uniform.
    pub degenerate: bool,
}

/// Per-channel share of each modality's scaling-factor magnitude.
pub fn gamma_proportions(gammas: &[&[f64]]) -> Result<Vec<Proportion>> {
    let op = "gamma_proportion_report";
    if gammas.len() < 2 {
        return Err(Error::invalid(op, "need at least two modalities"));
    }
    let c = gammas[0].len();
    if let Some(bad) = gammas.iter().find(|g| g.len() != c) {
        return Err(Error::shape(op, &[c], &[bad.len()]));
    }
    let m = gammas.len();
    Ok((0..c)
        .map(|ch| {
            let total: f64 = gammas.iter().map(|g| g[ch].abs()).sum();
            if total == 0.0 {
                Proportion {
                    channel: ch,
                    shares: vec![1.0 / m as f64; m],
                    degenerate: true,
                }
            } else {
                Proportion {
                    channel: ch,
                    shares: gammas.iter().map(|g| g[ch].abs() / total).collect(),
                    degenerate: false,
                }
            }
        })
        .collect())
}

pub fn gamma_proportion_report(model: &CenModel, layer: usize) -> Result<Vec<Proportion>> {
    if layer >= model.depth() {
        return Err(Error::invalid("gamma_proportion_report", "layer out of range"));
    }
    let gammas: Vec<&[f64]> = (0..model.modalities()).map(|m| model.gammas(layer, m)).collect();
    gamma_proportions(&gammas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(lambda: f64, g: f64) -> AttractionQuery {
        AttractionQuery {
            lambda,
            grad_magnitude: g,
            samples: 100_000,
        }
    }

    /// Simpson integration of the standard normal density over [-r, r].
    fn simpson_mass(r: f64) -> f64 {
        let n = 20_000;
        let h = 2.0 * r / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(-r) + pdf(r);
        for i in 1..n {
            let x = -r + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        s * h / 3.0
    }

    #[test]
    fn theory_cases() {
        assert_eq!(attraction_probability_theory(&q(0.0, 1.0)).unwrap(), 0.0);
        assert!((attraction_probability_theory(&q(1e3, 1.0)).unwrap() - 1.0).abs() < 1e-15);
        let p = attraction_probability_theory(&q(1.0, 1.0)).unwrap();
        assert!((p - 0.682_689_492_137_085_9).abs() < 1e-12);
        for r in [0.1, 0.5, 2.0, 5.0] {
            let p = attraction_probability_theory(&q(r, 1.0)).unwrap();
            assert!((p - simpson_mass(r)).abs() < 1e-10, "r={r}");
        }
        assert!(attraction_probability_theory(&q(1.0, 0.0)).is_err());
    }

    #[test]
    fn empirical_cases() {
        assert_eq!(attraction_probability_empirical(&q(0.0, 1.0), 1).unwrap(), 0.0);
        let p = attraction_probability_empirical(&q(2.0, 2.0), 1).unwrap();
        assert!((p - 0.6827).abs() < 0.02);
        let mut small = q(1.0, 1.0);
        small.samples = 10;
        assert!(attraction_probability_empirical(&small, 1).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]

        #[test]
        fn empirical_within_sampling_band(ratio in 0.05f64..6.0, g in 0.01f64..10.0, seed in 0u64..1000) {
            let q = AttractionQuery { lambda: ratio * g, grad_magnitude: g, samples: 20_000 };
            let p = attraction_probability_theory(&q).unwrap();
            let e = attraction_probability_empirical(&q, seed).unwrap();
            let band = 3.0 * (p * (1.0 - p) / q.samples as f64).sqrt() + 0.01;
            proptest::prop_assert!((p - e).abs() <= band, "p={p} e={e}");
        }
    }

    #[test]
    fn proportion_cases() {
        let p = gamma_proportions(&[&[0.3, 0.0], &[0.3, 0.0]]).unwrap();
        assert_eq!(p[0].shares, vec![0.5, 0.5]);
        assert!(!p[0].degenerate);
        assert!(p[1].degenerate);
        assert_eq!(p[1].shares, vec![0.5, 0.5]);
        let p = gamma_proportions(&[&[0.0], &[-0.7]]).unwrap();
        assert_eq!(p[0].shares, vec![0.0, 1.0]);
        let (a, b, c) = (0.2f64, -0.5f64, 0.9f64);
        let p = gamma_proportions(&[&[a], &[b], &[c]]).unwrap();
        let total = a.abs() + b.abs() + c.abs();
        assert_eq!(p[0].shares, vec![a.abs() / total, b.abs() / total, c.abs() / total]);
        assert!(gamma_proportions(&[&[1.0]]).is_err());
    }
}
