//! Model assembly: per-modality convolutional streams with shared or private
//! weights, private normalization, channel exchange or a fusion baseline,
//! and a softmax-weighted ensemble of the stream outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exchange::{exchange_forward, widen_inputs, ExchangePlan, ExchangeReport, LayerExchange};
use crate::fusion::{
    attention_fusion, average_fusion, concat_fusion, discard_channels, random_exchange,
    AttentionBlock, ConcatBlock, DEFAULT_ATTENTION_REDUCTION,
};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::loss::mmd_bandwidths;
use crate::norm::{sparsity_penalty, NormMode, NormState};
use crate::tensor::Tensor;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(
                        stringify!($name),
                        format!("unknown value '{s}', expected one of: {}", [$($text),+].join(", ")),
                    )),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    /// One set of conv weights for every stream, private normalization.
    SharedConvPrivateNorm,
    /// Every stream owns its convolutions, normalization and head.
    Unshared,
    /// Convolutions and normalization both shared.
    FullyShared,
}

named_enum!(Sharing {
    SharedConvPrivateNorm => "shared_conv_private_norm",
    Unshared => "unshared",
    FullyShared => "fully_shared",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Cen,
    Unimodal,
    Concat,
    Average,
    Align,
    Attention,
    RandomExchange,
    Discard,
}

named_enum!(FusionKind {
    Cen => "cen",
    Unimodal => "unimodal",
    Concat => "concat",
    Average => "average",
    Align => "align",
    Attention => "attention",
    RandomExchange => "random_exchange",
    Discard => "discard",
});

impl FusionKind {
    /// Kinds driven by the per-layer exchange plan.
    pub fn uses_plan(self) -> bool {
        matches!(self, FusionKind::Cen | FusionKind::RandomExchange | FusionKind::Discard)
    }

    /// Kinds that act at a fusion stage.
    pub fn staged(self) -> bool {
        matches!(
            self,
            FusionKind::Concat | FusionKind::Average | FusionKind::Align | FusionKind::Attention
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Early,
    Middle,
    Late,
    All,
}

named_enum!(Stage {
    Early => "early",
    Middle => "middle",
    Late => "late",
    All => "all",
});

impl Stage {
    /// Encoder layer indices for an encoder of the given depth.
    pub fn layers(self, depth: usize) -> Vec<usize> {
        if depth == 0 {
            return Vec::new();
        }
        match self {
            Stage::Early => vec![0],
            Stage::Middle => vec![(depth - 1) / 2],
            Stage::Late => vec![depth - 1],
            Stage::All => (0..depth).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    pub stage: Stage,
    /// Fraction of each sub-part swapped by `random_exchange`.
    pub random_fraction: f64,
    pub attention_reduction: usize,
    /// Weight of the MMD term for `align`.
    pub align_weight: f64,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            stage: Stage::Late,
            random_fraction: 0.0,
            attention_reduction: DEFAULT_ATTENTION_REDUCTION,
            align_weight: 0.1,
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Average-pooling factor applied after the convolution (1 = none).
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub out_channels: usize,
    pub norm: NormMode,
}

impl Arch {
    /// `depth` 3x3 layers of `width` channels; the first one is followed by
    /// 2x2 average pooling and the head upsamples back.
    pub fn segmentation(in_channels: usize, classes: usize, depth: usize, width: usize) -> Self {
        let layers = (0..depth)
            .map(|l| LayerSpec {
                channels: width,
                kernel: 3,
                stride: 1,
                pool: if l == 0 { 2 } else { 1 },
            })
            .collect();
        Self {
            in_channels,
            layers,
            out_channels: classes,
            norm: NormMode::Batch,
        }
    }

    /// Full-resolution 3x3 stack with instance normalization.
    pub fn translation(in_channels: usize, out_channels: usize, depth: usize, width: usize) -> Self {
        let layers = (0..depth)
            .map(|_| LayerSpec {
                channels: width,
                kernel: 3,
                stride: 1,
                pool: 1,
            })
            .collect();
        Self {
            in_channels,
            layers,
            out_channels,
            norm: NormMode::Instance,
        }
    }

    pub fn upsample_factor(&self) -> usize {
        self.layers.iter().map(|l| l.stride * l.pool).product()
    }

    /// Spatial extent after each encoder layer for an `h x w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut h, mut w) = (h, w);
        for spec in &self.layers {
            let pad = spec.kernel / 2;
            let step = |x: usize| -> Result<usize> {
                let span = x + 2 * pad;
                if span < spec.kernel || !(span - spec.kernel).is_multiple_of(spec.stride) {
                    return Err(Error::invalid("arch", format!("extent {x} does not fit stride {}", spec.stride)));
                }
                Ok((span - spec.kernel) / spec.stride + 1)
            };
            h = step(h)?;
            w = step(w)?;
            if spec.pool == 0 || h % spec.pool != 0 || w % spec.pool != 0 {
                return Err(Error::invalid("arch", format!("{h}x{w} not divisible by pool {}", spec.pool)));
            }
            h /= spec.pool;
            w /= spec.pool;
            out.push((h, w));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modalities: usize,
    pub arch: Arch,
    pub sharing: Sharing,
    pub strategy: FusionStrategy,
    pub theta: f64,
    pub compare_abs: bool,
    /// Every channel is penalized and exchangeable (instead of the
    /// modality's own sub-part).
    pub all_channel: bool,
    pub exchange_enabled: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(modalities: usize, arch: Arch) -> Self {
        Self {
            modalities,
            arch,
            sharing: Sharing::SharedConvPrivateNorm,
            strategy: FusionStrategy::new(FusionKind::Cen),
            theta: 2e-2,
            compare_abs: true,
            all_channel: false,
            exchange_enabled: true,
            seed: 0,
        }
    }
}

/// Convolution with bias plus an optional constant output map.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    /// `[Cout, H', W']` added after the convolution.
    pub offset: Option<Tensor>,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        (cin, cout, kernel, stride): (usize, usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        Self {
            weight: store.add(format!("{prefix}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding: kernel / 2,
            offset: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, Some(b), self.stride, self.padding)?;
        match &self.offset {
            Some(map) => g.add_map(y, map),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FusionBlock {
    Concat(ConcatBlock),
    Attention(AttentionBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardOutput {
    /// Per-stream predictions at input resolution.
    pub streams: Vec<Var>,
    pub ensemble: Var,
    /// `softmax(ensemble_logits)`.
    pub alpha: Var,
    pub report: ExchangeReport,
    /// Normalization outputs before exchange, `[layer][stream]`.
    pub normalized: Vec<Vec<Var>>,
    /// Post-activation (and post-fusion) features, `[layer][stream]`.
    pub features: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub enum Target {
    Labels(Vec<usize>),
    Dense(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLoss {
    CrossEntropy,
    Mse,
    Mae,
}

named_enum!(TaskLoss {
    CrossEntropy => "cross_entropy",
    Mse => "mse",
    Mae => "mae",
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub task: TaskLoss,
    pub lambda: f64,
    /// Weight of the mean per-stream task loss added to the ensemble loss.
    pub stream_weight: f64,
}

pub struct LossParts {
    pub total: Var,
    pub task: f64,
    pub penalty: f64,
    pub align: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub total: usize,
    pub conv: usize,
    pub norm: usize,
    pub head: usize,
    pub fusion: usize,
    pub ensemble: usize,
}

#[derive(Debug, Clone)]
pub struct CenModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// `[layer][stream]`; shared modes repeat the same parameter ids.
    pub convs: Vec<Vec<ConvLayer>>,
    /// `[layer][slot]`, see `norm_slot`.
    pub norms: Vec<Vec<NormState>>,
    /// Which norm slot each stream reads.
    pub norm_slot: Vec<usize>,
    pub heads: Vec<ConvLayer>,
    pub plans: Vec<ExchangePlan>,
    pub ensemble_logits: ParamId,
    pub fusion: BTreeMap<usize, FusionBlock>,
    steps: u64,
}

impl CenModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        let m = config.modalities;
        let arch = &config.arch;
        let kind = config.strategy.kind;
        if m == 0 {
            return Err(Error::invalid("build_cen", "need at least one modality"));
        }
        if kind == FusionKind::Unimodal && m != 1 {
            return Err(Error::invalid("build_cen", "unimodal strategy takes exactly one modality"));
        }
        if arch.layers.is_empty() {
            return Err(Error::invalid("build_cen", "encoder needs at least one layer"));
        }
        if kind.uses_plan() && config.exchange_enabled && !config.all_channel {
            if let Some(bad) = arch.layers.iter().find(|l| l.channels % m != 0) {
                return Err(Error::invalid(
                    "build_cen",
                    format!("width {} not divisible by {m} modalities", bad.channels),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let conv_copies = if config.sharing == Sharing::Unshared { m } else { 1 };
        let norm_copies = if config.sharing == Sharing::FullyShared { 1 } else { m };
        let suffix = |copies: usize, s: usize| if copies > 1 { format!(".m{s}") } else { String::new() };

        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut plans = Vec::new();
        let mut cin = arch.in_channels;
        for (l, spec) in arch.layers.iter().enumerate() {
            let c = spec.channels;
            let copies: Vec<ConvLayer> = (0..conv_copies)
                .map(|s| {
                    let prefix = format!("encoder.{l}.conv{}", suffix(conv_copies, s));
                    ConvLayer::new(&mut params, &prefix, (cin, c, spec.kernel, spec.stride), &mut rng)
                })
                .collect();
            convs.push((0..m).map(|s| copies[s % conv_copies].clone()).collect());

            let subparts = if config.all_channel || c % m != 0 {
                vec![0..c; m]
            } else {
                crate::exchange::partition_channels(c, m)?
            };
            let mut layer_norms = Vec::with_capacity(norm_copies);
            for s in 0..norm_copies {
                let mut mask = vec![false; c];
                let owned: Vec<usize> = if norm_copies == 1 { (0..m).collect() } else { vec![s] };
                for &o in &owned {
                    subparts[o].clone().for_each(|ch| mask[ch] = true);
                }
                let prefix = format!("encoder.{l}.norm{}", suffix(norm_copies, s));
                layer_norms.push(NormState::new(&mut params, &prefix, c, arch.norm, mask)?);
            }
            norms.push(layer_norms);

            let mut plan = if config.all_channel || c % m != 0 {
                ExchangePlan::all_channel(c, m, config.theta)?
            } else {
                ExchangePlan::half_channel(c, m, config.theta)?
            };
            plan.compare_abs = config.compare_abs;
            plan.enabled = config.exchange_enabled && kind.uses_plan();
            plans.push(plan);
            cin = c;
        }

        let heads_owned: Vec<ConvLayer> = (0..conv_copies)
            .map(|s| {
                let prefix = format!("head.conv{}", suffix(conv_copies, s));
                ConvLayer::new(&mut params, &prefix, (cin, arch.out_channels, 1, 1), &mut rng)
            })
            .collect();
        let heads = (0..m).map(|s| heads_owned[s % conv_copies].clone()).collect();
        let ensemble_logits = params.add("ensemble.logits", Tensor::zeros(&[m]));

        let mut fusion = BTreeMap::new();
        if kind.staged() {
            for l in config.strategy.stage.layers(arch.layers.len()) {
                let c = arch.layers[l].channels;
                let prefix = format!("fusion.{l}");
                match kind {
                    FusionKind::Concat => {
                        fusion.insert(l, FusionBlock::Concat(ConcatBlock::new(&mut params, &prefix, c, m)));
                    }
                    FusionKind::Attention => {
                        let block = AttentionBlock::new(
                            &mut params,
                            &prefix,
                            c,
                            m,
                            config.strategy.attention_reduction,
                            &mut rng,
                        )?;
                        fusion.insert(l, FusionBlock::Attention(block));
                    }
                    _ => {}
                }
            }
        }

        Ok(Self {
            norm_slot: (0..m).map(|s| s % norm_copies).collect(),
            config,
            params,
            convs,
            norms,
            heads,
            plans,
            ensemble_logits,
            fusion,
            steps: 0,
        })
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    /// Normalization state read by `stream` at `layer`.
    pub fn norm(&self, layer: usize, stream: usize) -> &NormState {
        &self.norms[layer][self.norm_slot[stream]]
    }

    pub fn gammas(&self, layer: usize, stream: usize) -> &[f64] {
        self.norm(layer, stream).gammas(&self.params)
    }

    /// Distinct normalization states.
    pub fn norm_states(&self) -> Vec<&NormState> {
        self.norms.iter().flatten().collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        crate::ops::softmax(self.params.get(self.ensemble_logits).data())
    }

    /// Number of training-mode forward passes so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_theta(&mut self, theta: f64) -> Result<()> {
        if !(theta > 0.0) {
            return Err(Error::invalid("exchange_plan", format!("theta must be > 0, got {theta}")));
        }
        self.config.theta = theta;
        self.plans.iter_mut().for_each(|p| p.theta = theta);
        Ok(())
    }

    pub fn set_exchange_enabled(&mut self, enabled: bool) {
        self.config.exchange_enabled = enabled;
        let on = enabled && self.config.strategy.kind.uses_plan();
        self.plans.iter_mut().for_each(|p| p.enabled = on);
    }

    /// Run every stream; inputs are `[N, C_m, H, W]`, one per modality.
    pub fn forward(&mut self, g: &mut Graph, inputs: &[Tensor], mode: Mode) -> Result<ForwardOutput> {
        let m = self.modalities();
        if inputs.len() != m {
            return Err(Error::shape("forward_cen", &[m], &[inputs.len()]));
        }
        let widened = widen_inputs(inputs)?;
        let cin = widened[0].dims4("forward_cen")?.1;
        if cin != self.config.arch.in_channels {
            return Err(Error::shape("forward_cen", &[self.config.arch.in_channels], &[cin]));
        }
        let mut xs: Vec<Var> = widened.into_iter().map(|t| g.constant(t)).collect();
        let strategy = self.config.strategy.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(match mode {
            Mode::Train => self.steps,
            Mode::Eval => u64::MAX,
        });
        let staged: Vec<usize> = if strategy.kind.staged() {
            strategy.stage.layers(self.depth())
        } else {
            Vec::new()
        };

        let mut report = ExchangeReport::default();
        let mut normalized = Vec::with_capacity(self.depth());
        let mut features = Vec::with_capacity(self.depth());
        for l in 0..self.depth() {
            let mut normed = Vec::with_capacity(m);
            for s in 0..m {
                let mut h = self.convs[l][s].forward(g, &self.params, xs[s])?;
                if self.config.arch.layers[l].pool > 1 {
                    h = g.avg_pool(h, self.config.arch.layers[l].pool)?;
                }
                let state = &mut self.norms[l][self.norm_slot[s]];
                let y = match mode {
                    Mode::Train => state.forward_train(g, &self.params, h)?.y,
                    Mode::Eval => state.forward_eval(g, &self.params, h)?,
                };
                normed.push(y);
            }
            let gammas: Vec<&[f64]> = (0..m).map(|s| self.gammas(l, s)).collect();
            let plan = &self.plans[l];
            let (mixed, exchanged) = match strategy.kind {
                FusionKind::Cen => exchange_forward(g, l, &normed, &gammas, plan)?,
                FusionKind::RandomExchange => {
                    random_exchange(g, l, &normed, plan, strategy.random_fraction, &mut rng)?
                }
                FusionKind::Discard if plan.enabled => discard_channels(g, l, &normed, &gammas, plan)?,
                _ => {
                    let c = g.value(normed[0]).dims4("forward_cen")?.1;
                    (normed.clone(), LayerExchange::from_masks(l, &vec![vec![false; c]; m]))
                }
            };
            let mut acts = mixed.iter().map(|&v| g.relu(v)).collect::<Result<Vec<_>>>()?;
            if staged.contains(&l) {
                let fused = match (strategy.kind, self.fusion.get(&l)) {
                    (_, Some(FusionBlock::Concat(block))) => Some(concat_fusion(g, &self.params, block, &acts)?),
                    (_, Some(FusionBlock::Attention(block))) => {
                        Some(attention_fusion(g, &self.params, block, &acts)?)
                    }
                    (FusionKind::Average, None) => Some(average_fusion(g, &acts)?),
                    _ => None,
                };
                if let Some(f) = fused {
                    acts = vec![f; m];
                }
            }
            xs.clone_from(&acts);
            report.layers.push(exchanged);
            normalized.push(normed);
            features.push(acts);
        }

        let factor = self.config.arch.upsample_factor();
        let mut streams = Vec::with_capacity(m);
        for s in 0..m {
            let y = self.heads[s].forward(g, &self.params, xs[s])?;
            streams.push(if factor > 1 { g.upsample_nearest(y, factor)? } else { y });
        }
        let logits = g.param(&self.params, self.ensemble_logits);
        let alpha = g.softmax(logits)?;
        let ensemble = g.weighted_sum(alpha, &streams)?;
        if mode == Mode::Train {
            self.steps += 1;
        }
        Ok(ForwardOutput {
            streams,
            ensemble,
            alpha,
            report,
            normalized,
            features,
        })
    }

    /// Task loss on the ensemble (plus optional mean stream loss), the
    /// masked l1 penalty, and the MMD term for `align`.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardOutput,
        target: &Target,
        cfg: &LossConfig,
    ) -> Result<LossParts> {
        let task_ens = task_loss(g, out.ensemble, target, cfg.task)?;
        let mut task = task_ens;
        if cfg.stream_weight > 0.0 && out.streams.len() > 1 {
            let per: Vec<Var> = out
                .streams
                .iter()
                .map(|&s| task_loss(g, s, target, cfg.task))
                .collect::<Result<_>>()?;
            let sum = g.add_all(&per)?;
            let mean = g.scale(sum, cfg.stream_weight / per.len() as f64)?;
            task = g.add(task, mean)?;
        }
        let penalty = sparsity_penalty(g, &self.params, &self.norm_states(), cfg.lambda)?;
        let mut total = g.add(task, penalty)?;
        let mut align = 0.0;
        let strategy = &self.config.strategy;
        if strategy.kind == FusionKind::Align && self.modalities() > 1 {
            let mut terms = Vec::new();
            for l in strategy.stage.layers(self.depth()) {
                let flat: Vec<Var> = out.features[l]
                    .iter()
                    .map(|&f| g.flatten(f))
                    .collect::<Result<_>>()?;
                for a in 0..flat.len() {
                    for b in a + 1..flat.len() {
                        let bw = mmd_bandwidths(g.value(flat[a]), g.value(flat[b]));
                        terms.push(g.mmd(flat[a], flat[b], Some(&bw))?);
                    }
                }
            }
            if !terms.is_empty() {
                let sum = g.add_all(&terms)?;
                let weighted = g.scale(sum, strategy.align_weight)?;
                align = g.value(weighted).item();
                total = g.add(total, weighted)?;
            }
        }
        Ok(LossParts {
            total,
            task: g.value(task_ens).item(),
            penalty: g.value(penalty).item(),
            align,
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for (_, p) in self.params.iter() {
            let n = p.value.numel();
            counts.total += n;
            let bucket = if p.name.starts_with("fusion.") {
                &mut counts.fusion
            } else if p.name.starts_with("head.") {
                &mut counts.head
            } else if p.name.starts_with("ensemble.") {
                &mut counts.ensemble
            } else if p.name.contains(".norm") {
                &mut counts.norm
            } else {
                &mut counts.conv
            };
            *bucket += n;
        }
        counts
    }

    /// Parameters plus normalization buffers as named tensors.
    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        for state in self.norm_states() {
            let prefix = norm_prefix(&self.params, state);
            let c = state.channels();
            let mask = state.sparsity_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            for (key, data) in [
                ("running_mean", state.running_mean.clone()),
                ("running_var", state.running_var.clone()),
                ("mask", mask),
            ] {
                let t = Tensor::new(&[c], data).expect("channel-length buffer");
                out.push((format!("{prefix}.{key}"), t));
            }
        }
        out
    }

    /// Inverse of [`CenModel::state_entries`] for a model of identical
    /// configuration.
    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let fetch = |key: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry '{key}'")))?;
            if t.shape() != shape {
                return Err(Error::shape("load_state", shape, t.shape()));
            }
            Ok((*t).clone())
        };
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = fetch(&name, &shape)?;
        }
        let prefixes: Vec<Vec<String>> = self
            .norms
            .iter()
            .map(|layer| layer.iter().map(|s| norm_prefix(&self.params, s)).collect())
            .collect();
        for (layer, names) in self.norms.iter_mut().zip(prefixes) {
            for (state, prefix) in layer.iter_mut().zip(names) {
                let c = [state.channels()];
                state.running_mean = fetch(&format!("{prefix}.running_mean"), &c)?.into_data();
                state.running_var = fetch(&format!("{prefix}.running_var"), &c)?.into_data();
                state.sparsity_mask = fetch(&format!("{prefix}.mask"), &c)?
                    .data()
                    .iter()
                    .map(|&v| v != 0.0)
                    .collect();
            }
        }
        Ok(())
    }
}

fn norm_prefix(store: &ParamStore, state: &NormState) -> String {
    let name = store.name(state.gamma);
    name.strip_suffix(".gamma").unwrap_or(name).to_string()
}

pub fn task_loss(g: &mut Graph, pred: Var, target: &Target, kind: TaskLoss) -> Result<Var> {
    match (kind, target) {
        (TaskLoss::CrossEntropy, Target::Labels(labels)) => g.softmax_cross_entropy(pred, labels),
        (TaskLoss::Mse, Target::Dense(t)) => {
            let t = g.constant(t.clone());
            g.mse_loss(pred, t)
        }
        (TaskLoss::Mae, Target::Dense(t)) => {
            let t = g.constant(t.clone());
            g.mae_loss(pred, t)
        }
        _ => Err(Error::invalid("cen_loss", format!("target kind does not fit {kind} loss"))),
    }
}
