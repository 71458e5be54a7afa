//! Elementwise, reduction and channel-layout ops.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn need(ctx: &BackwardCtx<'_>, i: usize, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    ctx.needs[i].then(f)
}

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![
            need(ctx, 0, || ctx.grad.to_vec()),
            need(ctx, 1, || ctx.grad.to_vec()),
        ]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![
            need(ctx, 0, || ctx.grad.to_vec()),
            need(ctx, 1, || ctx.grad.iter().map(|g| -g).collect()),
        ]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            need(ctx, 0, || ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect()),
            need(ctx, 1, || ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect()),
        ]
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![need(ctx, 0, || ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

struct SumOp {
    scale: f64,
}
impl Backward for SumOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let n = ctx.inputs[0].numel();
        vec![need(ctx, 0, || vec![ctx.grad[0] * self.scale; n])]
    }
}

struct ReluOp;
impl Backward for ReluOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        vec![need(ctx, 0, || {
            ctx.grad
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect()
        })]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let y = ctx.output.data();
        vec![need(ctx, 0, || {
            ctx.grad
                .iter()
                .zip(y)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect()
        })]
    }
}

struct PassThrough;
impl Backward for PassThrough {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![need(ctx, 0, || ctx.grad.to_vec())]
    }
}

struct ConcatOp {
    channels: Vec<usize>,
    n: usize,
    hw: usize,
}
impl Backward for ConcatOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            out.push(need(ctx, i, || {
                let mut g = Vec::with_capacity(self.n * c * self.hw);
                for b in 0..self.n {
                    let start = (b * total + offset) * self.hw;
                    g.extend_from_slice(&ctx.grad[start..start + c * self.hw]);
                }
                g
            }));
            offset += c;
        }
        out
    }
}

struct ChannelMaskOp {
    keep: Vec<bool>,
    hw: usize,
}
impl Backward for ChannelMaskOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![need(ctx, 0, || {
            let mut g = ctx.grad.to_vec();
            apply_channel_mask(&mut g, &self.keep, self.hw);
            g
        })]
    }
}

fn apply_channel_mask(data: &mut [f64], keep: &[bool], hw: usize) {
    let c = keep.len();
    for (i, chunk) in data.chunks_mut(hw).enumerate() {
        if !keep[i % c] {
            chunk.fill(0.0);
        }
    }
}

struct UpsampleOp {
    factor: usize,
    h: usize,
    w: usize,
}
impl Backward for UpsampleOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (f, h, w) = (self.factor, self.h, self.w);
        vec![need(ctx, 0, || {
            let planes = ctx.inputs[0].numel() / (h * w);
            let mut g = vec![0.0; ctx.inputs[0].numel()];
            for p in 0..planes {
                let src = &ctx.grad[p * h * w * f * f..(p + 1) * h * w * f * f];
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..h * f {
                    for x in 0..w * f {
                        dst[(y / f) * w + x / f] += src[y * w * f + x];
                    }
                }
            }
            g
        })]
    }
}

struct AvgPoolOp {
    factor: usize,
    h: usize,
    w: usize,
}
impl Backward for AvgPoolOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (f, h, w) = (self.factor, self.h, self.w);
        let (ho, wo) = (h / f, w / f);
        let scale = 1.0 / (f * f) as f64;
        vec![need(ctx, 0, || {
            let planes = ctx.inputs[0].numel() / (h * w);
            let mut g = vec![0.0; ctx.inputs[0].numel()];
            for p in 0..planes {
                let src = &ctx.grad[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(y / f) * wo + x / f] * scale;
                    }
                }
            }
            g
        })]
    }
}

struct WeightedSumOp;
impl Backward for WeightedSumOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let weights = ctx.inputs[0].data();
        let mut out = Vec::with_capacity(ctx.inputs.len());
        out.push(need(ctx, 0, || {
            ctx.inputs[1..]
                .iter()
                .map(|t| t.data().iter().zip(ctx.grad).map(|(x, g)| x * g).sum())
                .collect()
        }));
        for (m, &w) in weights.iter().enumerate() {
            out.push(need(ctx, m + 1, || ctx.grad.iter().map(|g| g * w).collect()));
        }
        out
    }
}

struct SoftmaxOp;
impl Backward for SoftmaxOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let p = ctx.output.data();
        let dot: f64 = p.iter().zip(ctx.grad).map(|(p, g)| p * g).sum();
        vec![need(ctx, 0, || {
            p.iter().zip(ctx.grad).map(|(p, g)| p * (g - dot)).collect()
        })]
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(&shape, data)?, vec![a, b], AddOp)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push("sub", Tensor::new(&shape, data)?, vec![a, b], SubOp)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(&shape, data)?, vec![a, b], MulOp)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, vec![a], ScaleOp(factor))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), vec![a], SumOp { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let total: f64 = self.value(a).data().iter().sum();
        let scale = 1.0 / n as f64;
        self.push("mean", Tensor::scalar(total * scale), vec![a], SumOp { scale })
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, vec![a], ReluOp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", value, vec![a], SigmoidOp)
    }

    /// Reshape without copying semantics; gradients pass straight through.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, vec![a], PassThrough)
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = *shape
            .first()
            .ok_or_else(|| Error::invalid("flatten", "scalar input"))?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Adds a constant `[C, H, W]` map to every batch item of `[N, C, H, W]`.
    pub fn add_map(&mut self, x: Var, map: &Tensor) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4("add_map")?;
        if map.shape() != [c, h, w] {
            return Err(Error::shape("add_map", &[c, h, w], map.shape()));
        }
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(c * h * w) {
            chunk.iter_mut().zip(map.data()).for_each(|(v, m)| *v += m);
        }
        self.push("add_map", value, vec![x], PassThrough)
    }

    /// Stack `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(items.len());
        for &v in items {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("concat_channels", &[n, vc, h, w], self.shape(v)));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&v, &c) in items.iter().zip(&channels) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data)?;
        self.push("concat_channels", value, items.to_vec(), ConcatOp { channels, n, hw })
    }

    /// Zero every channel whose `keep` flag is false.
    pub fn channel_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4("channel_mask")?;
        if keep.len() != c {
            return Err(Error::shape("channel_mask", &[c], &[keep.len()]));
        }
        let mut value = self.value(x).clone();
        apply_channel_mask(value.data_mut(), keep, h * w);
        let op = ChannelMaskOp {
            keep: keep.to_vec(),
            hw: h * w,
        };
        self.push("channel_mask", value, vec![x], op)
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let src = self.value(x).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    data.push(plane[(y / factor) * w + xx / factor]);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        self.push("upsample_nearest", value, vec![x], UpsampleOp { factor, h, w })
    }

    /// Non-overlapping `factor x factor` mean pooling of `[N, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(
                "avg_pool",
                format!("{h}x{w} not divisible by pooling factor {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    out[(y / factor) * wo + xx / factor] += plane[y * w + xx] * scale;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], data)?;
        self.push("avg_pool", value, vec![x], AvgPoolOp { factor, h, w })
    }

    /// `sum_m weights[m] * items[m]` with a differentiable weight vector.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if self.shape(weights) != [items.len()] {
            return Err(Error::shape("weighted_sum", &[items.len()], self.shape(weights)));
        }
        let first = *items
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for (m, &v) in items.iter().enumerate() {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(v)));
            }
            let w = self.value(weights).data()[m];
            data.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(acc, x)| *acc += w * x);
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(items);
        self.push("weighted_sum", Tensor::new(&shape, data)?, inputs, WeightedSumOp)
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        if self.value(logits).ndim() != 1 {
            return Err(Error::invalid("softmax", "expected a rank-1 tensor"));
        }
        let p = softmax(self.value(logits).data());
        let n = p.len();
        self.push("softmax", Tensor::new(&[n], p)?, vec![logits], SoftmaxOp)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}
