//! 2-D cross-correlation and affine layers.
//!
//! Convolution lowers each batch item to an im2col matrix and runs a dense
//! `f64` GEMM; backward recomputes the columns instead of saving them.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

/// `C (m x n) = A (m x k) * B (k x n) + beta * C`, with optional transposes
/// of the row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (in_channels, height, width) = input;
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid("conv2d", format!("kernel {kernel} is not odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        for extent in [height, width] {
            let span = extent + 2 * padding;
            if span < kernel || !(span - kernel).is_multiple_of(stride) {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "non-integral output extent: ({extent} + 2*{padding} - {kernel}) / {stride}"
                    ),
                ));
            }
        }
        Ok(Self {
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfold one `[C, H, W]` image into `[C*k*k, OH*OW]` columns.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let (h, w, k, s, p) = (self.height, self.width, self.kernel, self.stride, self.padding);
        for c in 0..self.in_channels {
            let plane = &image[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let (h, w, k, s, p) = (self.height, self.width, self.kernel, self.stride, self.padding);
        for c in 0..self.in_channels {
            let plane = &mut image[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Plain-tensor convolution shared by the graph op and model surgery.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape("conv2d", &[cout, cin, kh, kw], weight.shape()));
    }
    if kh != kw {
        return Err(Error::invalid("conv2d", "only square kernels are supported"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", &[cout], b.shape()));
        }
    }
    let geo = ConvGeometry::new((cin, h, w), kh, stride, padding)?;
    let (oh, ow) = geo.out_hw();
    let plane = oh * ow;
    let mut cols = vec![0.0; geo.rows() * plane];
    let mut out = vec![0.0; n * cout * plane];
    for b in 0..n {
        geo.im2col(&input.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
        let dst = &mut out[b * cout * plane..(b + 1) * cout * plane];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(cout, geo.rows(), plane, weight.data(), false, &cols, false, dst, 1.0);
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

struct Conv2dOp {
    geo: ConvGeometry,
    cout: usize,
}

impl Backward for Conv2dOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geo;
        let (input, weight) = (ctx.inputs[0], ctx.inputs[1]);
        let n = input.shape()[0];
        let image = geo.in_channels * geo.height * geo.width;
        let (oh, ow) = geo.out_hw();
        let plane = oh * ow;
        let rows = geo.rows();
        let mut d_input = ctx.needs[0].then(|| vec![0.0; input.numel()]);
        let mut d_weight = ctx.needs[1].then(|| vec![0.0; weight.numel()]);
        let mut cols = vec![0.0; rows * plane];
        for b in 0..n {
            let grad = &ctx.grad[b * self.cout * plane..(b + 1) * self.cout * plane];
            if let Some(dw) = d_weight.as_mut() {
                geo.im2col(&input.data()[b * image..(b + 1) * image], &mut cols);
                gemm(self.cout, plane, rows, grad, false, &cols, true, dw, 1.0);
            }
            if let Some(dx) = d_input.as_mut() {
                gemm(rows, self.cout, plane, weight.data(), true, grad, false, &mut cols, 0.0);
                geo.col2im(&cols, &mut dx[b * image..(b + 1) * image]);
            }
        }
        let mut out = vec![d_input, d_weight];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| {
                let mut db = vec![0.0; self.cout];
                for (i, chunk) in ctx.grad.chunks(plane).enumerate() {
                    db[i % self.cout] += chunk.iter().sum::<f64>();
                }
                db
            }));
        }
        out
    }
}

struct LinearOp;

impl Backward for LinearOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[1];
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; n * d];
            gemm(n, k, d, ctx.grad, false, w.data(), true, &mut dx, 0.0);
            dx
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0; d * k];
            gemm(d, n, k, x.data(), true, ctx.grad, false, &mut dw, 0.0);
            dw
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![0.0; k];
            for row in ctx.grad.chunks(k) {
                db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

impl Graph {
    /// `[N, Cin, H, W] * [Cout, Cin, k, k] + [Cout] -> [N, Cout, H', W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let (_, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, _, k, _) = self.value(weight).dims4("conv2d")?;
        let geo = ConvGeometry::new((cin, h, w), k, stride, padding)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", value, inputs, Conv2dOp { geo, cout })
    }

    /// `[N, D] x [D, K] + [K] -> [N, K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let ([n, d], [wd, k]) = (xs, ws) else {
            return Err(Error::invalid("linear", "expected rank-2 input and weight"));
        };
        let (n, d, k) = (*n, *d, *k);
        if *wd != d {
            return Err(Error::shape("linear", &[d, k], ws));
        }
        if bs != [k] {
            return Err(Error::shape("linear", &[k], bs));
        }
        let mut out = vec![0.0; n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(n, d, k, self.value(x).data(), false, self.value(weight).data(), false, &mut out, 1.0);
        self.push("linear", Tensor::new(&[n, k], out)?, vec![x, weight, bias], LinearOp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, no lowering.
    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, s: usize, p: usize) -> Tensor {
        let (n, cin, h, w) = input.dims4("t").unwrap();
        let (cout, _, k, _) = weight.dims4("t").unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()
                                        [((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * weight.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_1x1_kernel() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y, Tensor::ones(&[1, 1, 3, 3]));
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1)] {
            let fast = conv2d_forward(&x, &w, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let even = Tensor::ones(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &even, None, 1, 0).is_err());
        let w = Tensor::ones(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let w = Tensor::ones(&[1, 2, 3, 3]);
        // (4 + 0 - 3) / 2 is not integral
        assert!(conv2d_forward(&x, &w, None, 2, 0).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let xv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &xv);

        let w0 = g.constant(Tensor::zeros(&[4, 2]));
        let b0 = g.constant(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = g.linear(x, w0, b0).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[1.5, -2.0]);
        }
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let wv = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let bv = Tensor::randn(&[2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xv.clone()), g.constant(wv.clone()), g.constant(bv.clone()));
        let y = g.linear(x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = bv.data()[j];
                for k in 0..4 {
                    acc += xv.data()[i * 4 + k] * wv.data()[k * 2 + j];
                }
                assert!((g.value(y).data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.linear(x, bad, b).is_err());
    }
}
