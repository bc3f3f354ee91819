//! Differentiable building blocks for convolutional networks (NCHW layout).

use std::rc::Rc;

use super::Var;
use crate::tensor::{matmul, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec { stride: 1, padding: 0 };
    pub const DOWN2: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

/// A fixed linear operator on NCHW image batches, with its adjoint.
///
/// Image distortions that are linear in pixel values (blurs, resampling,
/// frequency masking, warps) implement this and get exact gradients.
pub trait LinearImageMap<T: Real> {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T>;
    fn adjoint(&self, g: &Tensor<T>) -> Tensor<T>;
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let (h, w, k, s, p) = (self.height as isize, self.width as isize, self.kernel, self.stride as isize, self.padding as isize);
        let n = self.col_cols();
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ky as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], out: &mut [T]) {
        let (h, w, k, s, p) = (self.height as isize, self.width as isize, self.kernel, self.stride as isize, self.padding as isize);
        let n = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D convolution of `self: [B, C, H, W]` with `weight: [O, C, k, k]` and
    /// an optional `bias: [O]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, spec: Conv2dSpec) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (batch, channels, height, width) = x.dims4();
        let (out_c, in_c, k, k2) = w.dims4();
        assert_eq!(in_c, channels, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let geo = ConvGeometry {
            channels,
            height,
            width,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            out_h: spec.output_size(height, k),
            out_w: spec.output_size(width, k),
        };
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let in_plane = channels * height * width;
        let out_plane = out_c * ncols;
        let mut out = Tensor::zeros(&[batch, out_c, geo.out_h, geo.out_w]);
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
        for b in 0..batch {
            let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
            let ob = &mut out.data_mut()[b * out_plane..(b + 1) * out_plane];
            let cols_ref: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            matmul(out_c, rows, ncols, w.data(), false, cols_ref, false, ob, T::zero());
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            for b in 0..batch {
                for o in 0..out_c {
                    let bo = bv.data()[o];
                    let start = b * out_plane + o * ncols;
                    out.data_mut()[start..start + ncols].iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().op(out, &parents, move |g, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
            let mut dcols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
            for b in 0..batch {
                let gb = &g.data()[b * out_plane..(b + 1) * out_plane];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                    let cols_ref: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        geo.im2col(xb, &mut cols);
                        &cols
                    };
                    matmul(out_c, ncols, rows, gb, false, cols_ref, true, dw.data_mut(), T::one());
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
                    if geo.is_pointwise() {
                        matmul(rows, out_c, ncols, w.data(), true, gb, false, dxb, T::zero());
                    } else {
                        matmul(rows, out_c, ncols, w.data(), true, gb, false, &mut dcols, T::zero());
                        geo.col2im(&dcols, dxb);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = Tensor::zeros(&[out_c]);
                    for b in 0..batch {
                        for o in 0..out_c {
                            let start = b * out_plane + o * ncols;
                            db.data_mut()[o] += g.data()[start..start + ncols].iter().copied().sum::<T>();
                        }
                    }
                    db
                }));
            }
            grads
        })
    }

    /// Affine map of `self: [B, I]` with `weight: [O, I]` and `bias: [O]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.shape().len(), 2, "linear expects [B, I] input, got {:?}", x.shape());
        let (batch, inputs) = (x.shape()[0], x.shape()[1]);
        let outputs = w.shape()[0];
        assert_eq!(w.shape()[1], inputs, "linear input width mismatch");
        let mut out = Tensor::zeros(&[batch, outputs]);
        matmul(batch, inputs, outputs, x.data(), false, w.data(), true, out.data_mut(), T::zero());
        if let Some(bias) = bias {
            let bv = bias.value();
            for row in out.data_mut().chunks_mut(outputs) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().op(out, &parents, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                matmul(batch, outputs, inputs, g.data(), false, w.data(), false, dx.data_mut(), T::zero());
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = Tensor::zeros(w.shape());
                matmul(outputs, batch, inputs, g.data(), true, x.data(), false, dw.data_mut(), T::zero());
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = Tensor::zeros(&[outputs]);
                    for row in g.data().chunks(outputs) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                }));
            }
            grads
        })
    }

    /// Group normalization over `groups` channel groups with a per-channel
    /// affine `gamma`, `beta` (both `[C]`).
    pub fn group_norm(self, groups: usize, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Var<'t, T> {
        let x = self.value();
        let (batch, channels, h, w) = x.dims4();
        assert_eq!(channels % groups, 0, "group_norm: {channels} channels not divisible into {groups} groups");
        let cpg = channels / groups;
        let plane = h * w;
        let group_len = cpg * plane;
        let n = T::lit(group_len as f64);
        let gm = gamma.value();
        let bt = beta.value();
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); batch * groups];
        for bg in 0..batch * groups {
            let src = &x.data()[bg * group_len..(bg + 1) * group_len];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[bg] = istd;
            for (d, &v) in xhat.data_mut()[bg * group_len..(bg + 1) * group_len].iter_mut().zip(src) {
                *d = (v - mean) * istd;
            }
        }
        let mut out = xhat.clone();
        for b in 0..batch {
            for c in 0..channels {
                let (gc, bc) = (gm.data()[c], bt.data()[c]);
                let start = (b * channels + c) * plane;
                out.data_mut()[start..start + plane].iter_mut().for_each(|v| *v = *v * gc + bc);
            }
        }
        self.tape().op(out, &[self, gamma, beta], move |g, needs| {
            let mut dgamma = Tensor::zeros(&[channels]);
            let mut dbeta = Tensor::zeros(&[channels]);
            for b in 0..batch {
                for c in 0..channels {
                    let start = (b * channels + c) * plane;
                    let gs = &g.data()[start..start + plane];
                    let xs = &xhat.data()[start..start + plane];
                    dgamma.data_mut()[c] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                    dbeta.data_mut()[c] += gs.iter().copied().sum::<T>();
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                let mut dxhat = vec![T::zero(); group_len];
                for b in 0..batch {
                    for grp in 0..groups {
                        let bg = b * groups + grp;
                        let base = bg * group_len;
                        for ci in 0..cpg {
                            let gc = gm.data()[grp * cpg + ci];
                            let off = ci * plane;
                            for i in 0..plane {
                                dxhat[off + i] = g.data()[base + off + i] * gc;
                            }
                        }
                        let xs = &xhat.data()[base..base + group_len];
                        let sum_d = dxhat.iter().copied().sum::<T>();
                        let sum_dx = dxhat.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                        let scale = inv_std[bg] / n;
                        for ((d, &dh), &xh) in dx.data_mut()[base..base + group_len].iter_mut().zip(&dxhat).zip(xs) {
                            *d = scale * (n * dh - sum_d - xh * sum_dx);
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        })
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        let (batch, channels, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let data: Vec<T> = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[batch, channels], data);
        self.tape().op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[batch, channels, h, w]);
            for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                chunk.fill(gv * inv);
            }
            vec![Some(dx)]
        })
    }

    /// Multiply each channel of `self: [B, C, H, W]` by `scale: [B, C]`.
    pub fn channel_scale(self, scale: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let s = scale.value();
        let (batch, channels, h, w) = x.dims4();
        assert_eq!(s.shape(), &[batch, channels], "channel_scale shape mismatch");
        let plane = h * w;
        let mut out = (*x).clone();
        for (chunk, &sv) in out.data_mut().chunks_mut(plane).zip(s.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        self.tape().op(out, &[self, scale], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for (chunk, &sv) in dx.data_mut().chunks_mut(plane).zip(s.data()) {
                    chunk.iter_mut().for_each(|v| *v *= sv);
                }
                dx
            });
            let ds = needs[1].then(|| {
                let data: Vec<T> = g
                    .data()
                    .chunks(plane)
                    .zip(x.data().chunks(plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                Tensor::from_vec(&[batch, channels], data)
            });
            vec![dx, ds]
        })
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample_nearest2x(self) -> Var<'t, T> {
        let x = self.value();
        let (batch, channels, h, w) = x.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[batch, channels, oh, ow]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.tape().op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[batch, channels, h, w]);
            for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (batch, ca, h, w) = a.dims4();
        let (bb, cb, hb, wb) = b.dims4();
        assert_eq!((batch, h, w), (bb, hb, wb), "concat_channels shape mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(batch * (pa + pb));
        for i in 0..batch {
            data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::from_vec(&[batch, ca + cb, h, w], data);
        self.tape().op(out, &[self, other], move |g, needs| {
            let mut da = Vec::with_capacity(batch * pa);
            let mut db = Vec::with_capacity(batch * pb);
            for chunk in g.data().chunks(pa + pb) {
                da.extend_from_slice(&chunk[..pa]);
                db.extend_from_slice(&chunk[pa..]);
            }
            vec![
                needs[0].then(|| Tensor::from_vec(&[batch, ca, h, w], da)),
                needs[1].then(|| Tensor::from_vec(&[batch, cb, h, w], db)),
            ]
        })
    }

    /// Apply a fixed linear image operator; the gradient is its adjoint.
    pub fn linear_map(self, map: Rc<dyn LinearImageMap<T>>) -> Var<'t, T> {
        let out = map.apply(&self.value());
        self.tape().op(out, &[self], move |g, _| vec![Some(map.adjoint(g))])
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::*;
    use super::super::Tape;
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: Conv2dSpec) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let (oh, ow) = (spec.output_size(h, k), spec.output_size(wd, k));
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for bi in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (xx * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_forward_matches_naive_loops() {
        let x = random_tensor(&[2, 3, 7, 6], 11);
        for (k, spec) in [(3, Conv2dSpec::SAME), (3, Conv2dSpec::DOWN2), (1, Conv2dSpec::POINTWISE), (5, Conv2dSpec { stride: 1, padding: 2 })] {
            let w = random_tensor(&[4, 3, k, k], 12);
            let b = random_tensor(&[4], 13);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), spec);
            let expected = naive_conv(&x, &w, b.data(), spec);
            assert_eq!(y.shape(), expected.shape());
            for (a, e) in y.value().data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x = random_tensor(&[2, 3, 6, 6], 21);
        let w = random_tensor(&[4, 3, 3, 3], 22);
        let b = random_tensor(&[4], 23);
        for spec in [Conv2dSpec::SAME, Conv2dSpec::DOWN2] {
            let (w1, b1) = (w.clone(), b.clone());
            let e = directional_error(&x, 24, move |t, v| {
                let y = v.conv2d(t.constant(w1.clone()), Some(t.constant(b1.clone())), spec);
                y.mul(y).sum()
            });
            assert!(e < 1e-5, "dx {spec:?}: {e}");
            let (x1, b1) = (x.clone(), b.clone());
            let e = directional_error(&w, 25, move |t, v| {
                let y = t.constant(x1.clone()).conv2d(v, Some(t.constant(b1.clone())), spec);
                y.mul(y).sum()
            });
            assert!(e < 1e-5, "dw {spec:?}: {e}");
            let (x1, w1) = (x.clone(), w.clone());
            let e = directional_error(&b, 26, move |t, v| {
                let y = t.constant(x1.clone()).conv2d(t.constant(w1.clone()), Some(v), spec);
                y.mul(y).sum()
            });
            assert!(e < 1e-5, "db {spec:?}: {e}");
        }
        let w1x1 = random_tensor(&[2, 3, 1, 1], 27);
        let e = directional_error(&x, 28, move |t, v| {
            let y = v.conv2d(t.constant(w1x1.clone()), None, Conv2dSpec::POINTWISE);
            y.mul(y).sum()
        });
        assert!(e < 1e-5, "pointwise dx: {e}");
    }

    #[test]
    fn linear_and_norm_gradients_match_finite_differences() {
        let x = random_tensor(&[3, 5], 31);
        let w = random_tensor(&[4, 5], 32);
        let b = random_tensor(&[4], 33);
        let (w1, b1) = (w.clone(), b.clone());
        let e = directional_error(&x, 34, move |t, v| v.linear(t.constant(w1.clone()), Some(t.constant(b1.clone()))).tanh().sum());
        assert!(e < 1e-5, "linear dx: {e}");
        let x1 = x.clone();
        let e = directional_error(&w, 35, move |t, v| t.constant(x1.clone()).linear(v, None).tanh().sum());
        assert!(e < 1e-5, "linear dw: {e}");

        let img = random_tensor(&[2, 4, 3, 3], 36);
        let gamma = random_tensor(&[4], 37);
        let beta = random_tensor(&[4], 38);
        let probe = random_tensor(&[2, 4, 3, 3], 39);
        let (g1, b1, p1) = (gamma.clone(), beta.clone(), probe.clone());
        let e = directional_error(&img, 40, move |t, v| {
            v.group_norm(2, t.constant(g1.clone()), t.constant(b1.clone()), 1e-5).mul(t.constant(p1.clone())).sum()
        });
        assert!(e < 1e-5, "group_norm dx: {e}");
        let (i1, b1, p1) = (img.clone(), beta.clone(), probe.clone());
        let e = directional_error(&gamma, 41, move |t, v| {
            t.constant(i1.clone()).group_norm(2, v, t.constant(b1.clone()), 1e-5).mul(t.constant(p1.clone())).sum()
        });
        assert!(e < 1e-5, "group_norm dgamma: {e}");
    }

    #[test]
    fn pooling_scaling_resampling_gradients_match_finite_differences() {
        let x = random_tensor(&[2, 3, 4, 4], 51);
        let other = random_tensor(&[2, 2, 8, 8], 52);
        let e = directional_error(&x, 53, |_, v| v.global_avg_pool().tanh().sum());
        assert!(e < 1e-5, "gap: {e}");
        let e = directional_error(&x, 54, |_, v| {
            let s = v.global_avg_pool().sigmoid();
            v.channel_scale(s).tanh().sum()
        });
        assert!(e < 1e-5, "channel_scale: {e}");
        let probe = random_tensor(&[2, 5, 8, 8], 56);
        let e = directional_error(&x, 55, move |t, v| {
            let up = v.upsample_nearest2x();
            up.concat_channels(t.constant(other.clone())).tanh().mul(t.constant(probe.clone())).sum()
        });
        assert!(e < 1e-5, "upsample/concat: {e}");
    }
}
