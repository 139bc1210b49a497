//! Differentiable operations on [`Var`].
//!
//! Shape errors in these primitives are programming errors and panic; model
//! code validates user-facing shapes before calling them.

use crate::autograd::Var;
use crate::conv::{self, ConvSpec, Geom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

/// `(outer, channels, inner)` view of a tensor of rank >= 2.
fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    assert!(
        shape.len() >= 2,
        "channel op needs rank >= 2, got {shape:?}"
    );
    (shape[0], shape[1], shape[2..].iter().product())
}

fn unary<T: Scalar>(
    name: &'static str,
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let value = x.value().map(f);
    Var::from_op(name, value, vec![x.clone()], move |g, p, out| {
        let x = p[0].value();
        let data: Vec<T> = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), data))]
    })
}

#[inline]
fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "add");
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            "add",
            value,
            vec![self.clone(), other.clone()],
            |g, _, _| vec![Some(g.clone()), Some(g.clone())],
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "sub");
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            "sub",
            value,
            vec![self.clone(), other.clone()],
            |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))],
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "mul");
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            "mul",
            value,
            vec![self.clone(), other.clone()],
            |g, p, _| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.zip_map(p[1].value(), |g, b| g * b));
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.zip_map(p[0].value(), |g, a| g * a));
                vec![ga, gb]
            },
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        same_shape(self, other, "div");
        let value = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(
            "div",
            value,
            vec![self.clone(), other.clone()],
            |g, p, out| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.zip_map(p[1].value(), |g, b| g / b));
                let gb = p[1].requires_grad().then(|| {
                    let t = g.zip_map(out, |g, y| g * y);
                    t.zip_map(p[1].value(), |t, b| -t / b)
                });
                vec![ga, gb]
            },
        )
    }

    pub fn scale(&self, s: T) -> Var<T> {
        Var::from_op(
            "scale",
            self.value().scale(s),
            vec![self.clone()],
            move |g, _, _| vec![Some(g.scale(s))],
        )
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        Var::from_op(
            "add_scalar",
            self.value().map(|x| x + s),
            vec![self.clone()],
            |g, _, _| vec![Some(g.clone())],
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let old = self.shape().to_vec();
        Var::from_op(
            "reshape",
            self.value().reshape(shape),
            vec![self.clone()],
            move |g, _, _| vec![Some(g.reshape(&old))],
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        unary(
            "gelu",
            self,
            |x| x * std_normal_cdf(x),
            |x, _| {
                let pdf = (-(x * x) * T::lit(0.5)).exp()
                    * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                std_normal_cdf(x) + x * pdf
            },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        unary(
            "leaky_relu",
            self,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Var<T> {
        unary("tanh", self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary("sigmoid", self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn abs(&self) -> Var<T> {
        unary(
            "abs",
            self,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Var<T> {
        unary("square", self, |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        unary("sqrt", self, |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn exp(&self) -> Var<T> {
        unary("exp", self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        unary("ln", self, |x| x.ln(), |x, _| T::one() / x)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Var<T> {
        unary(
            "softplus",
            self,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(
            "sum",
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))],
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sums over every axis except axis 1; result has shape `[C]`.
    pub fn channel_sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        let x = self.value().data();
        let mut out = vec![T::zero(); c];
        for b in 0..outer {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (b * c + ch) * inner;
                *o += x[base..base + inner].iter().copied().sum::<T>();
            }
        }
        Var::from_op(
            "channel_sum",
            Tensor::from_vec(&[c], out),
            vec![self.clone()],
            move |g, _, _| {
                let gd = g.data();
                let data = (0..outer * c * inner)
                    .map(|i| gd[(i / inner) % c])
                    .collect();
                vec![Some(Tensor::from_vec(&shape, data))]
            },
        )
    }

    /// Sums over axis 1 keeping it with size 1.
    pub fn sum_channels(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        let x = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for b in 0..outer {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for (o, &v) in out[b * inner..(b + 1) * inner]
                    .iter_mut()
                    .zip(&x[base..base + inner])
                {
                    *o += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = 1;
        Var::from_op(
            "sum_channels",
            Tensor::from_vec(&out_shape, out),
            vec![self.clone()],
            move |g, _, _| {
                let gd = g.data();
                let data = (0..outer * c * inner)
                    .map(|i| gd[(i / (c * inner)) * inner + i % inner])
                    .collect();
                vec![Some(Tensor::from_vec(&shape, data))]
            },
        )
    }

    /// Divides each channel vector by its Euclidean norm plus `eps`.
    pub fn normalize_channels(&self, eps: T) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        let x = self.value().data();
        let mut norms = vec![T::zero(); outer * inner];
        for b in 0..outer {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for (n, &v) in norms[b * inner..(b + 1) * inner]
                    .iter_mut()
                    .zip(&x[base..base + inner])
                {
                    *n += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut y = vec![T::zero(); x.len()];
        for (i, v) in y.iter_mut().enumerate() {
            let s = (i / (c * inner)) * inner + i % inner;
            *v = x[i] / (norms[s] + eps);
        }
        Var::from_op(
            "normalize_channels",
            Tensor::from_vec(&shape, y),
            vec![self.clone()],
            move |g, p, _| {
                let x = p[0].value().data();
                let gd = g.data();
                let mut dot = vec![T::zero(); outer * inner];
                for (i, (&gv, &xv)) in gd.iter().zip(x).enumerate() {
                    dot[(i / (c * inner)) * inner + i % inner] += gv * xv;
                }
                let data = (0..x.len())
                    .map(|i| {
                        let s = (i / (c * inner)) * inner + i % inner;
                        let d = norms[s] + eps;
                        let mut v = gd[i] / d;
                        if norms[s] > T::zero() {
                            v -= x[i] * dot[s] / (norms[s] * d * d);
                        }
                        v
                    })
                    .collect();
                vec![Some(Tensor::from_vec(p[0].shape(), data))]
            },
        )
    }

    pub fn softmax_channels(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let y = softmax_data(self.value(), false);
        Var::from_op(
            "softmax_channels",
            Tensor::from_vec(&shape, y),
            vec![self.clone()],
            move |g, _, out| {
                let (outer, c, inner) = channel_view(g.shape());
                let (gd, p) = (g.data(), out.data());
                let mut data = vec![T::zero(); gd.len()];
                for b in 0..outer {
                    for s in 0..inner {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = (b * c + ch) * inner + s;
                            dot += gd[i] * p[i];
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * inner + s;
                            data[i] = p[i] * (gd[i] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(g.shape(), data))]
            },
        )
    }

    pub fn log_softmax_channels(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let y = softmax_data(self.value(), true);
        Var::from_op(
            "log_softmax_channels",
            Tensor::from_vec(&shape, y),
            vec![self.clone()],
            move |g, _, out| {
                let (outer, c, inner) = channel_view(g.shape());
                let (gd, ly) = (g.data(), out.data());
                let mut data = vec![T::zero(); gd.len()];
                for b in 0..outer {
                    for s in 0..inner {
                        let mut total = T::zero();
                        for ch in 0..c {
                            total += gd[(b * c + ch) * inner + s];
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * inner + s;
                            data[i] = gd[i] - ly[i].exp() * total;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(g.shape(), data))]
            },
        )
    }

    /// Per-sample, per-channel standardization over the spatial axes
    /// (biased variance), without affine parameters.
    pub fn instance_norm(&self, eps: T) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        let x = self.value().data();
        let n = T::from_usize(inner).unwrap();
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * c];
        for (k, inv) in inv_std.iter_mut().enumerate() {
            let xs = &x[k * inner..(k + 1) * inner];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            *inv = T::one() / (var + eps).sqrt();
            for (o, &v) in y[k * inner..(k + 1) * inner].iter_mut().zip(xs) {
                *o = (v - mean) * *inv;
            }
        }
        Var::from_op(
            "instance_norm",
            Tensor::from_vec(&shape, y),
            vec![self.clone()],
            move |g, _, out| {
                let (gd, yd) = (g.data(), out.data());
                let mut data = vec![T::zero(); gd.len()];
                for (k, &inv) in inv_std.iter().enumerate() {
                    let r = k * inner..(k + 1) * inner;
                    let (gs, ys) = (&gd[r.clone()], &yd[r.clone()]);
                    let mg = gs.iter().copied().sum::<T>() / n;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gv), &yv) in data[r].iter_mut().zip(gs).zip(ys) {
                        *o = inv * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(Tensor::from_vec(g.shape(), data))]
            },
        )
    }

    /// `x * gamma[c] + beta[c]` with `gamma`, `beta` of shape `[C]`.
    pub fn channel_affine(&self, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        assert_eq!(gamma.shape(), [c], "channel_affine: gamma shape");
        assert_eq!(beta.shape(), [c], "channel_affine: beta shape");
        let (x, gm, bt) = (
            self.value().data(),
            gamma.value().data(),
            beta.value().data(),
        );
        let y = (0..x.len())
            .map(|i| {
                let ch = (i / inner) % c;
                x[i] * gm[ch] + bt[ch]
            })
            .collect();
        Var::from_op(
            "channel_affine",
            Tensor::from_vec(&shape, y),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, p, _| {
                let gd = g.data();
                let x = p[0].value().data();
                let gm = p[1].value().data();
                let dx = p[0].requires_grad().then(|| {
                    Tensor::from_vec(
                        g.shape(),
                        (0..gd.len()).map(|i| gd[i] * gm[(i / inner) % c]).collect(),
                    )
                });
                let (mut dg, mut db) = (vec![T::zero(); c], vec![T::zero(); c]);
                if p[1].requires_grad() || p[2].requires_grad() {
                    for b in 0..outer {
                        for ch in 0..c {
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            dg[ch] += gd[r.clone()]
                                .iter()
                                .zip(&x[r.clone()])
                                .map(|(&a, &b)| a * b)
                                .sum::<T>();
                            db[ch] += gd[r].iter().copied().sum::<T>();
                        }
                    }
                }
                vec![
                    dx,
                    p[1].requires_grad().then(|| Tensor::from_vec(&[c], dg)),
                    p[2].requires_grad().then(|| Tensor::from_vec(&[c], db)),
                ]
            },
        )
    }

    /// 2x2x2 mean pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self) -> Var<T> {
        let [b, c, d, h, w] = self.value().dims5();
        assert!(
            d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even dims, got {:?}",
            self.shape()
        );
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let x = self.value().data();
        let eighth = T::lit(0.125);
        let mut y = vec![T::zero(); b * c * od * oh * ow];
        for bc in 0..b * c {
            for z in 0..d {
                for yy in 0..h {
                    let src = &x[((bc * d + z) * h + yy) * w..][..w];
                    let dst = &mut y[((bc * od + z / 2) * oh + yy / 2) * ow..][..ow];
                    for (xx, &v) in src.iter().enumerate() {
                        dst[xx / 2] += v * eighth;
                    }
                }
            }
        }
        let in_shape = self.shape().to_vec();
        Var::from_op(
            "avg_pool2",
            Tensor::from_vec(&[b, c, od, oh, ow], y),
            vec![self.clone()],
            move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); b * c * d * h * w];
                for bc in 0..b * c {
                    for z in 0..d {
                        for yy in 0..h {
                            let src = &gd[((bc * od + z / 2) * oh + yy / 2) * ow..][..ow];
                            let dst = &mut dx[((bc * d + z) * h + yy) * w..][..w];
                            for (xx, v) in dst.iter_mut().enumerate() {
                                *v = src[xx / 2] * eighth;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, dx))]
            },
        )
    }

    /// Nearest-neighbour upsampling by 2 along every spatial axis.
    pub fn upsample_nearest2(&self) -> Var<T> {
        let [b, c, d, h, w] = self.value().dims5();
        let (od, oh, ow) = (d * 2, h * 2, w * 2);
        let x = self.value().data();
        let mut y = vec![T::zero(); b * c * od * oh * ow];
        for bc in 0..b * c {
            for z in 0..od {
                for yy in 0..oh {
                    let src = &x[((bc * d + z / 2) * h + yy / 2) * w..][..w];
                    let dst = &mut y[((bc * od + z) * oh + yy) * ow..][..ow];
                    for (xx, v) in dst.iter_mut().enumerate() {
                        *v = src[xx / 2];
                    }
                }
            }
        }
        let in_shape = self.shape().to_vec();
        Var::from_op(
            "upsample_nearest2",
            Tensor::from_vec(&[b, c, od, oh, ow], y),
            vec![self.clone()],
            move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); b * c * d * h * w];
                for bc in 0..b * c {
                    for z in 0..od {
                        for yy in 0..oh {
                            let src = &gd[((bc * od + z) * oh + yy) * ow..][..ow];
                            let dst = &mut dx[((bc * d + z / 2) * h + yy / 2) * w..][..w];
                            for (xx, &v) in src.iter().enumerate() {
                                dst[xx / 2] += v;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, dx))]
            },
        )
    }

    /// Repeats a single-channel tensor `r` times along axis 1.
    pub fn repeat_channels(&self, r: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        let (outer, c, inner) = channel_view(&shape);
        assert_eq!(c, 1, "repeat_channels expects one channel");
        let x = self.value().data();
        let mut y = Vec::with_capacity(outer * r * inner);
        for b in 0..outer {
            for _ in 0..r {
                y.extend_from_slice(&x[b * inner..(b + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = r;
        Var::from_op(
            "repeat_channels",
            Tensor::from_vec(&out_shape, y),
            vec![self.clone()],
            move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); outer * inner];
                for b in 0..outer {
                    for k in 0..r {
                        let src = &gd[(b * r + k) * inner..(b * r + k + 1) * inner];
                        for (d, &v) in dx[b * inner..(b + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, dx))]
            },
        )
    }
}

fn softmax_data<T: Scalar>(x: &Tensor<T>, log: bool) -> Vec<T> {
    let (outer, c, inner) = channel_view(x.shape());
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..outer {
        for s in 0..inner {
            let idx = |ch: usize| (b * c + ch) * inner + s;
            let m = (0..c).map(|ch| xd[idx(ch)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..c).map(|ch| (xd[idx(ch)] - m).exp()).sum();
            let lse = m + total.ln();
            for ch in 0..c {
                y[idx(ch)] = if log {
                    xd[idx(ch)] - lse
                } else {
                    (xd[idx(ch)] - m).exp() / total
                };
            }
        }
    }
    y
}

/// Concatenates along axis 1.
pub fn concat_channels<T: Scalar>(parts: &[&Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let first = parts[0].shape();
    let outer = first[0];
    let spatial = first[2..].to_vec();
    let inner: usize = spatial.iter().product();
    let channels: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.shape()[0], outer, "concat: batch mismatch");
            assert_eq!(&p.shape()[2..], &spatial[..], "concat: spatial mismatch");
            p.shape()[1]
        })
        .collect();
    let total_c: usize = channels.iter().sum();
    let mut y = Vec::with_capacity(outer * total_c * inner);
    for b in 0..outer {
        for (p, &c) in parts.iter().zip(&channels) {
            y.extend_from_slice(&p.value().data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = vec![outer, total_c];
    shape.extend_from_slice(&spatial);
    let parent_vars: Vec<Var<T>> = parts.iter().map(|&p| p.clone()).collect();
    Var::from_op(
        "concat_channels",
        Tensor::from_vec(&shape, y),
        parent_vars,
        move |g, p, _| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(p.len());
            for (var, &c) in p.iter().zip(&channels) {
                if var.requires_grad() {
                    let mut d = Vec::with_capacity(outer * c * inner);
                    for b in 0..outer {
                        let start = (b * total_c + offset) * inner;
                        d.extend_from_slice(&gd[start..start + c * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(var.shape(), d)));
                } else {
                    grads.push(None);
                }
                offset += c;
            }
            grads
        },
    )
}

fn bias_fill<T: Scalar>(batch: usize, cout: usize, vol: usize, bias: Option<&Var<T>>) -> Vec<T> {
    let mut y = vec![T::zero(); batch * cout * vol];
    if let Some(b) = bias {
        let bd = b.value().data();
        for (i, chunk) in y.chunks_mut(vol).enumerate() {
            chunk.fill(bd[i % cout]);
        }
    }
    y
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, cout: usize) -> Tensor<T> {
    let [_, _, d, h, w] = g.dims5();
    let vol = d * h * w;
    let mut db = vec![T::zero(); cout];
    for (i, chunk) in g.data().chunks(vol).enumerate() {
        db[i % cout] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[cout], db)
}

/// 3D convolution. `w` has shape `(Cout, Cin / groups, kd, kh, kw)`.
pub fn conv3d<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, spec: ConvSpec) -> Var<T> {
    let [batch, cin, d, h, wd] = x.value().dims5();
    let [cout, cin_g, kd, kh, kw] = w.value().dims5();
    assert_eq!(
        cin_g * spec.groups,
        cin,
        "conv3d: weight expects {} input channels, got {cin}",
        cin_g * spec.groups
    );
    let output = spec
        .output_size([d, h, wd], [kd, kh, kw])
        .unwrap_or_else(|| {
            panic!(
                "conv3d: kernel {:?} larger than padded input {:?}",
                [kd, kh, kw],
                [d, h, wd]
            )
        });
    if let Some(b) = bias {
        assert_eq!(b.shape(), [cout], "conv3d: bias shape");
    }
    let geom = Geom {
        batch,
        cin,
        cout,
        input: [d, h, wd],
        output,
        kernel: [kd, kh, kw],
        stride: spec.stride,
        lo: spec.pad_lo,
        groups: spec.groups,
    };
    let vol = output.iter().product();
    let mut y = bias_fill(batch, cout, vol, bias);
    conv::forward(&geom, x.value().data(), w.value().data(), &mut y);
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    let shape = [batch, cout, output[0], output[1], output[2]];
    Var::from_op(
        "conv3d",
        Tensor::from_vec(&shape, y),
        parents,
        move |g, p, _| {
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); p[0].value().numel()];
                conv::backward_input(&geom, g.data(), p[1].value().data(), &mut dx);
                Tensor::from_vec(p[0].shape(), dx)
            });
            let dw = p[1].requires_grad().then(|| {
                let mut dw = vec![T::zero(); p[1].value().numel()];
                conv::backward_weight(&geom, p[0].value().data(), g.data(), &mut dw);
                Tensor::from_vec(p[1].shape(), dw)
            });
            let mut grads = vec![dx, dw];
            if p.len() > 2 {
                grads.push(p[2].requires_grad().then(|| bias_grad(g, geom.cout)));
            }
            grads
        },
    )
}

/// Transposed 3D convolution (the adjoint of [`conv3d`]).
///
/// `w` has shape `(Cin, Cout / groups, kd, kh, kw)`. Output extent per axis
/// is `(n - 1) * stride - 2 * padding + k + output_padding`.
pub fn conv_transpose3d<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    groups: usize,
) -> Var<T> {
    assert!(
        output_padding <= padding,
        "conv_transpose3d: output_padding must not exceed padding"
    );
    let [batch, cin, d, h, wd] = x.value().dims5();
    let [wc_in, cout_g, kd, kh, kw] = w.value().dims5();
    assert_eq!(
        wc_in, cin,
        "conv_transpose3d: weight expects {wc_in} input channels, got {cin}"
    );
    let cout = cout_g * groups;
    let k = [kd, kh, kw];
    let inp = [d, h, wd];
    let mut big = [0; 3];
    for a in 0..3 {
        let n = (inp[a] - 1) * stride + k[a] + output_padding;
        assert!(n >= 2 * padding, "conv_transpose3d: padding too large");
        big[a] = n - 2 * padding;
    }
    // Geometry of the forward convolution whose adjoint this is: it maps the
    // big (output) grid with `cout` channels to the small grid with `cin`.
    let geom = Geom {
        batch,
        cin: cout,
        cout: cin,
        input: big,
        output: inp,
        kernel: k,
        stride: [stride; 3],
        lo: [padding; 3],
        groups,
    };
    if let Some(b) = bias {
        assert_eq!(b.shape(), [cout], "conv_transpose3d: bias shape");
    }
    let vol = big.iter().product();
    let mut y = bias_fill(batch, cout, vol, bias);
    conv::backward_input(&geom, x.value().data(), w.value().data(), &mut y);
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    let shape = [batch, cout, big[0], big[1], big[2]];
    Var::from_op(
        "conv_transpose3d",
        Tensor::from_vec(&shape, y),
        parents,
        move |g, p, _| {
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); p[0].value().numel()];
                conv::forward(&geom, g.data(), p[1].value().data(), &mut dx);
                Tensor::from_vec(p[0].shape(), dx)
            });
            let dw = p[1].requires_grad().then(|| {
                let mut dw = vec![T::zero(); p[1].value().numel()];
                conv::backward_weight(&geom, g.data(), p[0].value().data(), &mut dw);
                Tensor::from_vec(p[1].shape(), dw)
            });
            let mut grads = vec![dx, dw];
            if p.len() > 2 {
                grads.push(p[2].requires_grad().then(|| bias_grad(g, geom.cin)));
            }
            grads
        },
    )
}
