//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`], so building a graph never copies
//! weights. Whether a parameter receives a gradient is decided by the
//! [`GradMode`] and the store's trainable flags; nodes that depend on no
//! gradient-carrying leaf are skipped entirely during backward.

pub(crate) mod kernels;

use std::borrow::Cow;
use std::collections::HashMap;

use kernels::{ConvGeom, GroupStats};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// No parameter receives a gradient (inference).
    None,
    /// Parameters flagged trainable in their store receive gradients.
    Trainable,
    /// Every parameter receives a gradient.
    All,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Silu(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    ScaleAdd {
        x: Var,
        scale: Vec<T>,
    },
    WeightedMse {
        x: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    CrossNorm {
        xc: Var,
        xm: Var,
        gamma: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Element = f32> {
    nodes: Vec<Node<'a, T>>,
    bindings: HashMap<(usize, ParamId), Var>,
    mode: GradMode,
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn store_key<T>(store: &ParamStore<T>) -> usize {
    store as *const ParamStore<T> as usize
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new(mode: GradMode) -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A free leaf that always receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated binds of the same parameter share a node.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let key = (store_key(store), id);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let rg = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => store.is_trainable(id),
            GradMode::All => true,
        };
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Leaf, rg);
        self.bindings.insert(key, v);
        v
    }

    /// The node bound to a parameter, if the forward pass used it.
    pub fn param_var(&self, store: &ParamStore<T>, id: ParamId) -> Option<Var> {
        self.bindings.get(&(store_key(store), id)).copied()
    }

    /// Gradient of a stored parameter, if it was bound and received one.
    pub fn param_grad<'g>(
        &self,
        grads: &'g Gradients<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Option<&'g Tensor<T>> {
        self.param_var(store, id).and_then(|v| grads.get(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims4(&self, v: Var, ctx: &str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| Error::shape(ctx, &[0, 0, 0, 0], self.value(v).shape()))
    }

    /// 2-D convolution with square kernel; weight is `(out, in, k, k)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.dims4(x, "conv2d input")?;
        let wshape = self.value(w).shape().to_vec();
        let (out_ch, k) = match wshape[..] {
            [o, i, kh, kw] if i == dims[1] && kh == kw => (o, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d weight",
                    &[wshape.first().copied().unwrap_or(0), dims[1], 3, 3],
                    &wshape,
                ))
            }
        };
        if let Some(b) = b {
            self.value(b).expect_shape(&[out_ch], "conv2d bias")?;
        }
        let geom = ConvGeom::new(dims, out_ch, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d geometry", &[k, k], &dims[2..]))?;
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let y = Tensor::new(vec![geom.batch, out_ch, geom.oh, geom.ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push_op(y, Op::Add(a, b), &[a, b]))
    }

    /// `x + v` with `v` of shape `(b, c, 1, 1)` broadcast over space.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(x, "add_channel input")?;
        self.value(v)
            .expect_shape(&[b, c, 1, 1], "add_channel vector")?;
        let hw = h * w;
        let vv = self.value(v).data();
        let mut y = self.value(x).clone();
        for (k, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            for o in chunk {
                *o = *o + vv[k];
            }
        }
        Ok(self.push_op(y, Op::AddChannel { x, v }, &[x, v]))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let dims = self.dims4(x, "group_norm input")?;
        if groups == 0 || dims[1] % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                dims[1]
            )));
        }
        self.value(scale)
            .expect_shape(&[dims[1]], "group_norm scale")?;
        self.value(shift)
            .expect_shape(&[dims[1]], "group_norm shift")?;
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(scale).data(),
            self.value(shift).data(),
            T::from_f64_lossy(eps),
        );
        let y = Tensor::new(dims.to_vec(), y)?;
        Ok(self.push_op(
            y,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            },
            &[x, scale, shift],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push_op(y, Op::Silu(x), &[x])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4(x, "upsample input")?;
        let y = kernels::upsample2x(self.value(x).data(), dims);
        let y = Tensor::new(vec![dims[0], dims[1], 2 * dims[2], 2 * dims[3]], y)?;
        Ok(self.push_op(y, Op::Upsample2x(x), &[x]))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.dims4(a, "concat lhs")?;
        let db = self.dims4(b, "concat rhs")?;
        if db[0] != n || db[2] != h || db[3] != w {
            return Err(Error::shape("concat", &[n, db[1], h, w], &db));
        }
        let cb = db[1];
        let hw = h * w;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            y.extend_from_slice(&va[i * ca * hw..(i + 1) * ca * hw]);
            y.extend_from_slice(&vb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], y)?;
        Ok(self.push_op(y, Op::Concat(a, b), &[a, b]))
    }

    /// Per-sample affine map `y[b] = scale[b] * x[b] + offset[b]` with a
    /// constant offset.
    pub fn scale_add(&mut self, x: Var, scale: Vec<T>, offset: &Tensor<T>) -> Result<Var> {
        let xs = self.value(x);
        offset.expect_shape(xs.shape(), "scale_add offset")?;
        if scale.len() != xs.shape()[0] {
            return Err(Error::shape(
                "scale_add scale",
                &[xs.shape()[0]],
                &[scale.len()],
            ));
        }
        let per = xs.numel() / scale.len();
        let mut y = offset.clone();
        for (i, (o, &v)) in y.data_mut().iter_mut().zip(xs.data()).enumerate() {
            *o = scale[i / per] * v + *o;
        }
        Ok(self.push_op(y, Op::ScaleAdd { x, scale }, &[x]))
    }

    /// `mean_b( weight[b] * mean_i (x[b,i] - target[b,i])^2 )`, shape `[1]`.
    #[allow(clippy::needless_range_loop)]
    pub fn weighted_mse(&mut self, x: Var, target: Tensor<T>, weights: Vec<T>) -> Result<Var> {
        let xs = self.value(x);
        target.expect_shape(xs.shape(), "mse target")?;
        let batch = xs.shape()[0];
        if weights.len() != batch {
            return Err(Error::shape("mse weights", &[batch], &[weights.len()]));
        }
        let per = xs.numel() / batch;
        let mut total = 0.0f64;
        for b in 0..batch {
            let sq: f64 = xs
                .item(b)
                .iter()
                .zip(target.item(b))
                .map(|(&p, &q)| {
                    let d = (p - q).to_f64().unwrap();
                    d * d
                })
                .sum();
            total += weights[b].to_f64().unwrap() * sq / per as f64;
        }
        let y = Tensor::new(vec![1], vec![T::from_f64_lossy(total / batch as f64)])?;
        Ok(self.push_op(y, Op::WeightedMse { x, target, weights }, &[x]))
    }

    /// `gamma * (xc - mean(xm)) / sqrt(var(xm) + eps)`, statistics per sample
    /// and channel over the spatial positions of `xm`.
    pub fn cross_norm(&mut self, xc: Var, xm: Var, gamma: Var, eps: f64) -> Result<Var> {
        let dc = self.dims4(xc, "cross_norm control features")?;
        let dm = self.dims4(xm, "cross_norm main features")?;
        if dc[0] != dm[0] || dc[1] != dm[1] {
            return Err(Error::shape(
                "cross_norm channels",
                &[dm[0], dm[1]],
                &[dc[0], dc[1]],
            ));
        }
        self.value(gamma)
            .expect_shape(&[dc[1]], "cross_norm gamma")?;
        let (mean64, inv_std64) = kernels::channel_stats(self.value(xm).data(), dm, eps);
        if mean64.iter().chain(&inv_std64).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_norm statistics".into()));
        }
        let hw = dc[2] * dc[3];
        let g = self.value(gamma).data();
        let mut y = self.value(xc).clone();
        for (k, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let s = g[k % dc[1]].to_f64().unwrap() * inv_std64[k];
            for v in chunk {
                *v = T::from_f64_lossy((v.to_f64().unwrap() - mean64[k]) * s);
            }
        }
        let mean = mean64.into_iter().map(T::from_f64_lossy).collect();
        let inv_std = inv_std64.into_iter().map(T::from_f64_lossy).collect();
        Ok(self.push_op(
            y,
            Op::CrossNorm {
                xc,
                xm,
                gamma,
                mean,
                inv_std,
            },
            &[xc, xm, gamma],
        ))
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node<'a, T>,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.wants(*x) {
                    let dx = kernels::conv2d_backward_data(geom, gy.data(), self.value(*w).data());
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?)?;
                }
                let want_w = self.wants(*w);
                let want_b = b.is_some_and(|b| self.wants(b));
                if want_w || want_b {
                    let mut dw = vec![T::zero(); self.value(*w).numel()];
                    let mut db = vec![T::zero(); geom.out_ch];
                    kernels::conv2d_backward_params(
                        geom,
                        self.value(*x).data(),
                        gy.data(),
                        &mut dw,
                        want_b.then_some(&mut db[..]),
                    );
                    if want_w {
                        accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?)?;
                    }
                    if let (true, Some(b)) = (want_b, b) {
                        accumulate(grads, *b, Tensor::new(vec![geom.out_ch], db)?)?;
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gy)?;
                }
            }
            Op::AddChannel { x, v } => {
                if self.wants(*v) {
                    let vshape = self.value(*v).shape().to_vec();
                    let hw = gy.numel() / vshape.iter().product::<usize>();
                    let dv: Vec<T> = gy
                        .data()
                        .chunks(hw)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    accumulate(grads, *v, Tensor::new(vshape, dv)?)?;
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gy)?;
                }
            }
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            } => {
                let dims = self.value(*x).dims4()?;
                let c = dims[1];
                let mut dscale = self.wants(*scale).then(|| vec![T::zero(); c]);
                let mut dshift = self.wants(*shift).then(|| vec![T::zero(); c]);
                let dx = kernels::group_norm_backward(
                    self.value(*x).data(),
                    gy.data(),
                    dims,
                    *groups,
                    self.value(*scale).data(),
                    stats,
                    self.wants(*x),
                    dscale.as_deref_mut(),
                    dshift.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?)?;
                }
                if let Some(d) = dscale {
                    accumulate(grads, *scale, Tensor::new(vec![c], d)?)?;
                }
                if let Some(d) = dshift {
                    accumulate(grads, *shift, Tensor::new(vec![c], d)?)?;
                }
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(&gy, |v, g| {
                    let s = kernels::sigmoid(v);
                    g * s * (T::one() + v * (T::one() - s))
                })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Upsample2x(x) => {
                let dims = self.value(*x).dims4()?;
                let dx = kernels::upsample2x_backward(gy.data(), dims);
                accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?)?;
            }
            Op::Concat(a, b) => {
                let da = self.value(*a).dims4()?;
                let db = self.value(*b).dims4()?;
                let hw = da[2] * da[3];
                let (ca, cb) = (da[1] * hw, db[1] * hw);
                let mut ga = Vec::with_capacity(da[0] * ca);
                let mut gb = Vec::with_capacity(da[0] * cb);
                for chunk in gy.data().chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(da.to_vec(), ga)?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(db.to_vec(), gb)?)?;
                }
            }
            Op::ScaleAdd { x, scale } => {
                let per = gy.numel() / scale.len();
                let mut dx = gy;
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    *v = *v * scale[i / per];
                }
                accumulate(grads, *x, dx)?;
            }
            Op::WeightedMse { x, target, weights } => {
                let xs = self.value(*x);
                let batch = weights.len();
                let per = xs.numel() / batch;
                let g0 = gy.data()[0];
                let two = T::from_f64_lossy(2.0);
                let denom = T::from_usize(per * batch).unwrap();
                let mut dx = xs.clone();
                for (i, (d, &t)) in dx.data_mut().iter_mut().zip(target.data()).enumerate() {
                    *d = g0 * two * weights[i / per] * (*d - t) / denom;
                }
                accumulate(grads, *x, dx)?;
            }
            Op::CrossNorm {
                xc,
                xm,
                gamma,
                mean,
                inv_std,
            } => {
                let dc = self.value(*xc).dims4()?;
                let dm = self.value(*xm).dims4()?;
                let c = dc[1];
                let (hwc, hwm) = (dc[2] * dc[3], dm[2] * dm[3]);
                let g = self.value(*gamma).data();
                let xcv = self.value(*xc).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dxc = vec![T::zero(); xcv.len()];
                let mut dxm = vec![T::zero(); dm.iter().product()];
                let xmv = self.value(*xm).data();
                let n = T::from_usize(hwm).unwrap();
                for k in 0..dc[0] * c {
                    let ch = k % c;
                    let (mu, is) = (mean[k], inv_std[k]);
                    let mut sum_g = T::zero();
                    let mut sum_gz = T::zero();
                    for i in k * hwc..(k + 1) * hwc {
                        let z = xcv[i] - mu;
                        sum_g = sum_g + gy.data()[i];
                        sum_gz = sum_gz + gy.data()[i] * z;
                        dxc[i] = gy.data()[i] * g[ch] * is;
                    }
                    dgamma[ch] = dgamma[ch] + sum_gz * is;
                    // d/dmu and d/dvar of the output, pushed through the
                    // biased estimator of xm's statistics.
                    let dmu = -g[ch] * is * sum_g;
                    let dvar = -g[ch] * sum_gz * is * is * is / T::from_f64_lossy(2.0);
                    for i in k * hwm..(k + 1) * hwm {
                        dxm[i] = dmu / n + dvar * T::from_f64_lossy(2.0) * (xmv[i] - mu) / n;
                    }
                }
                if self.wants(*xc) {
                    accumulate(grads, *xc, Tensor::new(dc.to_vec(), dxc)?)?;
                }
                if self.wants(*xm) {
                    accumulate(grads, *xm, Tensor::new(dm.to_vec(), dxm)?)?;
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => {
            acc.expect_shape(g.shape(), "gradient accumulation")?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
