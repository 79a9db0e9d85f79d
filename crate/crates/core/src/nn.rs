//! Layer building blocks shared by the backbone and the control modules.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] that is
//! passed to `forward`. The same layer therefore evaluates in any element
//! type the store is cast to.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Square-kernel convolution with "same" padding (`k / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn build(
        init: &mut Initializer<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Conv2d {
                weight: i.normal("weight", &[out_ch, in_ch, k, k], in_ch * k * k)?,
                bias: Some(i.constant("bias", &[out_ch], 0.0)?),
                in_ch,
                out_ch,
                k,
                stride,
            })
        })
    }

    /// A 1x1 convolution whose weight and bias start at exactly zero.
    pub fn zeroed(
        init: &mut Initializer<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Conv2d {
                weight: i.constant("weight", &[out_ch, in_ch, 1, 1], 0.0)?,
                bias: Some(i.constant("bias", &[out_ch], 0.0)?),
                in_ch,
                out_ch,
                k: 1,
                stride: 1,
            })
        })
    }

    pub fn forward<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.k / 2)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }
}

/// Number of normalization groups used for a channel count.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build(init: &mut Initializer<'_>, name: &str, channels: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(GroupNorm {
                scale: i.constant("scale", &[channels], 1.0)?,
                shift: i.constant("shift", &[channels], 0.0)?,
                groups: norm_groups(channels),
            })
        })
    }

    pub fn forward<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = g.param(store, self.scale);
        let t = g.param(store, self.shift);
        g.group_norm(x, s, t, self.groups, NORM_EPS)
    }
}

/// Pre-activation residual block: norm, SiLU, conv, (+ time projection),
/// norm, SiLU, conv, plus a 1x1 shortcut when channel counts differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub in_norm: GroupNorm,
    pub in_conv: Conv2d,
    pub temb: Option<Conv2d>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn build(
        init: &mut Initializer<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        temb_dim: Option<usize>,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            let (in_norm, in_conv) = i.scoped("in", |i| -> Result<_> {
                Ok((
                    GroupNorm::build(i, "norm", in_ch)?,
                    Conv2d::build(i, "conv", in_ch, out_ch, 3, 1)?,
                ))
            })?;
            let temb = temb_dim
                .map(|d| Conv2d::build(i, "temb", d, out_ch, 1, 1))
                .transpose()?;
            let (out_norm, out_conv) = i.scoped("out", |i| -> Result<_> {
                Ok((
                    GroupNorm::build(i, "norm", out_ch)?,
                    Conv2d::build(i, "conv", out_ch, out_ch, 3, 1)?,
                ))
            })?;
            let skip = (in_ch != out_ch)
                .then(|| Conv2d::build(i, "skip", in_ch, out_ch, 1, 1))
                .transpose()?;
            Ok(ResBlock {
                in_norm,
                in_conv,
                temb,
                out_norm,
                out_conv,
                skip,
            })
        })
    }

    /// `temb` is the already-activated `(b, d, 1, 1)` time embedding.
    pub fn forward<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        temb: Option<Var>,
    ) -> Result<Var> {
        let h = self.in_norm.forward(g, store, x)?;
        let h = g.silu(h);
        let mut h = self.in_conv.forward(g, store, h)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let v = proj.forward(g, store, t)?;
            h = g.add_channel(h, v)?;
        }
        let h = self.out_norm.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.out_conv.forward(g, store, h)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(h, shortcut)
    }
}

/// Sinusoidal timestep features followed by a two-layer projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub freq_dim: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl TimeEmbedding {
    pub fn build(
        init: &mut Initializer<'_>,
        name: &str,
        freq_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(TimeEmbedding {
                freq_dim,
                fc1: Conv2d::build(i, "fc1", freq_dim, dim, 1, 1)?,
                fc2: Conv2d::build(i, "fc2", dim, dim, 1, 1)?,
            })
        })
    }

    /// Returns `silu(fc2(silu(fc1(sin(t)))))`, ready for residual blocks.
    pub fn forward<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        t: &[usize],
    ) -> Result<Var> {
        let feats = g.input(sinusoidal(t, self.freq_dim));
        let h = self.fc1.forward(g, store, feats)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.silu(h))
    }
}

/// `(b, dim, 1, 1)` features `[sin(t * f_k), cos(t * f_k)]` with
/// geometrically spaced frequencies `f_k = 10000^(-k / half)`.
pub fn sinusoidal<T: Element>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![t.len(), dim, 1, 1], |i| {
        let (b, k) = (i / dim, i % dim);
        if k >= 2 * half {
            return T::zero();
        }
        let freq = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let arg = t[b] as f64 * freq;
        T::from_f64_lossy(if k < half { arg.sin() } else { arg.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradMode;

    #[test]
    fn zeroed_conv_outputs_exact_zeros() {
        let mut store = ParamStore::new();
        let z = Conv2d::zeroed(&mut Initializer::new(&mut store, 0), "z", 3, 2).unwrap();
        let mut g = Graph::new(GradMode::None);
        let x = g.input(Tensor::from_fn([1, 3, 2, 2], |i| i as f32 - 5.0));
        let y = z.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resblock_param_names() {
        let mut store = ParamStore::new();
        ResBlock::build(&mut Initializer::new(&mut store, 0), "blk", 4, 8, Some(16)).unwrap();
        let names: Vec<_> = store.registry().names().map(str::to_string).collect();
        assert_eq!(
            names,
            [
                "blk.in.norm.scale",
                "blk.in.norm.shift",
                "blk.in.conv.weight",
                "blk.in.conv.bias",
                "blk.temb.weight",
                "blk.temb.bias",
                "blk.out.norm.scale",
                "blk.out.norm.shift",
                "blk.out.conv.weight",
                "blk.out.conv.bias",
                "blk.skip.weight",
                "blk.skip.bias",
            ]
        );
    }

    #[test]
    fn sinusoidal_at_zero_is_sin0_cos0() {
        let e: Tensor<f64> = sinusoidal(&[0], 6);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
