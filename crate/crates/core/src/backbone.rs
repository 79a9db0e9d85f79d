//! The denoising UNet that plays the pretrained generator.
//!
//! Layout: time embedding, input conv, one encoder level per channel
//! multiplier (residual blocks, then a stride-2 conv except at the lowest
//! resolution), a mid block of two residual blocks, and a mirrored decoder
//! that concatenates each level's skip features before its first residual
//! block and upsamples by nearest neighbour between levels.
//!
//! The single injection port is the mid-block input: conditioning features
//! are added there before the first mid residual block.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::graph::{GradMode, Graph, Var};
use crate::nn::{Conv2d, GroupNorm, ResBlock, TimeEmbedding};
use crate::params::{Initializer, ParamRegistry, ParamStore};
use crate::tensor::{Element, FeatureMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub mid_channels: usize,
    pub num_res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            mid_channels: 128,
            num_res_blocks_per_level: 1,
            time_embed_dim: 128,
            image_size: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("mid_channels", self.mid_channels),
            ("num_res_blocks_per_level", self.num_res_blocks_per_level),
            ("time_embed_dim", self.time_embed_dim),
            ("image_size", self.image_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be positive")));
            }
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config(
                "backbone.channel_multipliers must be a non-empty list of positive integers".into(),
            ));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("backbone.time_embed_dim must be even".into()));
        }
        let factor = 1usize << (self.levels() - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "backbone.image_size {} is not divisible by 2^(levels-1) = {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn port(&self) -> InjectionPort {
        let last = self.levels() - 1;
        InjectionPort {
            site: InjectionPort::SITE,
            channels: self.level_channels(last),
            size: self.level_size(last),
        }
    }
}

/// Where conditioning features enter the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionPort {
    pub site: &'static str,
    pub channels: usize,
    pub size: usize,
}

impl InjectionPort {
    pub const SITE: &'static str = "mid.input";

    pub fn shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.size, self.size]
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<ResBlock>,
    pub down: Option<Conv2d>,
}

/// Time embedding, encoder and mid block: the half of the UNet that a
/// trainable-copy control branch duplicates.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub time: TimeEmbedding,
    pub conv_in: Conv2d,
    pub levels: Vec<EncoderLevel>,
    pub mid: Vec<ResBlock>,
}

/// Intermediate results of [`Trunk::encode`].
pub struct Encoded {
    pub temb: Var,
    pub skips: Vec<Var>,
    /// Mid-block input before any injection.
    pub port: Var,
}

impl Trunk {
    pub fn build(init: &mut Initializer<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let temb = cfg.time_embed_dim;
        let time = TimeEmbedding::build(init, "time", temb, temb)?;
        let conv_in = Conv2d::build(init, "conv_in", cfg.in_channels, cfg.base_channels, 3, 1)?;
        let mut levels = Vec::with_capacity(cfg.levels());
        let mut ch = cfg.base_channels;
        init.push("encoder");
        for level in 0..cfg.levels() {
            let out = cfg.level_channels(level);
            let lv = init.scoped(level.to_string(), |i| -> Result<_> {
                let mut blocks = Vec::new();
                for j in 0..cfg.num_res_blocks_per_level {
                    blocks.push(ResBlock::build(i, &format!("res{j}"), ch, out, Some(temb))?);
                    ch = out;
                }
                let down = (level + 1 < cfg.levels())
                    .then(|| Conv2d::build(i, "down", ch, ch, 3, 2))
                    .transpose()?;
                Ok(EncoderLevel { blocks, down })
            })?;
            levels.push(lv);
        }
        init.pop();
        let mid = init.scoped("mid", |i| -> Result<_> {
            Ok(vec![
                ResBlock::build(i, "res0", ch, cfg.mid_channels, Some(temb))?,
                ResBlock::build(i, "res1", cfg.mid_channels, cfg.mid_channels, Some(temb))?,
            ])
        })?;
        Ok(Trunk {
            time,
            conv_in,
            levels,
            mid,
        })
    }

    /// Runs up to the injection port. `entry` (if any) is added to the
    /// features right after the input convolution.
    pub fn encode<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        t: &[usize],
        entry: Option<Var>,
    ) -> Result<Encoded> {
        let temb = self.time.forward(g, store, t)?;
        let mut h = self.conv_in.forward(g, store, x)?;
        if let Some(e) = entry {
            h = g.add(h, e)?;
        }
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for block in &level.blocks {
                h = block.forward(g, store, h, Some(temb))?;
            }
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.forward(g, store, h)?;
            }
        }
        Ok(Encoded {
            temb,
            skips,
            port: h,
        })
    }

    pub fn mid<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        h: Var,
        temb: Var,
    ) -> Result<Var> {
        let mut h = h;
        for block in &self.mid {
            h = block.forward(g, store, h, Some(temb))?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub trunk: Trunk,
    pub decoder: Vec<Vec<ResBlock>>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
}

/// How conditioning reaches the backbone during one forward pass.
pub enum Conditioning<'h, 'a, T: Element> {
    None,
    /// Features added at the injection port.
    Inject(Var),
    /// Called with the port features; returns the features to add there.
    Hook(&'h mut dyn FnMut(&mut Graph<'a, T>, Var) -> Result<Var>),
    /// Per-level skip residuals plus a mid-block output residual.
    Residuals {
        skips: Vec<Var>,
        mid: Var,
    },
}

/// Outputs of [`Backbone::forward_graph`].
pub struct BackboneOutputs {
    pub output: Var,
    pub port: Var,
    pub injected: Option<Var>,
}

impl Backbone {
    pub fn build(cfg: &BackboneConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(store, seed);
        let trunk = Trunk::build(&mut init, cfg)?;
        let mut ch = cfg.mid_channels;
        let mut decoder = vec![Vec::new(); cfg.levels()];
        init.push("decoder");
        for level in (0..cfg.levels()).rev() {
            let out = cfg.level_channels(level);
            let mut blocks = Vec::new();
            init.scoped(level.to_string(), |i| -> Result<()> {
                for j in 0..cfg.num_res_blocks_per_level {
                    let in_ch = if j == 0 { ch + out } else { out };
                    blocks.push(ResBlock::build(
                        i,
                        &format!("res{j}"),
                        in_ch,
                        out,
                        Some(cfg.time_embed_dim),
                    )?);
                }
                Ok(())
            })?;
            ch = out;
            decoder[level] = blocks;
        }
        init.pop();
        let (out_norm, out_conv) = init.scoped("out", |i| -> Result<_> {
            Ok((
                GroupNorm::build(i, "norm", ch)?,
                Conv2d::build(i, "conv", ch, cfg.in_channels, 3, 1)?,
            ))
        })?;
        Ok(Backbone {
            config: cfg.clone(),
            trunk,
            decoder,
            out_norm,
            out_conv,
        })
    }

    pub fn port(&self) -> InjectionPort {
        self.config.port()
    }

    pub fn check_input<T: Element>(&self, x: &FeatureMap<T>) -> Result<usize> {
        let c = &self.config;
        let dims = x.dims4()?;
        if dims[1] != c.in_channels || dims[2] != c.image_size || dims[3] != c.image_size {
            return Err(Error::shape(
                "backbone input",
                &[dims[0], c.in_channels, c.image_size, c.image_size],
                &dims,
            ));
        }
        Ok(dims[0])
    }

    pub fn forward_graph<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        t: &[usize],
        cond: Conditioning<'_, 'a, T>,
    ) -> Result<BackboneOutputs> {
        let enc = self.trunk.encode(g, store, x, t, None)?;
        let port = enc.port;
        let batch = g.value(x).shape()[0];
        let expected = self.port().shape(batch);
        let mut skips = enc.skips;
        let mut mid_residual = None;
        let injected = match cond {
            Conditioning::None => None,
            Conditioning::Inject(v) => Some(v),
            Conditioning::Hook(f) => Some(f(g, port)?),
            Conditioning::Residuals { skips: res, mid } => {
                if res.len() != skips.len() {
                    return Err(Error::shape("skip residuals", &[skips.len()], &[res.len()]));
                }
                for (level, (s, r)) in skips.iter_mut().zip(res).enumerate() {
                    let want = g.value(*s).shape().to_vec();
                    if g.value(r).shape() != want {
                        return Err(Error::shape(
                            format!("bridge encoder.{level}"),
                            &want,
                            g.value(r).shape(),
                        ));
                    }
                    *s = g.add(*s, r)?;
                }
                mid_residual = Some(mid);
                None
            }
        };
        let mut h = port;
        if let Some(inj) = injected {
            if g.value(inj).shape() != expected {
                return Err(Error::shape(
                    format!("injection at {}", InjectionPort::SITE),
                    &expected,
                    g.value(inj).shape(),
                ));
            }
            h = g.add(h, inj)?;
        }
        h = self.trunk.mid(g, store, h, enc.temb)?;
        if let Some(r) = mid_residual {
            if g.value(r).shape() != g.value(h).shape() {
                return Err(Error::shape(
                    "bridge mid",
                    g.value(h).shape(),
                    g.value(r).shape(),
                ));
            }
            h = g.add(h, r)?;
        }
        for level in (0..self.config.levels()).rev() {
            for (j, block) in self.decoder[level].iter().enumerate() {
                if j == 0 {
                    h = g.concat(h, skips[level])?;
                }
                h = block.forward(g, store, h, Some(enc.temb))?;
            }
            if level > 0 {
                h = g.upsample2x(h)?;
            }
        }
        let h = self.out_norm.forward(g, store, h)?;
        let h = g.silu(h);
        let output = self.out_conv.forward(g, store, h)?;
        Ok(BackboneOutputs {
            output,
            port,
            injected,
        })
    }
}

/// Broadcast a single timestep over the batch, or validate a per-item list.
pub fn expand_timesteps(t: &[usize], batch: usize) -> Result<Vec<usize>> {
    match t.len() {
        1 => Ok(vec![t[0]; batch]),
        n if n == batch => Ok(t.to_vec()),
        n => Err(Error::shape("timesteps", &[batch], &[n])),
    }
}

/// A backbone together with its parameter values.
#[derive(Clone, Debug)]
pub struct BackboneModel<T: Element = f32> {
    pub backbone: Backbone,
    pub params: ParamStore<T>,
}

/// Build a freshly initialized backbone from `cfg`; identical `(cfg, seed)`
/// give bit-identical parameters.
pub fn build_backbone(
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<(BackboneModel, ParamRegistry, InjectionPort)> {
    let mut params = ParamStore::new();
    let backbone = Backbone::build(cfg, &mut params, seed)?;
    let registry = params.registry();
    let port = backbone.port();
    Ok((BackboneModel { backbone, params }, registry, port))
}

impl<T: Element> BackboneModel<T> {
    pub fn cast<U: Element>(&self) -> BackboneModel<U> {
        BackboneModel {
            backbone: self.backbone.clone(),
            params: self.params.cast(),
        }
    }

    pub fn port(&self) -> InjectionPort {
        self.backbone.port()
    }

    /// Evaluate the backbone, adding `injected` at the mid-block input.
    pub fn forward(
        &self,
        x_t: &FeatureMap<T>,
        t: &[usize],
        injected: Option<&FeatureMap<T>>,
    ) -> Result<FeatureMap<T>> {
        let batch = self.backbone.check_input(x_t)?;
        let t = expand_timesteps(t, batch)?;
        let mut g = Graph::new(GradMode::None);
        let x = g.input(x_t.clone());
        let cond = match injected {
            Some(inj) => Conditioning::Inject(g.input(inj.clone())),
            None => Conditioning::None,
        };
        let out = self
            .backbone
            .forward_graph(&mut g, &self.params, x, &t, cond)?;
        Ok(g.value(out.output).clone())
    }

    /// The features arriving at the injection port (before injection).
    pub fn read_mid_features(&self, x_t: &FeatureMap<T>, t: &[usize]) -> Result<FeatureMap<T>> {
        let batch = self.backbone.check_input(x_t)?;
        let t = expand_timesteps(t, batch)?;
        let mut g = Graph::new(GradMode::None);
        let x = g.input(x_t.clone());
        let enc = self
            .backbone
            .trunk
            .encode(&mut g, &self.params, x, &t, None)?;
        Ok(g.value(enc.port).clone())
    }
}

impl<T: Element> Denoiser<T> for BackboneModel<T> {
    fn predict(
        &self,
        x_t: &FeatureMap<T>,
        t: &[usize],
        _control: Option<&FeatureMap<T>>,
    ) -> Result<FeatureMap<T>> {
        self.forward(x_t, t, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            mid_channels: 8,
            num_res_blocks_per_level: 1,
            time_embed_dim: 8,
            image_size: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.image_size = 6;
        c.channel_multipliers = vec![1, 2, 4];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.base_channels = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.channel_multipliers.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn injection_shape_error_names_both_shapes() {
        let (m, _, port) = build_backbone(&tiny_config(), 0).unwrap();
        let x = FeatureMap::zeros([1, 1, 8, 8]);
        let bad = FeatureMap::zeros([1, port.channels + 1, port.size, port.size]);
        let err = m.forward(&x, &[3], Some(&bad)).unwrap_err();
        match err {
            Error::Shape {
                expected, actual, ..
            } => {
                assert_eq!(expected, vec![1, 8, 4, 4]);
                assert_eq!(actual, vec![1, 9, 4, 4]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let (m, _, _) = build_backbone(&tiny_config(), 0).unwrap();
        assert!(m
            .forward(&FeatureMap::zeros([1, 1, 16, 16]), &[1], None)
            .is_err());
        assert!(m
            .forward(&FeatureMap::zeros([2, 1, 8, 8]), &[1, 2, 3], None)
            .is_err());
    }

    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map<T: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap<T> {
        FeatureMap::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
    }

    fn independent_count(
        in_ch: usize,
        base: usize,
        mults: &[usize],
        mid: usize,
        temb: usize,
    ) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let norm = |c: usize| 2 * c;
        let res = |i: usize, o: usize| {
            norm(i)
                + conv(i, o, 3)
                + conv(temb, o, 1)
                + norm(o)
                + conv(o, o, 3)
                + if i != o { conv(i, o, 1) } else { 0 }
        };
        let mut total = 2 * conv(temb, temb, 1) + conv(in_ch, base, 3);
        let mut ch = base;
        for (l, m) in mults.iter().enumerate() {
            total += res(ch, base * m);
            ch = base * m;
            if l + 1 < mults.len() {
                total += conv(ch, ch, 3);
            }
        }
        total += res(ch, mid) + res(mid, mid);
        ch = mid;
        for m in mults.iter().rev() {
            total += res(ch + base * m, base * m);
            ch = base * m;
        }
        total + norm(ch) + conv(ch, in_ch, 3)
    }

    #[test]
    fn registry_total_matches_shape_enumeration() {
        let cfg = BackboneConfig {
            in_channels: 1,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            mid_channels: 16,
            num_res_blocks_per_level: 1,
            time_embed_dim: 32,
            image_size: 16,
        };
        let (_, reg, _) = build_backbone(&cfg, 0).unwrap();
        assert_eq!(reg.total_params(), 29_945);
        assert_eq!(reg.total_params(), independent_count(1, 8, &[1, 2], 16, 32));
        let (_, reg, _) = build_backbone(&BackboneConfig::default(), 0).unwrap();
        assert_eq!(
            reg.total_params(),
            independent_count(1, 32, &[1, 2, 4], 128, 128)
        );
    }

    #[test]
    fn build_is_deterministic() {
        let (a, ra, _) = build_backbone(&tiny_config(), 7).unwrap();
        let (b, rb, _) = build_backbone(&tiny_config(), 7).unwrap();
        let (c, _, _) = build_backbone(&tiny_config(), 8).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(ra, rb);
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn zero_injection_is_neutral_and_forward_is_pure() {
        let (m, _, port) = build_backbone(&tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: FeatureMap = random_map(&mut rng, [2, 1, 8, 8]);
        let plain = m.forward(&x, &[5, 9], None).unwrap();
        let zero = FeatureMap::zeros(port.shape(2));
        let injected = m.forward(&x, &[5, 9], Some(&zero)).unwrap();
        assert_eq!(plain.shape(), x.shape());
        assert!(plain.bit_eq(&injected));
        assert!(plain.bit_eq(&m.forward(&x, &[5, 9], None).unwrap()));
        let mid = m.read_mid_features(&x, &[5, 9]).unwrap();
        assert_eq!(mid.shape(), &port.shape(2));
        assert!(mid.bit_eq(&m.read_mid_features(&x, &[5, 9]).unwrap()));
    }

    #[test]
    fn nonzero_injection_changes_output() {
        let (m, _, port) = build_backbone(&tiny_config(), 1).unwrap();
        let x = FeatureMap::full([1, 1, 8, 8], 0.3f32);
        let inj = FeatureMap::full(port.shape(1), 0.5f32);
        let a = m.forward(&x, &[3], None).unwrap();
        let b = m.forward(&x, &[3], Some(&inj)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let (m, _, _) = build_backbone(&tiny_config(), 3).unwrap();
        let mut model: BackboneModel<f64> = m.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: FeatureMap<f64> = random_map(&mut rng, [2, 1, 8, 8]);
        let target: FeatureMap<f64> = random_map(&mut rng, [2, 1, 8, 8]);
        let t = [4usize, 17];
        let loss = |model: &BackboneModel<f64>| -> f64 {
            let out = model.forward(&x, &t, None).unwrap();
            out.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / out.numel() as f64
        };
        let ids: Vec<_> = model.params.ids().collect();
        let picks: Vec<_> = (0..10)
            .map(|_| {
                let id = ids[rng.gen_range(0..ids.len())];
                (id, rng.gen_range(0..model.params.value(id).numel()))
            })
            .collect();
        let analytic: Vec<f64> = {
            let mut g = Graph::new(GradMode::All);
            let xv = g.input(x.clone());
            let out = model
                .backbone
                .forward_graph(&mut g, &model.params, xv, &t, Conditioning::None)
                .unwrap();
            let l = g
                .weighted_mse(out.output, target.clone(), vec![1.0; 2])
                .unwrap();
            let grads = g.backward(l).unwrap();
            picks
                .iter()
                .map(|&(id, k)| {
                    g.param_grad(&grads, &model.params, id)
                        .map_or(0.0, |gr| gr.data()[k])
                })
                .collect()
        };
        let h = 1e-4;
        for (&(id, k), a) in picks.iter().zip(analytic) {
            let orig = model.params.value(id).data()[k];
            model.params.value_mut(id).data_mut()[k] = orig + h;
            let up = loss(&model);
            model.params.value_mut(id).data_mut()[k] = orig - h;
            let down = loss(&model);
            model.params.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            let name = &model.params.entry(id).name;
            assert!(
                (a - numeric).abs() <= 1e-3 * scale + 1e-10,
                "{name}[{k}]: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn every_parameter_influences_the_output() {
        let (m, _, _) = build_backbone(&tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: FeatureMap = random_map(&mut rng, [1, 1, 8, 8]);
        let base = m.forward(&x, &[20], None).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            let mut p = m.clone();
            for v in p.params.value_mut(id).data_mut() {
                *v += rng.gen_range(0.05..0.2);
            }
            let out = p.forward(&x, &[20], None).unwrap();
            assert!(
                out.max_abs_diff(&base) > 0.0,
                "{} has no effect",
                m.params.entry(id).name
            );
        }
    }

    #[test]
    fn port_features_of_identity_encoder_are_the_embedded_input() {
        let cfg = BackboneConfig {
            in_channels: 1,
            base_channels: 2,
            channel_multipliers: vec![1],
            mid_channels: 2,
            num_res_blocks_per_level: 1,
            time_embed_dim: 4,
            image_size: 4,
        };
        let (mut m, _, port) = build_backbone(&cfg, 0).unwrap();
        assert_eq!((port.channels, port.size), (2, 4));
        // Centre-tap input kernel with per-channel gain and bias.
        let mut w = Tensor::zeros([2, 1, 3, 3]);
        w.data_mut()[4] = 2.0;
        w.data_mut()[9 + 4] = -1.0;
        m.params.set("conv_in.weight", w).unwrap();
        m.params
            .set("conv_in.bias", Tensor::new([2], vec![0.5, 0.25]).unwrap())
            .unwrap();
        // Residual block reduced to its identity shortcut.
        m.params
            .set(
                "encoder.0.res0.out.conv.weight",
                Tensor::zeros([2, 2, 3, 3]),
            )
            .unwrap();
        m.params
            .set("encoder.0.res0.out.conv.bias", Tensor::zeros([2]))
            .unwrap();
        let x = FeatureMap::from_fn([1, 1, 4, 4], |i| i as f32 / 8.0 - 1.0);
        let mid = m.read_mid_features(&x, &[9]).unwrap();
        for (i, &xv) in x.data().iter().enumerate() {
            assert_eq!(mid.data()[i], 2.0 * xv + 0.5);
            assert_eq!(mid.data()[16 + i], -xv + 0.25);
        }
    }
}
