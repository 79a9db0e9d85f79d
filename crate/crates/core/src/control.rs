//! Conditioning architectures for a frozen backbone.
//!
//! * [`ControlNetBranch`]: a trainable copy of the backbone's time embedding,
//!   encoder and mid block. The control map enters through a small hint
//!   encoder and the branch feeds back through 1x1 zero-initialized bridges
//!   at every encoder level and after the mid block.
//! * [`ControlExtractor`] + [`CrossNormState`]: a few residual blocks map the
//!   control to the injection-port shape; the result is normalized with the
//!   statistics of the backbone's own port features and added there.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    expand_timesteps, BackboneConfig, BackboneModel, BackboneOutputs, Conditioning, InjectionPort,
    Trunk,
};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::graph::{GradMode, Graph, Var};
use crate::nn::{Conv2d, ResBlock};
use crate::params::{Initializer, ParamId, ParamRegistry, ParamStore};
use crate::tensor::{Element, FeatureMap, Tensor};

pub const CROSS_NORM_EPS: f64 = 1e-5;
pub const CROSS_NORM_GAMMA: &str = "control.cross_norm.gamma";

/// Learnable per-channel scale and stability constant of cross normalization.
#[derive(Clone, Debug)]
pub struct CrossNormState<T: Element = f32> {
    pub params: ParamStore<T>,
    pub gamma: ParamId,
    pub epsilon: f64,
}

impl CrossNormState<f32> {
    /// `gamma` initialized to ones, `epsilon = 1e-5`.
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_gamma(Tensor::full([channels], 1.0), CROSS_NORM_EPS)
    }
}

impl<T: Element> CrossNormState<T> {
    /// `epsilon` may be zero for exact arithmetic; statistics that end up
    /// non-finite are reported by [`cross_normalize`].
    pub fn with_gamma(gamma: Tensor<T>, epsilon: f64) -> Result<Self> {
        if gamma.rank() != 1 || gamma.numel() == 0 {
            return Err(Error::shape(
                "cross_norm gamma",
                &[gamma.numel().max(1)],
                gamma.shape(),
            ));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "cross_norm epsilon {epsilon} must be finite and >= 0"
            )));
        }
        let mut params = ParamStore::new();
        let gamma = params.add(CROSS_NORM_GAMMA, gamma)?;
        Ok(CrossNormState {
            params,
            gamma,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.params.value(self.gamma).numel()
    }

    pub fn gamma(&self) -> &Tensor<T> {
        self.params.value(self.gamma)
    }

    pub fn gamma_mut(&mut self) -> &mut Tensor<T> {
        self.params.value_mut(self.gamma)
    }

    pub fn cast<U: Element>(&self) -> CrossNormState<U> {
        CrossNormState {
            params: self.params.cast(),
            gamma: self.gamma,
            epsilon: self.epsilon,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, xc: Var, xm: Var) -> Result<Var> {
        let gamma = g.param(&self.params, self.gamma);
        g.cross_norm(xc, xm, gamma, self.epsilon)
    }
}

/// `gamma * (x_c - mean(x_m)) / sqrt(var(x_m) + eps)` with biased statistics
/// per sample and channel over the spatial positions of `x_m`.
pub fn cross_normalize<T: Element>(
    x_c: &FeatureMap<T>,
    x_m: &FeatureMap<T>,
    state: &CrossNormState<T>,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new(GradMode::None);
    let xc = g.input(x_c.clone());
    let xm = g.input(x_m.clone());
    let y = state.forward(&mut g, xc, xm)?;
    Ok(g.value(y).clone())
}

/// A standalone 1x1 convolution that starts at exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroConv<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ZeroConv<T> {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        ZeroConv {
            weight: Tensor::zeros([out_channels, in_channels, 1, 1]),
            bias: Tensor::zeros([out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn zero_conv_forward<T: Element>(z: &ZeroConv<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let dims = x.dims4()?;
    if dims[1] != z.in_channels() {
        return Err(Error::shape(
            "zero conv input channels",
            &[z.in_channels()],
            &[dims[1]],
        ));
    }
    let mut g = Graph::new(GradMode::None);
    let xv = g.input(x.clone());
    let w = g.input(z.weight.clone());
    let b = g.input(z.bias.clone());
    let y = g.conv2d(xv, w, Some(b), 1, 0)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlNetBranchConfig {
    /// Channels of the control map.
    pub control_channels: usize,
    /// Width of the hint encoder that embeds the control map.
    pub hint_channels: usize,
}

impl Default for ControlNetBranchConfig {
    fn default() -> Self {
        ControlNetBranchConfig {
            control_channels: 1,
            hint_channels: 16,
        }
    }
}

impl ControlNetBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.control_channels == 0 || self.hint_channels == 0 {
            return Err(Error::Config(
                "controlnet channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Names of the zero-conv bridges: one per encoder level, then the mid block.
    pub fn bridge_points(backbone: &BackboneConfig) -> Vec<String> {
        (0..backbone.levels())
            .map(|l| format!("encoder.{l}"))
            .chain(std::iter::once("mid".to_string()))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct HintEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    zero: Conv2d,
}

impl HintEncoder {
    fn forward<'a, T: Element>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        c: Var,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, store, c)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = g.silu(h);
        self.zero.forward(g, store, h)
    }
}

/// Trainable copy of the backbone's encoder half, bridged back through zero convs.
#[derive(Clone, Debug)]
pub struct ControlNetBranch<T: Element = f32> {
    pub config: ControlNetBranchConfig,
    pub backbone_config: BackboneConfig,
    trunk: Trunk,
    hint: HintEncoder,
    bridges: Vec<Conv2d>,
    mid_bridge: Conv2d,
    pub params: ParamStore<T>,
}

pub const CONTROLNET_BRANCH_PREFIX: &str = "control.branch.";

/// Build the branch with its trunk copied from `backbone` and every bridge
/// (and the hint encoder's output layer) set to zero.
pub fn build_controlnet_branch(
    backbone: &BackboneModel,
    cfg: &ControlNetBranchConfig,
    seed: u64,
) -> Result<(ControlNetBranch, ParamRegistry)> {
    cfg.validate()?;
    let bcfg = &backbone.backbone.config;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(&mut params, seed);
    init.push("control");
    let trunk = init.scoped("branch", |i| Trunk::build(i, bcfg))?;
    let hint = init.scoped("hint", |i| -> Result<_> {
        Ok(HintEncoder {
            conv1: Conv2d::build(i, "conv1", cfg.control_channels, cfg.hint_channels, 3, 1)?,
            conv2: Conv2d::build(i, "conv2", cfg.hint_channels, cfg.hint_channels, 3, 1)?,
            zero: Conv2d::zeroed(i, "zero", cfg.hint_channels, bcfg.base_channels)?,
        })
    })?;
    let (bridges, mid_bridge) = init.scoped("bridge", |i| -> Result<_> {
        let bridges = (0..bcfg.levels())
            .map(|l| {
                let ch = bcfg.level_channels(l);
                Conv2d::zeroed(i, &format!("encoder.{l}"), ch, ch)
            })
            .collect::<Result<Vec<_>>>()?;
        let mid = Conv2d::zeroed(i, "mid", bcfg.mid_channels, bcfg.mid_channels)?;
        Ok((bridges, mid))
    })?;
    drop(init);
    let names: Vec<String> = params.registry().names().map(str::to_string).collect();
    for name in names {
        if let Some(source) = name.strip_prefix(CONTROLNET_BRANCH_PREFIX) {
            params.set(&name, backbone.params.get(source)?.clone())?;
        }
    }
    let registry = params.registry();
    Ok((
        ControlNetBranch {
            config: cfg.clone(),
            backbone_config: bcfg.clone(),
            trunk,
            hint,
            bridges,
            mid_bridge,
            params,
        },
        registry,
    ))
}

impl<T: Element> ControlNetBranch<T> {
    pub fn cast<U: Element>(&self) -> ControlNetBranch<U> {
        ControlNetBranch {
            config: self.config.clone(),
            backbone_config: self.backbone_config.clone(),
            trunk: self.trunk.clone(),
            hint: self.hint.clone(),
            bridges: self.bridges.clone(),
            mid_bridge: self.mid_bridge.clone(),
            params: self.params.cast(),
        }
    }

    /// Names of parameters whose only path to the output runs through a zero conv.
    pub fn upstream_of_zero_convs(&self) -> Vec<String> {
        self.params
            .registry()
            .names()
            .filter(|n| !n.starts_with("control.bridge."))
            .map(str::to_string)
            .collect()
    }

    /// Branch residuals for the backbone skips and mid output.
    pub fn residuals<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        t: &[usize],
        control: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let cfg = &self.backbone_config;
        let dims = g.value(control).dims4()?;
        let want = [
            dims[0],
            self.config.control_channels,
            cfg.image_size,
            cfg.image_size,
        ];
        if dims != want {
            return Err(Error::shape("controlnet control map", &want, &dims));
        }
        let store = &self.params;
        let hint = self.hint.forward(g, store, control)?;
        let enc = self.trunk.encode(g, store, x, t, Some(hint))?;
        let mid = self.trunk.mid(g, store, enc.port, enc.temb)?;
        let mut skips = Vec::with_capacity(self.bridges.len());
        for (bridge, s) in self.bridges.iter().zip(enc.skips) {
            skips.push(bridge.forward(g, store, s)?);
        }
        let mid = self.mid_bridge.forward(g, store, mid)?;
        Ok((skips, mid))
    }
}

/// Backbone output with the branch's bridged residuals added.
pub fn controlnet_graph<'a, T: Element>(
    g: &mut Graph<'a, T>,
    backbone: &'a BackboneModel<T>,
    branch: &'a ControlNetBranch<T>,
    x: Var,
    t: &[usize],
    control: Var,
) -> Result<BackboneOutputs> {
    let (skips, mid) = branch.residuals(g, x, t, control)?;
    backbone.backbone.forward_graph(
        g,
        &backbone.params,
        x,
        t,
        Conditioning::Residuals { skips, mid },
    )
}

pub fn controlnet_forward<T: Element>(
    backbone: &BackboneModel<T>,
    branch: &ControlNetBranch<T>,
    x_t: &FeatureMap<T>,
    t: &[usize],
    control: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let batch = backbone.backbone.check_input(x_t)?;
    let t = expand_timesteps(t, batch)?;
    let mut g = Graph::new(GradMode::None);
    let x = g.input(x_t.clone());
    let c = g.input(control.clone());
    let out = controlnet_graph(&mut g, backbone, branch, x, &t, c)?;
    Ok(g.value(out.output).clone())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlExtractorConfig {
    /// Channels of the control map.
    pub in_channels: usize,
    /// Residual blocks per stage.
    pub num_blocks: usize,
    /// Width of each stage; consecutive stages are separated by a halving.
    pub channels_per_stage: Vec<usize>,
    /// Spatial size of the output (the injection port size).
    pub downsample_to: usize,
    /// Channels of the output (the injection port channels).
    pub out_channels: usize,
    /// Spatial size of the control map.
    pub image_size: usize,
}

impl Default for ControlExtractorConfig {
    fn default() -> Self {
        ControlExtractorConfig {
            in_channels: 1,
            num_blocks: 1,
            channels_per_stage: vec![16, 32, 32],
            downsample_to: 16,
            out_channels: 128,
            image_size: 64,
        }
    }
}

impl ControlExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.num_blocks == 0
            || self.downsample_to == 0
            || self.out_channels == 0
            || self.image_size == 0
            || self.channels_per_stage.is_empty()
            || self.channels_per_stage.contains(&0)
        {
            return Err(Error::Config("extractor counts must be positive".into()));
        }
        let halvings = self.channels_per_stage.len() - 1;
        if self.downsample_to.checked_shl(halvings as u32) != Some(self.image_size) {
            return Err(Error::Config(format!(
                "extractor with {} stages cannot reach size {} from {} by halvings",
                self.channels_per_stage.len(),
                self.downsample_to,
                self.image_size
            )));
        }
        Ok(())
    }

    /// An extractor whose output fits `port`, with the default stage widths.
    pub fn for_port(port: &InjectionPort, image_size: usize, in_channels: usize) -> Self {
        let halvings = (image_size / port.size).max(1).trailing_zeros() as usize;
        let mut channels_per_stage = vec![16];
        channels_per_stage.extend(std::iter::repeat_n(32, halvings));
        ControlExtractorConfig {
            in_channels,
            num_blocks: 1,
            channels_per_stage,
            downsample_to: port.size,
            out_channels: port.channels,
            image_size,
        }
    }
}

#[derive(Clone, Debug)]
struct ExtractorStage {
    blocks: Vec<ResBlock>,
    down: Option<Conv2d>,
}

/// Lightweight residual-block network mapping a control map to port features.
#[derive(Clone, Debug)]
pub struct ControlExtractor<T: Element = f32> {
    pub config: ControlExtractorConfig,
    conv_in: Conv2d,
    stages: Vec<ExtractorStage>,
    conv_out: Conv2d,
    pub params: ParamStore<T>,
}

pub fn build_extractor(
    cfg: &ControlExtractorConfig,
    seed: u64,
) -> Result<(ControlExtractor, ParamRegistry)> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(&mut params, seed);
    init.push("control");
    init.push("extractor");
    let mut ch = cfg.channels_per_stage[0];
    let conv_in = Conv2d::build(&mut init, "conv_in", cfg.in_channels, ch, 3, 1)?;
    let n = cfg.channels_per_stage.len();
    let mut stages = Vec::with_capacity(n);
    for (s, &out) in cfg.channels_per_stage.iter().enumerate() {
        let stage = init.scoped(format!("stage{s}"), |i| -> Result<_> {
            let mut blocks = Vec::new();
            for j in 0..cfg.num_blocks {
                blocks.push(ResBlock::build(i, &format!("res{j}"), ch, out, None)?);
                ch = out;
            }
            let down = (s + 1 < n)
                .then(|| Conv2d::build(i, "down", ch, ch, 3, 2))
                .transpose()?;
            Ok(ExtractorStage { blocks, down })
        })?;
        stages.push(stage);
    }
    let conv_out = Conv2d::build(&mut init, "conv_out", ch, cfg.out_channels, 1, 1)?;
    drop(init);
    let registry = params.registry();
    Ok((
        ControlExtractor {
            config: cfg.clone(),
            conv_in,
            stages,
            conv_out,
            params,
        },
        registry,
    ))
}

impl<T: Element> ControlExtractor<T> {
    pub fn cast<U: Element>(&self) -> ControlExtractor<U> {
        ControlExtractor {
            config: self.config.clone(),
            conv_in: self.conv_in.clone(),
            stages: self.stages.clone(),
            conv_out: self.conv_out.clone(),
            params: self.params.cast(),
        }
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        let c = &self.config;
        [batch, c.out_channels, c.downsample_to, c.downsample_to]
    }

    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, control: Var) -> Result<Var> {
        let c = &self.config;
        let dims = g.value(control).dims4()?;
        let want = [dims[0], c.in_channels, c.image_size, c.image_size];
        if dims != want {
            return Err(Error::shape("extractor control map", &want, &dims));
        }
        let store = &self.params;
        let mut h = self.conv_in.forward(g, store, control)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(g, store, h, None)?;
            }
            if let Some(down) = &stage.down {
                h = down.forward(g, store, h)?;
            }
        }
        self.conv_out.forward(g, store, h)
    }

    pub fn forward(&self, control: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new(GradMode::None);
        let c = g.input(control.clone());
        let y = self.forward_graph(&mut g, c)?;
        Ok(g.value(y).clone())
    }
}

/// Backbone output with cross-normalized extractor features injected at the port.
pub fn controlnext_graph<'a, T: Element>(
    g: &mut Graph<'a, T>,
    backbone: &'a BackboneModel<T>,
    extractor: &'a ControlExtractor<T>,
    cn: &'a CrossNormState<T>,
    x: Var,
    t: &[usize],
    control: Var,
) -> Result<BackboneOutputs> {
    let port = backbone.port();
    let batch = g.value(x).shape()[0];
    if extractor.output_shape(batch) != port.shape(batch) || cn.channels() != port.channels {
        return Err(Error::shape(
            format!("extractor output vs port {}", InjectionPort::SITE),
            &port.shape(batch),
            &extractor.output_shape(batch),
        ));
    }
    let xc = extractor.forward_graph(g, control)?;
    let mut hook = |g: &mut Graph<'a, T>, xm: Var| cn.forward(g, xc, xm);
    backbone
        .backbone
        .forward_graph(g, &backbone.params, x, t, Conditioning::Hook(&mut hook))
}

pub fn controlnext_forward<T: Element>(
    backbone: &BackboneModel<T>,
    extractor: &ControlExtractor<T>,
    cn: &CrossNormState<T>,
    x_t: &FeatureMap<T>,
    t: &[usize],
    control: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let batch = backbone.backbone.check_input(x_t)?;
    let t = expand_timesteps(t, batch)?;
    let mut g = Graph::new(GradMode::None);
    let x = g.input(x_t.clone());
    let c = g.input(control.clone());
    let out = controlnext_graph(&mut g, backbone, extractor, cn, x, &t, c)?;
    Ok(g.value(out.output).clone())
}

/// The control side of a conditioned model.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum ControlModule<T: Element = f32> {
    ControlNet(ControlNetBranch<T>),
    ControlNeXt {
        extractor: ControlExtractor<T>,
        cross_norm: CrossNormState<T>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    ControlNet,
    ControlNeXt,
}

impl Architecture {
    pub fn label(self) -> &'static str {
        match self {
            Architecture::ControlNet => "controlnet",
            Architecture::ControlNeXt => "controlnext",
        }
    }
}

impl<T: Element> ControlModule<T> {
    pub fn architecture(&self) -> Architecture {
        match self {
            ControlModule::ControlNet(_) => Architecture::ControlNet,
            ControlModule::ControlNeXt { .. } => Architecture::ControlNeXt,
        }
    }

    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        match self {
            ControlModule::ControlNet(b) => vec![&b.params],
            ControlModule::ControlNeXt {
                extractor,
                cross_norm,
            } => vec![&extractor.params, &cross_norm.params],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        match self {
            ControlModule::ControlNet(b) => vec![&mut b.params],
            ControlModule::ControlNeXt {
                extractor,
                cross_norm,
            } => {
                vec![&mut extractor.params, &mut cross_norm.params]
            }
        }
    }

    pub fn registry(&self) -> ParamRegistry {
        ParamRegistry::merged(
            self.stores()
                .into_iter()
                .map(|s| s.registry())
                .collect::<Vec<_>>()
                .iter(),
        )
        .expect("control stores use disjoint names")
    }

    pub fn cast<U: Element>(&self) -> ControlModule<U> {
        match self {
            ControlModule::ControlNet(b) => ControlModule::ControlNet(b.cast()),
            ControlModule::ControlNeXt {
                extractor,
                cross_norm,
            } => ControlModule::ControlNeXt {
                extractor: extractor.cast(),
                cross_norm: cross_norm.cast(),
            },
        }
    }
}

/// A backbone plus its control module: the full conditional denoiser.
#[derive(Clone, Debug)]
pub struct ConditionedModel<T: Element = f32> {
    pub backbone: BackboneModel<T>,
    pub control: ControlModule<T>,
}

impl<T: Element> ConditionedModel<T> {
    pub fn graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        t: &[usize],
        control: Option<Var>,
    ) -> Result<BackboneOutputs> {
        let Some(c) = control else {
            return self.backbone.backbone.forward_graph(
                g,
                &self.backbone.params,
                x,
                t,
                Conditioning::None,
            );
        };
        match &self.control {
            ControlModule::ControlNet(branch) => {
                controlnet_graph(g, &self.backbone, branch, x, t, c)
            }
            ControlModule::ControlNeXt {
                extractor,
                cross_norm,
            } => controlnext_graph(g, &self.backbone, extractor, cross_norm, x, t, c),
        }
    }

    /// Every parameter of the model, backbone first.
    pub fn registry(&self) -> ParamRegistry {
        ParamRegistry::merged([&self.backbone.params.registry(), &self.control.registry()])
            .expect("backbone and control names are disjoint")
    }

    pub fn cast<U: Element>(&self) -> ConditionedModel<U> {
        ConditionedModel {
            backbone: self.backbone.cast(),
            control: self.control.cast(),
        }
    }
}

impl<T: Element> Denoiser<T> for ConditionedModel<T> {
    fn predict(
        &self,
        x_t: &FeatureMap<T>,
        t: &[usize],
        control: Option<&FeatureMap<T>>,
    ) -> Result<FeatureMap<T>> {
        let batch = self.backbone.backbone.check_input(x_t)?;
        let t = expand_timesteps(t, batch)?;
        let mut g = Graph::new(GradMode::None);
        let x = g.input(x_t.clone());
        let c = control.map(|c| g.input(c.clone()));
        let out = self.graph(&mut g, x, &t, c)?;
        Ok(g.value(out.output).clone())
    }
}
