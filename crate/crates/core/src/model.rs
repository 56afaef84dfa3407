//! The assembled detector: two branches, fusion, heatmap head and the
//! optional graph refinement with class head.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, HeatmapHead, PatchTransformer, UNet};
use crate::error::{Error, Result};
use crate::geometry::NUM_LANDMARKS;
use crate::mmf::{Combine, Fusion, FusionKind};
use crate::nn::{Bindings, Init, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::tgcn::{Tgcn, TgcnConfig};

/// Ablation variant: fusion block and whether the graph stage is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub fusion: FusionKind,
    pub tgcn: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { fusion: FusionKind::Mmf, tgcn: true };
    pub const WITHOUT_MMF: Variant = Variant { fusion: FusionKind::Plain, tgcn: true };
    pub const WITHOUT_TGCN: Variant = Variant { fusion: FusionKind::Mmf, tgcn: false };
    pub const CONCAT_BASELINE: Variant = Variant { fusion: FusionKind::Plain, tgcn: false };

    /// Table order used by the ablation harness.
    pub const ALL: [Variant; 4] = [Self::CONCAT_BASELINE, Self::WITHOUT_MMF, Self::WITHOUT_TGCN, Self::FULL];

    pub fn name(self) -> &'static str {
        match (self.fusion, self.tgcn) {
            (FusionKind::Mmf, true) => "full",
            (FusionKind::Plain, true) => "no-mmf",
            (FusionKind::Mmf, false) => "no-tgcn",
            (FusionKind::Plain, false) => "concat-baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (full|no-mmf|no-tgcn|concat-baseline)")))
    }
}

/// Everything needed to build the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mmf_window: usize,
    pub combine: Combine,
    pub tgcn: TgcnConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            mmf_window: 3,
            combine: Combine::Concat,
            tgcn: TgcnConfig::default(),
            variant: Variant::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        crate::mmf::check_window(self.mmf_window)?;
        self.tgcn.topology.validate()?;
        if self.tgcn.topology.nodes != NUM_LANDMARKS {
            return Err(Error::Config(format!(
                "topology must have {NUM_LANDMARKS} nodes, got {}",
                self.tgcn.topology.nodes
            )));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }
}

/// Named intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub f_local: Var,
    pub f_global: Var,
    pub f_local_mod: Var,
    pub f_global_mod: Var,
    pub f_fused: Var,
    pub icf_logits: Var,
    pub icf_heatmaps: Var,
    pub refined: Option<Var>,
    pub logit: Option<Var>,
}

impl ModelOutput {
    /// The stack landmarks are decoded from.
    pub fn decode_maps(&self) -> Var {
        self.refined.unwrap_or(self.icf_heatmaps)
    }
}

/// Detached results of inference on one image.
#[derive(Debug, Clone)]
pub struct Prediction<T: Element = f32> {
    /// `6 x h_f x w_f` stack used for decoding.
    pub heatmaps: Tensor<T>,
    /// Abnormality probability when the class head exists.
    pub probability: Option<f64>,
}

/// The full detector with its parameters.
#[derive(Debug, Clone)]
pub struct TgcnIcf<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    unet: UNet,
    vit: PatchTransformer,
    fusion: Fusion,
    head: HeatmapHead,
    tgcn: Option<Tgcn>,
}

impl<T: Element> TgcnIcf<T> {
    /// Builds the network with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let bb = &config.backbone;
        let unet = UNet::new(&mut params, &mut init, bb);
        let vit = PatchTransformer::new(&mut params, &mut init, bb);
        let fusion = Fusion::new(
            &mut params,
            &mut init,
            bb.channels,
            config.variant.fusion,
            config.mmf_window,
            config.combine,
        )?;
        let head = HeatmapHead::new(&mut params, &mut init, bb.channels, NUM_LANDMARKS);
        let tgcn = if config.variant.tgcn {
            Some(Tgcn::new(&mut params, &mut init, &config.tgcn, bb.feature_size, bb.feature_size)?)
        } else {
            None
        };
        Ok(Self { config, params, unet, vit, fusion, head, tgcn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_class_head(&self) -> bool {
        self.tgcn.is_some()
    }

    /// Positional embedding parameter of the global branch.
    pub fn position_embedding(&self) -> crate::nn::ParamId {
        self.vit.pos
    }

    /// Same network with parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> TgcnIcf<U> {
        TgcnIcf {
            config: self.config.clone(),
            params: self.params.cast(),
            unet: self.unet.clone(),
            vit: self.vit.clone(),
            fusion: self.fusion,
            head: self.head,
            tgcn: self.tgcn.clone(),
        }
    }

    /// Records a forward pass of a `1 x n x n` image on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<ModelOutput> {
        let f_local = self.unet.forward(tape, p, image)?;
        let f_global = self.vit.forward(tape, p, image)?;
        let fused = self.fusion.forward(tape, p, f_local, f_global)?;
        let (icf_logits, icf_heatmaps) = self.head.forward(tape, p, fused.fused)?;
        let (refined, logit) = match &self.tgcn {
            Some(g) => {
                let out = g.forward(tape, p, icf_logits, icf_heatmaps)?;
                (Some(out.refined), Some(out.logit))
            }
            None => (None, None),
        };
        Ok(ModelOutput {
            f_local,
            f_global,
            f_local_mod: fused.local,
            f_global_mod: fused.global,
            f_fused: fused.fused,
            icf_logits,
            icf_heatmaps,
            refined,
            logit,
        })
    }

    /// Inference on a frozen snapshot; safe to call from several threads.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &p, x)?;
        let probability = out.logit.map(|l| {
            let z = tape.scalar_value(l).as_f64();
            1.0 / (1.0 + (-z).exp())
        });
        Ok(Prediction { heatmaps: tape.tensor(out.decode_maps()), probability })
    }
}
