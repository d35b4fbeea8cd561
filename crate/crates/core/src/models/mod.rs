//! Trainable architectures, the training loop and checkpoints.

mod checkpoint;
mod hybridgnet;
mod layers;
mod train;
mod unet;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{ContourTopology, LabelAvailability, LandmarkSet, Structure, StructureLayout};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::decode_pixel_prediction;
use crate::raster::{fill_contours, StructureMasks};
use crate::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use hybridgnet::{HybridGNet, LandmarkForward, LandmarkModelConfig};
pub use train::{filter_for_setting, train, EpochLog, StepLog, TrainConfig, TrainLog};
pub use unet::{PixelModelConfig, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelMode {
    /// Softmax over background plus one class per structure.
    #[serde(rename = "multiclass")]
    Multiclass,
    /// Independent sigmoid map per structure.
    #[serde(rename = "multilabel_ht")]
    MultilabelHt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "hybridgnet")]
    HybridGNet,
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "unet_ht")]
    UNetHt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::HybridGNet, ModelKind::UNet, ModelKind::UNetHt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::HybridGNet => "hybridgnet",
            ModelKind::UNet => "unet",
            ModelKind::UNetHt => "unet_ht",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (hybridgnet, unet, unet_ht)")))
    }
}

/// Target structures and dataset policy of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    L,
    #[serde(rename = "LH_strict")]
    LhStrict,
    #[serde(rename = "LH_full")]
    LhFull,
    #[serde(rename = "LHC_strict")]
    LhcStrict,
    #[serde(rename = "LHC_full")]
    LhcFull,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::L, Setting::LhStrict, Setting::LhFull, Setting::LhcStrict, Setting::LhcFull];

    pub fn name(self) -> &'static str {
        match self {
            Setting::L => "L",
            Setting::LhStrict => "LH_strict",
            Setting::LhFull => "LH_full",
            Setting::LhcStrict => "LHC_strict",
            Setting::LhcFull => "LHC_full",
        }
    }

    /// Structures the model predicts.
    pub fn structures(self) -> LabelAvailability {
        use Structure::*;
        match self {
            Setting::L => LabelAvailability::new(&[Lungs]),
            Setting::LhStrict | Setting::LhFull => LabelAvailability::new(&[Lungs, Heart]),
            Setting::LhcStrict | Setting::LhcFull => LabelAvailability::all(),
        }
    }

    /// Strict keeps only centers annotating every target structure.
    pub fn is_strict(self) -> bool {
        matches!(self, Setting::LhStrict | Setting::LhcStrict)
    }

    pub fn is_full(self) -> bool {
        matches!(self, Setting::LhFull | Setting::LhcFull)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown setting {s:?} (L, LH_strict, LH_full, LHC_strict, LHC_full)")))
    }
}

/// Architecture hyperparameters shared by all model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub latent_dim: usize,
    pub chebyshev_order: usize,
    pub decoder_channels: Vec<usize>,
    pub unet_channels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let l = LandmarkModelConfig::default();
        Self {
            input_size: l.input_size,
            encoder_channels: l.encoder_channels,
            latent_dim: l.latent_dim,
            chebyshev_order: l.chebyshev_order,
            decoder_channels: l.decoder_channels,
            unet_channels: PixelModelConfig::default().channels,
        }
    }
}

/// One prediction: landmarks (landmark model only) and per-structure masks.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub landmarks: Option<LandmarkSet<T>>,
    pub masks: StructureMasks,
}

#[derive(Debug, Clone)]
enum Net<T> {
    Landmark(HybridGNet<T>),
    Pixel(UNet<T>),
}

/// Any of the three architectures together with the contour topology of
/// the structures it predicts.
#[derive(Debug, Clone)]
pub struct Model<T> {
    kind: ModelKind,
    topology: Arc<ContourTopology>,
    net: Net<T>,
}

const INFERENCE_CHUNK: usize = 16;

impl<T: Scalar> Model<T> {
    /// `topology` must already be restricted to the predicted structures.
    pub fn build(kind: ModelKind, arch: &ArchConfig, topology: Arc<ContourTopology>, seed: u64) -> Result<Self> {
        let net = match kind {
            ModelKind::HybridGNet => Net::Landmark(HybridGNet::new(
                LandmarkModelConfig {
                    input_size: arch.input_size,
                    encoder_channels: arch.encoder_channels.clone(),
                    latent_dim: arch.latent_dim,
                    chebyshev_order: arch.chebyshev_order,
                    decoder_channels: arch.decoder_channels.clone(),
                },
                (*topology).clone(),
                seed,
            )?),
            ModelKind::UNet | ModelKind::UNetHt => Net::Pixel(UNet::new(
                PixelModelConfig {
                    input_size: arch.input_size,
                    channels: arch.unet_channels.clone(),
                    mode: if kind == ModelKind::UNet { PixelMode::Multiclass } else { PixelMode::MultilabelHt },
                    num_structures: topology.layout().num_structures(),
                },
                seed,
            )?),
        };
        Ok(Self { kind, topology, net })
    }

    pub(crate) fn from_parts_landmark(net: HybridGNet<T>) -> Self {
        Self { kind: ModelKind::HybridGNet, topology: Arc::clone(net.topology()), net: Net::Landmark(net) }
    }

    pub(crate) fn from_parts_pixel(net: UNet<T>, topology: Arc<ContourTopology>) -> Result<Self> {
        if net.config().num_structures != topology.layout().num_structures() {
            return Err(Error::Checkpoint("pixel model structure count differs from its topology".into()));
        }
        let kind = match net.config().mode {
            PixelMode::Multiclass => ModelKind::UNet,
            PixelMode::MultilabelHt => ModelKind::UNetHt,
        };
        Ok(Self { kind, topology, net: Net::Pixel(net) })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn topology(&self) -> &Arc<ContourTopology> {
        &self.topology
    }

    pub fn layout(&self) -> &Arc<StructureLayout> {
        self.topology.layout()
    }

    pub fn input_size(&self) -> usize {
        match &self.net {
            Net::Landmark(m) => m.config().input_size,
            Net::Pixel(m) => m.config().input_size,
        }
    }

    pub fn as_landmark(&self) -> Option<&HybridGNet<T>> {
        match &self.net {
            Net::Landmark(m) => Some(m),
            Net::Pixel(_) => None,
        }
    }

    pub fn as_pixel(&self) -> Option<&UNet<T>> {
        match &self.net {
            Net::Pixel(m) => Some(m),
            Net::Landmark(_) => None,
        }
    }

    pub fn store(&self) -> &heteroseg_autograd::ParamStore<T> {
        match &self.net {
            Net::Landmark(m) => m.store(),
            Net::Pixel(m) => m.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut heteroseg_autograd::ParamStore<T> {
        match &mut self.net {
            Net::Landmark(m) => m.store_mut(),
            Net::Pixel(m) => m.store_mut(),
        }
    }

    fn predict_chunk(&self, images: &[&Grid<T>]) -> Result<Vec<Prediction<T>>> {
        let size = self.input_size();
        match &self.net {
            Net::Landmark(m) => m
                .predict(images)?
                .into_iter()
                .map(|lm| {
                    let masks = fill_contours(&lm, &self.topology, size, size)?;
                    Ok(Prediction { landmarks: Some(lm), masks })
                })
                .collect(),
            Net::Pixel(m) => m
                .predict(images)?
                .into_iter()
                .map(|scores| {
                    let masks = decode_pixel_prediction(&scores, m.config().mode, self.layout())?;
                    Ok(Prediction { landmarks: None, masks })
                })
                .collect(),
        }
    }

    /// Deterministic predictions; chunks run in parallel, order preserved.
    pub fn predict(&self, images: &[&Grid<T>]) -> Result<Vec<Prediction<T>>> {
        let parts: Vec<Result<Vec<Prediction<T>>>> =
            images.par_chunks(INFERENCE_CHUNK).map(|c| self.predict_chunk(c)).collect();
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Latent mean (landmark model) or pooled bottleneck (pixel models).
    pub fn latents(&self, images: &[&Grid<T>]) -> Result<Vec<Vec<T>>> {
        let parts: Vec<Result<Vec<Vec<T>>>> = images
            .par_chunks(INFERENCE_CHUNK)
            .map(|c| match &self.net {
                Net::Landmark(m) => m.latents(c),
                Net::Pixel(m) => m.latents(c),
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
