//! Residual UNet with either one softmax head over all classes or one
//! independent sigmoid head per structure.

use heteroseg_autograd::{he_normal, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{image_batch, ResStage};
use super::PixelMode;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelModelConfig {
    pub input_size: usize,
    /// Width per resolution level; the last entry is the bottleneck.
    pub channels: Vec<usize>,
    pub mode: PixelMode,
    pub num_structures: usize,
}

impl Default for PixelModelConfig {
    fn default() -> Self {
        Self { input_size: 64, channels: vec![8, 16, 32, 64], mode: PixelMode::MultilabelHt, num_structures: 3 }
    }
}

impl PixelModelConfig {
    pub fn output_channels(&self) -> usize {
        match self.mode {
            PixelMode::Multiclass => self.num_structures + 1,
            PixelMode::MultilabelHt => self.num_structures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_structures == 0 {
            return Err(Error::Config("pixel model needs at least one structure".into()));
        }
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config("pixel model needs at least two positive channel widths".into()));
        }
        if !self.input_size.is_power_of_two() || self.input_size >> (self.channels.len() - 1) == 0 {
            return Err(Error::Config(format!(
                "input size {} cannot be halved {} times",
                self.input_size,
                self.channels.len() - 1
            )));
        }
        Ok(())
    }
}

pub(crate) struct PixelVars {
    /// Per-structure probability maps `[N, 1, H, W]` (HT) or a single
    /// `[N, K + 1, H, W]` logit tensor (multiclass).
    pub heads: Vec<Var>,
    pub bottleneck: Var,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: PixelModelConfig,
    store: ParamStore<T>,
    down: Vec<ResStage>,
    up: Vec<ResStage>,
    heads: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: PixelModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let mut down = Vec::new();
        let mut cin = 1;
        for (i, &c) in ch.iter().enumerate() {
            down.push(ResStage::new(&mut store, &format!("down.{i}"), cin, c, if i == 0 { 1 } else { 2 }, &mut rng));
            cin = c;
        }
        let mut up = Vec::new();
        for i in (0..ch.len() - 1).rev() {
            up.push(ResStage::new(&mut store, &format!("up.{i}"), cin + ch[i], ch[i], 1, &mut rng));
            cin = ch[i];
        }
        let c0 = ch[0];
        let head_shapes: Vec<usize> = match config.mode {
            PixelMode::Multiclass => vec![config.num_structures + 1],
            PixelMode::MultilabelHt => vec![1; config.num_structures],
        };
        let heads = head_shapes
            .iter()
            .enumerate()
            .map(|(k, &o)| {
                (
                    store.add(format!("head.{k}.weight"), he_normal(&[o, c0, 1, 1], c0, 0.5, &mut rng)),
                    store.add(format!("head.{k}.bias"), Tensor::zeros(&[o])),
                )
            })
            .collect();
        Ok(Self { config, store, down, up, heads })
    }

    pub fn config(&self) -> &PixelModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Parameter ids of the output head for one channel group (HT: one per
    /// structure).
    pub fn head_params(&self, head: usize) -> [ParamId; 2] {
        let (w, b) = self.heads[head];
        [w, b]
    }

    pub(crate) fn check_image(&self, image: &Grid<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.dims() != (s, s) {
            return Err(Error::Shape(format!("model expects {s}x{s} images, got {}x{}", image.height(), image.width())));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> PixelVars {
        let mut skips = Vec::new();
        let mut h = x;
        for s in &self.down {
            h = s.apply(tape, p, h);
            skips.push(h);
        }
        let bottleneck = skips.pop().unwrap();
        for s in &self.up {
            let u = tape.upsample2(h);
            let cat = tape.concat_channels(u, skips.pop().unwrap());
            h = s.apply(tape, p, cat);
        }
        let heads = self
            .heads
            .iter()
            .map(|&(w, b)| {
                let y = tape.conv2d(h, p.var(w), Some(p.var(b)), 1, 0);
                match self.config.mode {
                    PixelMode::MultilabelHt => tape.sigmoid(y),
                    PixelMode::Multiclass => y,
                }
            })
            .collect();
        PixelVars { heads, bottleneck }
    }

    fn run(&self, images: &[&Grid<T>]) -> Result<(Vec<Vec<Grid<T>>>, Vec<Vec<T>>)> {
        for im in images {
            self.check_image(im)?;
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(image_batch(images));
        let out = self.forward(&mut tape, &p, x);
        let s = self.config.input_size;
        let mut maps = vec![Vec::new(); images.len()];
        for &head in &out.heads {
            let v = tape.value(head);
            for (n, plane) in v.data().chunks(s * s).enumerate() {
                let channels = v.shape()[1];
                maps[n / channels].push(Grid::from_vec(s, s, plane.to_vec())?);
            }
        }
        let pooled = tape.global_avg_pool(out.bottleneck);
        let width = *self.config.channels.last().unwrap();
        let latents = tape.value(pooled).data().chunks(width).map(<[T]>::to_vec).collect();
        Ok((maps, latents))
    }

    /// Score maps per image: sigmoid probabilities (HT) or class logits with
    /// background first (multiclass).
    pub fn predict(&self, images: &[&Grid<T>]) -> Result<Vec<Vec<Grid<T>>>> {
        Ok(self.run(images)?.0)
    }

    pub fn pixel_forward(&self, image: &Grid<T>) -> Result<Vec<Grid<T>>> {
        Ok(self.run(&[image])?.0.remove(0))
    }

    /// Spatially averaged bottleneck features.
    pub fn latents(&self, images: &[&Grid<T>]) -> Result<Vec<Vec<T>>> {
        Ok(self.run(images)?.1)
    }
}
