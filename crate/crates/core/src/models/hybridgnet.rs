//! Landmark model: residual convolutional encoder, variational latent and a
//! Chebyshev graph-convolutional decoder over the fixed contour graph.

use std::sync::Arc;

use heteroseg_autograd::{Bound, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{image_batch, ChebConv, Dense, ResStage};
use crate::anatomy::{ContourTopology, LandmarkSet, StructureLayout};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModelConfig {
    /// Square input side, a power of two.
    pub input_size: usize,
    /// Output width of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
    pub latent_dim: usize,
    /// Number of Chebyshev polynomial terms per graph convolution.
    pub chebyshev_order: usize,
    /// Node feature width entering and leaving each graph convolution.
    pub decoder_channels: Vec<usize>,
}

impl Default for LandmarkModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_channels: vec![8, 16, 32, 32, 32],
            latent_dim: 32,
            chebyshev_order: 6,
            decoder_channels: vec![32, 32, 32, 32],
        }
    }
}

impl LandmarkModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        if self.chebyshev_order < 1 {
            return Err(Error::Config("chebyshev_order must be at least 1".into()));
        }
        if !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!("input size {} is not a power of two", self.input_size)));
        }
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.input_size >> self.encoder_channels.len() == 0 {
            return Err(Error::Config(format!(
                "{} stride-2 stages do not fit a {}px input",
                self.encoder_channels.len(),
                self.input_size
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let side = self.input_size >> self.encoder_channels.len();
        self.encoder_channels.last().unwrap() * side * side
    }
}

/// Output of a single-image landmark forward pass.
#[derive(Debug, Clone)]
pub struct LandmarkForward<T> {
    pub landmarks: LandmarkSet<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

pub(crate) struct LandmarkVars {
    pub coords: Var,
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone)]
pub struct HybridGNet<T> {
    config: LandmarkModelConfig,
    topology: Arc<ContourTopology>,
    operator: Arc<Vec<T>>,
    store: ParamStore<T>,
    stages: Vec<ResStage>,
    mu: Dense,
    logvar: Dense,
    expand: Dense,
    graph: Vec<ChebConv>,
    head: Dense,
}

impl<T: Scalar> HybridGNet<T> {
    pub fn new(config: LandmarkModelConfig, topology: ContourTopology, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            stages.push(ResStage::new(&mut store, &format!("encoder.{i}"), cin, c, 2, &mut rng));
            cin = c;
        }
        let flat = config.flat_features();
        let z = config.latent_dim;
        let mu = Dense::new(&mut store, "latent.mu", flat, z, 1.0, &mut rng);
        // Small initial posterior variance keeps early reconstructions usable.
        let logvar = Dense::new(&mut store, "latent.logvar", flat, z, 0.1, &mut rng).with_bias(&mut store, T::lit(-4.0));
        let nodes = topology.layout().total_nodes();
        let f0 = config.decoder_channels[0];
        let expand = Dense::new(&mut store, "decoder.expand", z, nodes * f0, 1.0, &mut rng);
        let mut graph = Vec::new();
        let mut fin = f0;
        for (i, &f) in config.decoder_channels.iter().enumerate() {
            graph.push(ChebConv::new(&mut store, &format!("decoder.cheb{i}"), fin, f, config.chebyshev_order, &mut rng));
            fin = f;
        }
        let head = Dense::new(&mut store, "decoder.head", fin, 2, 0.1, &mut rng).with_bias(&mut store, T::lit(0.5));
        let operator = Arc::new(topology.chebyshev_operator());
        Ok(Self { config, topology: Arc::new(topology), operator, store, stages, mu, logvar, expand, graph, head })
    }

    pub fn config(&self) -> &LandmarkModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<ContourTopology> {
        &self.topology
    }

    pub fn layout(&self) -> &Arc<StructureLayout> {
        self.topology.layout()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn check_image(&self, image: &Grid<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.dims() != (s, s) {
            return Err(Error::Shape(format!("model expects {s}x{s} images, got {}x{}", image.height(), image.width())));
        }
        Ok(())
    }

    /// `noise` holds one standard-normal draw per latent entry of the batch;
    /// `None` decodes the posterior mean.
    pub(crate) fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, noise: Option<Tensor<T>>) -> LandmarkVars {
        let batch = tape.shape(x)[0];
        let mut h = x;
        for s in &self.stages {
            h = s.apply(tape, p, h);
        }
        let h = tape.reshape(h, &[batch, self.config.flat_features()]);
        let mu = self.mu.apply(tape, p, h);
        let logvar = self.logvar.apply(tape, p, h);
        let z = match noise {
            Some(eps) => {
                let half = tape.scale(logvar, T::lit(0.5));
                let std = tape.exp(half);
                let eps = tape.constant(eps);
                let e = tape.mul(std, eps);
                tape.add(mu, e)
            }
            None => mu,
        };
        let nodes = self.layout().total_nodes();
        let g = self.expand.apply(tape, p, z);
        let g = tape.reshape(g, &[batch, nodes, self.config.decoder_channels[0]]);
        let mut g = tape.relu(g);
        for conv in &self.graph {
            let y = conv.apply(tape, p, g, &self.operator);
            g = tape.relu(y);
        }
        let coords = self.head.apply(tape, p, g);
        LandmarkVars { coords, mu, logvar }
    }

    pub(crate) fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        let data = (0..batch * self.config.latent_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        Tensor::from_vec(&[batch, self.config.latent_dim], data).expect("noise shape")
    }

    fn run(&self, images: &[&Grid<T>], noise: Option<Tensor<T>>) -> Result<(Vec<LandmarkSet<T>>, Vec<Vec<T>>, Vec<Vec<T>>)> {
        for im in images {
            self.check_image(im)?;
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(image_batch(images));
        let out = self.forward(&mut tape, &p, x, noise);
        let coords = tape.value(out.coords);
        if !coords.all_finite() {
            return Err(Error::InvalidInput("landmark model produced non-finite coordinates".into()));
        }
        let per = 2 * self.layout().total_nodes();
        let z = self.config.latent_dim;
        let mut sets = Vec::with_capacity(images.len());
        for chunk in coords.data().chunks(per) {
            sets.push(LandmarkSet::from_flat(Arc::clone(self.layout()), chunk)?);
        }
        let mu = tape.value(out.mu).data().chunks(z).map(<[T]>::to_vec).collect();
        let lv = tape.value(out.logvar).data().chunks(z).map(<[T]>::to_vec).collect();
        Ok((sets, mu, lv))
    }

    /// Deterministic (posterior mean) landmark prediction for a batch.
    pub fn predict(&self, images: &[&Grid<T>]) -> Result<Vec<LandmarkSet<T>>> {
        Ok(self.run(images, None)?.0)
    }

    pub fn landmark_forward<R: Rng + ?Sized>(&self, image: &Grid<T>, stochastic: bool, rng: &mut R) -> Result<LandmarkForward<T>> {
        let noise = stochastic.then(|| self.sample_noise(1, rng));
        let (mut sets, mut mu, mut lv) = self.run(&[image], noise)?;
        Ok(LandmarkForward { landmarks: sets.remove(0), mu: mu.remove(0), logvar: lv.remove(0) })
    }

    /// Posterior means for a batch of images.
    pub fn latents(&self, images: &[&Grid<T>]) -> Result<Vec<Vec<T>>> {
        Ok(self.run(images, None)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{default_synthetic_topology, LabelAvailability, Structure};
    use crate::objectives::masked_mse_raw;

    fn tiny() -> LandmarkModelConfig {
        LandmarkModelConfig {
            input_size: 16,
            encoder_channels: vec![2, 3],
            latent_dim: 4,
            chebyshev_order: 3,
            decoder_channels: vec![4, 4],
        }
    }

    fn image(seed: usize) -> Grid<f64> {
        Grid::from_fn(16, 16, |i, j| ((i * 7 + j * 3 + seed) % 11) as f64 / 10.0)
    }

    #[test]
    fn output_rows_match_layout_and_are_deterministic() {
        let topo = default_synthetic_topology();
        let m = HybridGNet::<f64>::new(tiny(), topo, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.landmark_forward(&image(0), false, &mut rng).unwrap();
        let b = m.landmark_forward(&image(0), false, &mut rng).unwrap();
        assert_eq!(a.landmarks.coords().len(), 76);
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.mu.len(), 4);
        let c = m.landmark_forward(&image(0), true, &mut rng).unwrap();
        assert_ne!(a.landmarks, c.landmarks);
    }

    #[test]
    fn latent_length_follows_config() {
        let mut cfg = tiny();
        cfg.latent_dim = 64;
        let m = HybridGNet::<f32>::new(cfg, default_synthetic_topology(), 0).unwrap();
        let im = image(1).map(|&v| v as f32);
        assert_eq!(m.latents(&[&im]).unwrap()[0].len(), 64);
    }

    #[test]
    fn rejects_bad_configs_and_sizes() {
        let mut cfg = tiny();
        cfg.latent_dim = 1;
        assert!(HybridGNet::<f64>::new(cfg, default_synthetic_topology(), 0).is_err());
        let mut cfg = tiny();
        cfg.input_size = 24;
        assert!(HybridGNet::<f64>::new(cfg, default_synthetic_topology(), 0).is_err());
        let m = HybridGNet::<f64>::new(tiny(), default_synthetic_topology(), 0).unwrap();
        assert!(m.predict(&[&Grid::filled(8, 8, 0.0)]).is_err());
    }

    #[test]
    fn masked_heart_rows_get_zero_gradient() {
        let topo = default_synthetic_topology();
        let m = HybridGNet::<f64>::new(tiny(), topo, 3).unwrap();
        let layout = Arc::clone(m.layout());
        let mask = crate::anatomy::availability_mask(&layout, LabelAvailability::new(&[Structure::Lungs])).unwrap();
        let pred = m.predict(&[&image(2)]).unwrap().remove(0).flat();
        let mut target: Vec<f64> = (0..pred.len()).map(|i| (i % 5) as f64 / 5.0).collect();
        let heart = layout.range(Structure::Heart).unwrap();
        for i in heart.clone() {
            target[2 * i] = f64::NAN;
            target[2 * i + 1] = f64::NAN;
        }
        let (_, grad) = masked_mse_raw(&pred, &target, &mask).unwrap();
        let h = 1e-6;
        for i in heart {
            for c in 0..2 {
                assert_eq!(grad[2 * i + c], 0.0);
                let mut p = pred.clone();
                p[2 * i + c] += h;
                let up = masked_mse_raw(&p, &target, &mask).unwrap().0;
                p[2 * i + c] -= 2.0 * h;
                let down = masked_mse_raw(&p, &target, &mask).unwrap().0;
                assert!(((up - down) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }
}
