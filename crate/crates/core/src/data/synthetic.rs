//! Synthetic chest-like centers: two lung ellipses, a heart ellipse over the
//! left lung and two clavicle bars across the lung tops.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CenterDataset, SampleRecord};
use crate::anatomy::{ContourTopology, LabelAvailability, Structure};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::raster::{fill_polygon, fill_structure};
use crate::util::derive_seed;
use crate::Scalar;

const BACKGROUND: f64 = 0.40;
const LUNG: f64 = 0.12;
const HEART: f64 = 0.55;
const CLAVICLE: f64 = 0.65;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCenterSpec {
    pub center_id: String,
    pub n_samples: usize,
    pub availability: LabelAvailability,
    /// Additive intensity offset.
    pub brightness: f64,
    /// Contrast about mid-gray.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Range of the global anatomy scale factor.
    pub scale: (f64, f64),
    /// Maximum absolute translation of the anatomy, normalized units.
    #[serde(default = "default_shift")]
    pub shift: f64,
    /// Maximum relative jitter of individual shape axes.
    #[serde(default = "default_jitter")]
    pub axis_jitter: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub seed: u64,
}

fn default_shift() -> f64 {
    0.03
}

fn default_jitter() -> f64 {
    0.07
}

fn default_image_size() -> usize {
    64
}

impl SyntheticCenterSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic center {}: {m}", self.center_id)));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1 && self.scale.1 < 1.6) {
            return bad(format!("scale range {:?} is degenerate", self.scale));
        }
        if !(self.contrast > 0.0) || !(self.noise_sigma >= 0.0) || !self.brightness.is_finite() {
            return bad("contrast must be positive and noise non-negative".into());
        }
        if !(0.0..0.2).contains(&self.shift) || !(0.0..0.5).contains(&self.axis_jitter) {
            return bad("shift or jitter out of range".into());
        }
        if self.image_size < 8 {
            return bad("image size too small".into());
        }
        Ok(())
    }
}

/// Three centers mirroring the lung-only, lung+heart and fully annotated
/// sources: 240 images each, differing in intensity profile and organ size.
pub fn default_synthetic_specs(seed: u64) -> Vec<SyntheticCenterSpec> {
    use Structure::*;
    let spec = |id: &str, avail: &[Structure], b: f64, c: f64, n: f64, scale: (f64, f64)| SyntheticCenterSpec {
        center_id: id.into(),
        n_samples: 240,
        availability: LabelAvailability::new(avail),
        brightness: b,
        contrast: c,
        noise_sigma: n,
        scale,
        shift: default_shift(),
        axis_jitter: default_jitter(),
        image_size: 64,
        seed: derive_seed(seed, id),
    };
    vec![
        spec("SYNTH_L", &[Lungs], 0.12, 1.0, 0.05, (0.86, 1.0)),
        spec("SYNTH_LH", &[Lungs, Heart], -0.2, 0.7, 0.08, (0.92, 1.06)),
        spec("SYNTH_LHC", &[Lungs, Heart, Clavicles], 0.0, 1.15, 0.02, (0.96, 1.1)),
    ]
}

fn ellipse(n: usize, c: [f64; 2], a: f64, b: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            [c[0] + a * t.sin(), c[1] - b * t.cos()]
        })
        .collect()
}

/// Rectangle of the given length/thickness rotated by `angle`; corners are
/// always nodes and extra nodes sit evenly on the long sides.
fn bar(n: usize, c: [f64; 2], length: f64, thickness: f64, angle: f64) -> Vec<[f64; 2]> {
    let extra = (n - 4) / 2;
    let (hl, ht) = (length / 2.0, thickness / 2.0);
    let mut local = Vec::with_capacity(n);
    for k in 0..=extra + 1 {
        local.push([-hl + length * k as f64 / (extra + 1) as f64, -ht]);
    }
    for k in 0..=extra + 1 {
        local.push([hl - length * k as f64 / (extra + 1) as f64, ht]);
    }
    let (s, co) = angle.sin_cos();
    local.iter().map(|p| [c[0] + co * p[0] - s * p[1], c[1] + s * p[0] + co * p[1]]).collect()
}

fn check_family(topology: &ContourTopology) -> Result<()> {
    let lines = |s| topology.polylines(s);
    let ok = topology.layout().num_structures() == 3
        && lines(Structure::Lungs).len() == 2
        && lines(Structure::Heart).len() == 1
        && lines(Structure::Clavicles).len() == 2
        && lines(Structure::Clavicles).iter().all(|l| l.len() >= 4 && l.len() % 2 == 0);
    if ok {
        Ok(())
    } else {
        Err(Error::Topology(
            "synthetic data needs two lung contours, one heart contour and two clavicle contours with an even node count".into(),
        ))
    }
}

/// Landmark coordinates of one synthetic anatomy, in layout order.
fn anatomy<R: Rng>(spec: &SyntheticCenterSpec, topology: &ContourTopology, rng: &mut R) -> Vec<[f64; 2]> {
    let s = rng.random_range(spec.scale.0..=spec.scale.1);
    let shift = |rng: &mut R| if spec.shift > 0.0 { rng.random_range(-spec.shift..spec.shift) } else { 0.0 };
    let (dx, dy) = (shift(rng), shift(rng));
    let j = spec.axis_jitter;
    let jit = |rng: &mut R| if j > 0.0 { 1.0 + rng.random_range(-j..j) } else { 1.0 };
    let at = |x: f64, y: f64| [0.5 + (x - 0.5) * s + dx, 0.5 + (y - 0.5) * s + dy];

    let mut coords = vec![[0.0; 2]; topology.layout().total_nodes()];
    let mut place = |line: &[usize], pts: Vec<[f64; 2]>| {
        for (&i, p) in line.iter().zip(pts) {
            coords[i] = p;
        }
    };
    let lungs = topology.polylines(Structure::Lungs);
    for (line, x) in lungs.iter().zip([0.30, 0.70]) {
        let (a, b) = (0.13 * s * jit(rng), 0.27 * s * jit(rng));
        place(line, ellipse(line.len(), at(x, 0.52), a, b));
    }
    let heart = &topology.polylines(Structure::Heart)[0];
    let (a, b) = (0.15 * s * jit(rng), 0.11 * s * jit(rng));
    place(heart, ellipse(heart.len(), at(0.60, 0.65), a, b));
    let clav = topology.polylines(Structure::Clavicles);
    for (line, (x, side)) in clav.iter().zip([(0.33, 1.0), (0.67, -1.0)]) {
        let angle = side * (-0.2 + rng.random_range(-0.08..0.08));
        let (len, thick) = (0.30 * s * jit(rng), 0.10 * s * jit(rng));
        place(line, bar(line.len(), at(x, 0.28), len, thick, angle));
    }
    coords
}

/// Area coverage in `[0, 1]` per pixel of the polylines of one structure.
fn coverage(coords: &[[f64; 2]], topology: &ContourTopology, s: Structure, size: usize) -> Vec<f64> {
    let big = size * SUPERSAMPLE;
    let mut fine = BinaryMask::filled(big, big, false);
    for line in topology.polylines(s) {
        let verts: Vec<[f64; 2]> = line.iter().map(|&i| [coords[i][0] * big as f64, coords[i][1] * big as f64]).collect();
        let m = fill_polygon(&verts, big, big);
        for (d, &v) in fine.data_mut().iter_mut().zip(m.data()) {
            *d |= v;
        }
    }
    let mut cov = vec![0.0; size * size];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for i in 0..big {
        for j in 0..big {
            if *fine.get(i, j) {
                cov[(i / SUPERSAMPLE) * size + j / SUPERSAMPLE] += inv;
            }
        }
    }
    cov
}

fn render<R: Rng>(spec: &SyntheticCenterSpec, coords: &[[f64; 2]], topology: &ContourTopology, rng: &mut R) -> Grid<f64> {
    let n = spec.image_size;
    let mut img = vec![BACKGROUND; n * n];
    for (s, level) in [(Structure::Lungs, LUNG), (Structure::Heart, HEART), (Structure::Clavicles, CLAVICLE)] {
        for (p, c) in img.iter_mut().zip(coverage(coords, topology, s, n)) {
            *p = *p * (1.0 - c) + level * c;
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let data = img
        .into_iter()
        .map(|v| {
            let e = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (spec.contrast * (v - 0.5) + 0.5 + spec.brightness + e).clamp(0.0, 1.0)
        })
        .collect();
    Grid::from_vec(n, n, data).expect("image size")
}

/// Generates every center. Images, landmarks and masks of all structures are
/// produced; `availability` only gates training.
pub fn generate_synthetic_centers<T: Scalar>(
    specs: &[SyntheticCenterSpec],
    topology: &Arc<ContourTopology>,
) -> Result<Vec<CenterDataset<T>>> {
    if specs.is_empty() {
        return Err(Error::Config("no synthetic centers specified".into()));
    }
    check_family(topology)?;
    let layout = topology.layout();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut records = Vec::with_capacity(spec.n_samples);
        for k in 0..spec.n_samples {
            let coords = anatomy(spec, topology, &mut rng);
            if coords.iter().flatten().any(|v| !(-0.5..=1.5).contains(v)) {
                return Err(Error::Config(format!("{}: shape parameters leave the frame", spec.center_id)));
            }
            let image = render(spec, &coords, topology, &mut rng);
            let n = spec.image_size;
            let masks = layout
                .structures()
                .map(|s| fill_structure(&coords, topology, s, n, n).map(Some))
                .collect::<Result<Vec<_>>>()?;
            let cast = |v: f64| T::lit(v);
            let record = SampleRecord::new(
                format!("{}_{k:04}", spec.center_id),
                spec.center_id.clone(),
                image.map(|&v| cast(v)),
                Arc::clone(layout),
                coords.iter().map(|c| [cast(c[0]), cast(c[1])]).collect(),
                masks,
                layout.as_availability(),
                spec.availability,
            )?;
            records.push(record);
        }
        out.push(CenterDataset::new(spec.center_id.clone(), spec.availability, records)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::default_synthetic_topology;
    use crate::metrics::dice;
    use crate::raster::fill_contours;

    fn small(mut s: SyntheticCenterSpec, n: usize) -> SyntheticCenterSpec {
        s.n_samples = n;
        s
    }

    #[test]
    fn deterministic_and_consistent() {
        let topo = Arc::new(default_synthetic_topology());
        let specs: Vec<_> = default_synthetic_specs(5).into_iter().map(|s| small(s, 6)).collect();
        let a = generate_synthetic_centers::<f64>(&specs, &topo).unwrap();
        let b = generate_synthetic_centers::<f64>(&specs, &topo).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].availability.code(), "L");
        assert_eq!(a[2].availability.code(), "LHC");
        for c in &a {
            for r in &c.records {
                let lm = r.gt_landmarks(topo.layout()).unwrap();
                let masks = fill_contours(&lm, &topo, 64, 64).unwrap();
                for (s, m) in masks.iter() {
                    assert!(m.count() > 0);
                    assert_eq!(dice(m, r.gt_mask(s).unwrap()).unwrap(), 1.0);
                }
            }
        }
    }

    #[test]
    fn clavicles_overlap_lungs_and_heart_overlaps_left_lung() {
        let topo = Arc::new(default_synthetic_topology());
        let specs = vec![small(default_synthetic_specs(1).remove(2), 10)];
        for r in &generate_synthetic_centers::<f64>(&specs, &topo).unwrap()[0].records {
            let l = r.gt_mask(Structure::Lungs).unwrap();
            for s in [Structure::Heart, Structure::Clavicles] {
                let m = r.gt_mask(s).unwrap();
                assert!(l.data().iter().zip(m.data()).any(|(&a, &b)| a && b), "{s} does not overlap the lungs");
            }
        }
    }

    #[test]
    fn brightness_shifts_mean_intensity() {
        let topo = Arc::new(default_synthetic_topology());
        let base = SyntheticCenterSpec {
            center_id: "A".into(),
            n_samples: 100,
            availability: LabelAvailability::all(),
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.02,
            scale: (0.9, 1.1),
            shift: 0.03,
            axis_jitter: 0.07,
            image_size: 64,
            seed: 11,
        };
        let bright = SyntheticCenterSpec { center_id: "B".into(), brightness: 0.3, seed: 12, ..base.clone() };
        let c = generate_synthetic_centers::<f64>(&[base, bright], &topo).unwrap();
        let mean = |d: &CenterDataset<f64>| {
            d.records.iter().map(|r| r.image.data().iter().sum::<f64>() / 4096.0).sum::<f64>() / d.len() as f64
        };
        assert!((mean(&c[1]) - mean(&c[0]) - 0.3).abs() < 0.02);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let topo = Arc::new(default_synthetic_topology());
        let mut s = default_synthetic_specs(0).remove(0);
        s.scale = (0.0, 0.0);
        assert!(generate_synthetic_centers::<f64>(&[s], &topo).is_err());
        assert!(generate_synthetic_centers::<f64>(&[], &topo).is_err());
    }
}
