//! JSON manifest of centers, PNG images and plain-text landmark files.
//!
//! A landmark file holds one `x y` line (normalized coordinates) per node of
//! every annotated structure, in layout order. Blank lines and lines starting
//! with `#` are skipped.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{CenterDataset, Corpus, SampleRecord};
use crate::anatomy::{default_synthetic_topology, ContourTopology, LabelAvailability, TopologyDoc};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::raster::fill_structure;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Contour layout; the synthetic family when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyDoc>,
    pub centers: Vec<ManifestCenter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCenter {
    pub id: String,
    /// Structures used for training.
    pub availability: LabelAvailability,
    /// Structures present in the landmark files; defaults to `availability`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<LabelAvailability>,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: PathBuf,
    pub landmarks: PathBuf,
}

fn read_image<T: Scalar>(path: &Path) -> Result<Grid<T>> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| T::lit(p.0[0] as f64 / 65535.0)).collect();
    Grid::from_vec(h as usize, w as usize, data)
}

fn write_image<T: Scalar>(path: &Path, img: &Grid<T>) -> Result<()> {
    let (h, w) = img.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = img.get(y as usize, x as usize).to_f64().unwrap().clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::file(path, e.to_string()))
}

/// Parses `x y` rows.
pub(crate) fn parse_landmarks<T: Scalar>(path: &Path, text: &str) -> Result<Vec<[T; 2]>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::file(path, format!("line {}: expected two numbers", n + 1)))?;
        if vals.len() != 2 || !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::file(path, format!("line {}: expected two finite numbers", n + 1)));
        }
        rows.push([T::lit(vals[0]), T::lit(vals[1])]);
    }
    Ok(rows)
}

/// Loads every center of a manifest. Masks are rasterized from the
/// landmarks.
pub fn load_manifest<T: Scalar>(path: impl AsRef<Path>) -> Result<Corpus<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::file(path, e.to_string()))?;
    if manifest.centers.is_empty() {
        return Err(Error::file(path, "manifest lists no centers"));
    }
    let topology = Arc::new(match &manifest.topology {
        Some(doc) => ContourTopology::from_doc(doc)?,
        None => default_synthetic_topology(),
    });
    let layout = Arc::clone(topology.layout());
    let base = path.parent().unwrap_or(Path::new("."));
    let mut centers = Vec::new();
    for c in &manifest.centers {
        let gt = c.ground_truth.unwrap_or(c.availability);
        if !c.availability.is_subset(gt) {
            return Err(Error::file(path, format!("center {}: availability exceeds ground truth", c.id)));
        }
        for s in gt.iter() {
            if layout.block(s).is_none() {
                return Err(Error::file(path, format!("center {}: {s} is not in the layout", c.id)));
            }
        }
        if c.records.is_empty() {
            return Err(Error::file(path, format!("center {} has no records", c.id)));
        }
        let expected: usize = gt.iter().map(|s| layout.block(s).unwrap().node_count).sum();
        let mut records = Vec::new();
        for (k, r) in c.records.iter().enumerate() {
            let img_path = base.join(&r.image);
            let lm_path = base.join(&r.landmarks);
            let image = read_image::<T>(&img_path)?;
            let lm_text = fs::read_to_string(&lm_path).map_err(|e| Error::file(&lm_path, e.to_string()))?;
            let rows = parse_landmarks::<T>(&lm_path, &lm_text)?;
            if rows.len() != expected {
                return Err(Error::file(
                    &lm_path,
                    format!("{} landmark rows, layout needs {expected} for {gt}", rows.len()),
                ));
            }
            let mut coords = vec![[T::nan(), T::nan()]; layout.total_nodes()];
            let mut it = rows.into_iter();
            for s in gt.iter() {
                for i in layout.range(s).unwrap() {
                    coords[i] = it.next().unwrap();
                }
            }
            let (h, w) = image.dims();
            let masks = layout
                .structures()
                .map(|s| if gt.contains(s) { fill_structure(&coords, &topology, s, h, w).map(Some) } else { Ok(None) })
                .collect::<Result<Vec<_>>>()?;
            let id = r.id.clone().unwrap_or_else(|| format!("{}_{k:04}", c.id));
            records.push(
                SampleRecord::new(id, c.id.clone(), image, Arc::clone(&layout), coords, masks, gt, c.availability)
                    .map_err(|e| Error::file(&lm_path, e.to_string()))?,
            );
        }
        centers.push(CenterDataset::new(c.id.clone(), c.availability, records)?);
    }
    Ok(Corpus { topology, centers })
}

/// Writes a corpus as `manifest.json`, `images/*.png` (16-bit) and
/// `landmarks/*.txt` under `dir`.
pub fn write_manifest<T: Scalar>(corpus: &Corpus<T>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("landmarks"))?;
    let layout = corpus.topology.layout();
    let mut centers = Vec::new();
    for c in &corpus.centers {
        let gt = c.ground_truth();
        let mut records = Vec::new();
        for r in &c.records {
            let image = PathBuf::from("images").join(format!("{}.png", r.sample_id));
            let landmarks = PathBuf::from("landmarks").join(format!("{}.txt", r.sample_id));
            write_image(&dir.join(&image), &r.image)?;
            let mut text = String::new();
            for s in gt.iter() {
                for i in layout.range(s).unwrap() {
                    let p = r.raw_coords()[i];
                    text.push_str(&format!("{:.9} {:.9}\n", p[0].to_f64().unwrap(), p[1].to_f64().unwrap()));
                }
            }
            fs::write(dir.join(&landmarks), text)?;
            records.push(ManifestRecord { id: Some(r.sample_id.clone()), image, landmarks });
        }
        centers.push(ManifestCenter {
            id: c.center_id.clone(),
            availability: c.availability,
            ground_truth: (gt != c.availability).then_some(gt),
            records,
        });
    }
    let manifest = Manifest { topology: Some(corpus.topology.to_doc()), centers };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}
