//! Records, centers, splitting, the single-source sampler, manifests and
//! synthetic data.

mod manifest;
mod sampler;
mod scale;
mod split;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::anatomy::{ContourTopology, LabelAvailability, LandmarkSet, Structure, StructureLayout};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::Scalar;

pub use manifest::{load_manifest, write_manifest, Manifest, ManifestCenter, ManifestRecord};
pub use sampler::{single_source_batches, BatchPlan, SingleSourceSampler};
pub use scale::{lung_bbox_area, normalize_organ_scale};
pub use split::{split, split_indices, DEFAULT_SPLIT_FRACTION};
pub use synthetic::{default_synthetic_specs, generate_synthetic_centers, SyntheticCenterSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[serde(rename = "trainval")]
    TrainVal,
    Test,
}

/// One image with its annotations.
///
/// Landmark rows of structures without ground truth hold NaN. Structures
/// with ground truth but outside `availability` (removed labels) keep their
/// values as an evaluation-only shadow; the training accessors refuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T> {
    pub sample_id: String,
    pub center_id: String,
    pub image: Grid<T>,
    pub split: Split,
    layout: Arc<StructureLayout>,
    coords: Vec<[T; 2]>,
    masks: Vec<Option<BinaryMask>>,
    ground_truth: LabelAvailability,
    availability: LabelAvailability,
}

impl<T: Scalar> SampleRecord<T> {
    /// `coords` covers the full layout; rows of structures outside
    /// `ground_truth` are ignored and replaced by NaN.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sample_id: impl Into<String>,
        center_id: impl Into<String>,
        image: Grid<T>,
        layout: Arc<StructureLayout>,
        mut coords: Vec<[T; 2]>,
        masks: Vec<Option<BinaryMask>>,
        ground_truth: LabelAvailability,
        availability: LabelAvailability,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if coords.len() != layout.total_nodes() {
            return Err(Error::Shape(format!(
                "{sample_id}: {} landmark rows for {} layout nodes",
                coords.len(),
                layout.total_nodes()
            )));
        }
        if masks.len() != layout.num_structures() {
            return Err(Error::Shape(format!("{sample_id}: one mask slot per layout structure expected")));
        }
        if !availability.is_subset(ground_truth) {
            return Err(Error::Data(format!("{sample_id}: availability {availability} exceeds ground truth {ground_truth}")));
        }
        for (idx, s) in layout.structures().enumerate() {
            let range = layout.range(s).unwrap();
            if ground_truth.contains(s) {
                if coords[range].iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
                    return Err(Error::Data(format!("{sample_id}: non-finite {s} landmarks")));
                }
                match &masks[idx] {
                    Some(m) if m.dims() == image.dims() => {}
                    Some(_) => return Err(Error::Shape(format!("{sample_id}: {s} mask size differs from image"))),
                    None => return Err(Error::Data(format!("{sample_id}: missing {s} mask"))),
                }
            } else {
                coords[range].iter_mut().for_each(|c| *c = [T::nan(), T::nan()]);
            }
        }
        for s in ground_truth.iter() {
            if layout.block(s).is_none() {
                return Err(Error::StructureNotInLayout(s));
            }
        }
        let masks = layout
            .structures()
            .zip(masks)
            .map(|(s, m)| if ground_truth.contains(s) { m } else { None })
            .collect();
        Ok(Self {
            sample_id,
            center_id: center_id.into(),
            image,
            split: Split::TrainVal,
            layout,
            coords,
            masks,
            ground_truth,
            availability,
        })
    }

    pub fn layout(&self) -> &Arc<StructureLayout> {
        &self.layout
    }

    /// Structures usable as training targets.
    pub fn availability(&self) -> LabelAvailability {
        self.availability
    }

    /// Structures with annotations, including removed ones.
    pub fn ground_truth(&self) -> LabelAvailability {
        self.ground_truth
    }

    pub(crate) fn with_availability(mut self, availability: LabelAvailability) -> Self {
        self.availability = availability;
        self
    }

    /// Raw rows with NaN sentinels for structures without ground truth.
    pub fn raw_coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    fn check_trainable(&self, s: Structure) -> Result<()> {
        if self.availability.contains(s) {
            Ok(())
        } else {
            Err(Error::Data(format!("{}: {s} labels are not available for training", self.sample_id)))
        }
    }

    /// Landmark rows for training; errors for unavailable structures.
    pub fn training_rows(&self, s: Structure) -> Result<&[[T; 2]]> {
        self.check_trainable(s)?;
        Ok(&self.coords[self.layout.range(s).ok_or(Error::StructureNotInLayout(s))?])
    }

    /// Mask for training; errors for unavailable structures.
    pub fn training_mask(&self, s: Structure) -> Result<&BinaryMask> {
        self.check_trainable(s)?;
        let idx = self.layout.structures().position(|t| t == s).ok_or(Error::StructureNotInLayout(s))?;
        Ok(self.masks[idx].as_ref().expect("available structures have masks"))
    }

    /// Flat targets for a model whose layout is a prefix of the record's,
    /// with NaN in rows the loss must not read, plus the matching node mask.
    pub fn training_targets(&self, model_layout: &StructureLayout) -> Result<(Vec<T>, Vec<bool>)> {
        self.check_prefix(model_layout)?;
        let mut flat = vec![T::nan(); 2 * model_layout.total_nodes()];
        let mut mask = vec![false; model_layout.total_nodes()];
        for s in model_layout.structures() {
            if !self.availability.contains(s) {
                continue;
            }
            for i in model_layout.range(s).unwrap() {
                flat[2 * i] = self.coords[i][0];
                flat[2 * i + 1] = self.coords[i][1];
                mask[i] = true;
            }
        }
        Ok((flat, mask))
    }

    /// Per-structure training masks for a prefix layout (`None` when the
    /// structure is unavailable).
    pub fn training_masks(&self, model_layout: &StructureLayout) -> Result<Vec<Option<BinaryMask>>> {
        self.check_prefix(model_layout)?;
        Ok(model_layout
            .structures()
            .map(|s| self.training_mask(s).ok().cloned())
            .collect())
    }

    fn check_prefix(&self, model_layout: &StructureLayout) -> Result<()> {
        let ok = model_layout.num_structures() <= self.layout.num_structures()
            && model_layout.blocks().iter().zip(self.layout.blocks()).all(|(a, b)| a == b);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("{}: model layout is not a prefix of the data layout", self.sample_id)))
        }
    }

    /// Ground-truth rows for evaluation (removed labels included).
    pub fn gt_rows(&self, s: Structure) -> Option<&[[T; 2]]> {
        if self.ground_truth.contains(s) {
            self.layout.range(s).map(|r| &self.coords[r])
        } else {
            None
        }
    }

    pub fn gt_mask(&self, s: Structure) -> Option<&BinaryMask> {
        let idx = self.layout.structures().position(|t| t == s)?;
        self.masks[idx].as_ref()
    }

    /// Ground-truth landmark set restricted to a prefix layout, if every
    /// structure in it is annotated.
    pub fn gt_landmarks(&self, model_layout: &Arc<StructureLayout>) -> Option<LandmarkSet<T>> {
        self.check_prefix(model_layout).ok()?;
        LandmarkSet::new(Arc::clone(model_layout), self.coords[..model_layout.total_nodes()].to_vec()).ok()
    }

    pub(crate) fn replace_geometry(&mut self, image: Grid<T>, coords: Vec<[T; 2]>, masks: Vec<Option<BinaryMask>>) {
        self.image = image;
        self.coords = coords;
        self.masks = masks;
    }

    pub fn cast<U: Scalar>(&self) -> SampleRecord<U> {
        let c = |v: T| U::from(v).unwrap();
        SampleRecord {
            sample_id: self.sample_id.clone(),
            center_id: self.center_id.clone(),
            image: self.image.map(|&v| c(v)),
            split: self.split,
            layout: Arc::clone(&self.layout),
            coords: self.coords.iter().map(|p| [c(p[0]), c(p[1])]).collect(),
            masks: self.masks.clone(),
            ground_truth: self.ground_truth,
            availability: self.availability,
        }
    }
}

/// All records of one source, with the structures it annotates for training.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterDataset<T> {
    pub center_id: String,
    pub availability: LabelAvailability,
    pub records: Vec<SampleRecord<T>>,
}

impl<T: Scalar> CenterDataset<T> {
    pub fn new(center_id: impl Into<String>, availability: LabelAvailability, records: Vec<SampleRecord<T>>) -> Result<Self> {
        let center_id = center_id.into();
        for r in &records {
            if !r.availability().is_subset(availability) {
                return Err(Error::Data(format!(
                    "{}: record availability {} exceeds center {center_id} availability {availability}",
                    r.sample_id,
                    r.availability()
                )));
            }
        }
        Ok(Self { center_id, availability, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord<T>> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Structures with ground truth on every record.
    pub fn ground_truth(&self) -> LabelAvailability {
        self.records.iter().fold(LabelAvailability::all(), |acc, r| acc.intersection(r.ground_truth()))
    }

    pub fn cast<U: Scalar>(&self) -> CenterDataset<U> {
        CenterDataset {
            center_id: self.center_id.clone(),
            availability: self.availability,
            records: self.records.iter().map(SampleRecord::cast).collect(),
        }
    }
}

/// Drops `structure` from the training availability of a center. Ground
/// truth stays attached for evaluation.
pub fn remove_labels<T: Scalar>(dataset: &CenterDataset<T>, structure: Structure) -> Result<CenterDataset<T>> {
    if !dataset.availability.contains(structure) {
        return Err(Error::Data(format!("{structure} is not available in {}", dataset.center_id)));
    }
    let availability = dataset.availability.without(structure);
    Ok(CenterDataset {
        center_id: dataset.center_id.clone(),
        availability,
        records: dataset
            .records
            .iter()
            .map(|r| {
                let a = r.availability().without(structure);
                r.clone().with_availability(a)
            })
            .collect(),
    })
}

/// Centers sharing one contour topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    pub topology: Arc<ContourTopology>,
    pub centers: Vec<CenterDataset<T>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn center(&self, id: &str) -> Option<&CenterDataset<T>> {
        self.centers.iter().find(|c| c.center_id == id)
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.centers.iter().flat_map(|c| c.records.first()).map(|r| r.image.dims()).next()
    }

    pub fn cast<U: Scalar>(&self) -> Corpus<U> {
        Corpus { topology: Arc::clone(&self.topology), centers: self.centers.iter().map(CenterDataset::cast).collect() }
    }
}
