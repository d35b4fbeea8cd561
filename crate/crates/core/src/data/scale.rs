use crate::anatomy::{ContourTopology, Structure};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::raster::fill_structure;
use crate::Scalar;

use super::SampleRecord;

/// Area of the bounding box of all lung landmarks, normalized units.
pub fn lung_bbox_area<T: Scalar>(record: &SampleRecord<T>) -> Result<f64> {
    let rows = record
        .gt_rows(Structure::Lungs)
        .ok_or_else(|| Error::Data(format!("{}: no lung ground truth", record.sample_id)))?;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in rows {
        let (x, y) = (r[0].to_f64().unwrap(), r[1].to_f64().unwrap());
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok((x1 - x0) * (y1 - y0))
}

fn bilinear<T: Scalar>(img: &Grid<T>, y: f64, x: f64) -> T {
    let (h, w) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (i0, j0) = (y.floor() as usize, x.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
    let (fy, fx) = (T::lit(y - i0 as f64), T::lit(x - j0 as f64));
    let one = T::one();
    let top = *img.get(i0, j0) * (one - fx) + *img.get(i0, j1) * fx;
    let bottom = *img.get(i1, j0) * (one - fx) + *img.get(i1, j1) * fx;
    top * (one - fy) + bottom * fy
}

/// Scales a record about the image center so that its lung bounding box has
/// `target_area` (normalized units). The image is bilinearly resampled with
/// edge clamping, landmarks are transformed with the same map and masks are
/// re-rasterized from them.
pub fn normalize_organ_scale<T: Scalar>(
    record: &SampleRecord<T>,
    topology: &ContourTopology,
    target_area: f64,
) -> Result<SampleRecord<T>> {
    if !(target_area > 0.0) {
        return Err(Error::Config(format!("target area {target_area} must be positive")));
    }
    let area = lung_bbox_area(record)?;
    if area <= 1e-12 {
        return Err(Error::Data(format!("{}: degenerate lung bounding box", record.sample_id)));
    }
    let s = (target_area / area).sqrt();
    let half = T::lit(0.5);
    let st = T::lit(s);
    let coords: Vec<[T; 2]> = record
        .raw_coords()
        .iter()
        .map(|c| [half + (c[0] - half) * st, half + (c[1] - half) * st])
        .collect();
    let (h, w) = record.image.dims();
    let image = Grid::from_fn(h, w, |i, j| {
        let py = 0.5 + ((i as f64 + 0.5) / h as f64 - 0.5) / s;
        let px = 0.5 + ((j as f64 + 0.5) / w as f64 - 0.5) / s;
        bilinear(&record.image, py * h as f64 - 0.5, px * w as f64 - 0.5)
    });
    let masks = record
        .layout()
        .structures()
        .map(|st| {
            if record.ground_truth().contains(st) {
                fill_structure(&coords, topology, st, h, w).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = record.clone();
    out.replace_geometry(image, coords, masks);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::default_synthetic_topology;
    use crate::data::{default_synthetic_specs, generate_synthetic_centers};
    use std::sync::Arc;

    #[test]
    fn identity_and_quarter_area() {
        let topo = Arc::new(default_synthetic_topology());
        let mut spec = default_synthetic_specs(2).remove(1);
        spec.n_samples = 3;
        let c = generate_synthetic_centers::<f64>(&[spec], &topo).unwrap().remove(0);
        let r = &c.records[0];
        let a = lung_bbox_area(r).unwrap();
        let same = normalize_organ_scale(r, &topo, a).unwrap();
        for (x, y) in same.image.data().iter().zip(r.image.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let half = normalize_organ_scale(r, &topo, a / 4.0).unwrap();
        let (p, q) = (r.raw_coords()[0], half.raw_coords()[0]);
        assert!(((q[0] - 0.5) - 0.5 * (p[0] - 0.5)).abs() < 1e-12);
        assert!((lung_bbox_area(&half).unwrap() - a / 4.0).abs() < 1e-12);
        assert!(normalize_organ_scale(r, &topo, 0.0).is_err());
    }
}
