//! Even-odd polygon filling of landmark contours.
//!
//! Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)` in pixel
//! space, and normalized coordinates map to pixel space by scaling with the
//! image width and height. A pixel is inside when an odd number of polygon
//! edges cross its row at or to the left of its center, where an edge covers
//! the half-open vertical span `[y_min, y_max)`. Centers on a left or top
//! boundary are therefore inside, centers on a right or bottom boundary are
//! not.

use crate::anatomy::{ContourTopology, LandmarkSet, Structure};
use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::Scalar;

/// Independent binary map per structure (overlaps allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMasks {
    maps: Vec<(Structure, BinaryMask)>,
}

impl StructureMasks {
    pub fn new(maps: Vec<(Structure, BinaryMask)>) -> Self {
        Self { maps }
    }

    pub fn get(&self, s: Structure) -> Option<&BinaryMask> {
        self.maps.iter().find(|(t, _)| *t == s).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Structure, &BinaryMask)> {
        self.maps.iter().map(|(s, m)| (*s, m))
    }

    pub fn structures(&self) -> impl Iterator<Item = Structure> + '_ {
        self.maps.iter().map(|(s, _)| *s)
    }

    pub fn into_inner(self) -> Vec<(Structure, BinaryMask)> {
        self.maps
    }
}

/// Row crossing of edge `a -> b` at height `y`, if the edge spans it.
#[inline]
fn crossing<T: Scalar>(a: [T; 2], b: [T; 2], y: T) -> Option<T> {
    if (a[1] <= y) != (b[1] <= y) {
        Some(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]))
    } else {
        None
    }
}

/// Scanline fill of one closed polygon given in pixel coordinates, OR-ed
/// into `mask`.
pub fn fill_polygon_into<T: Scalar>(vertices: &[[T; 2]], mask: &mut BinaryMask) {
    let (h, w) = mask.dims();
    let n = vertices.len();
    if n < 3 {
        return;
    }
    let half = T::lit(0.5);
    let mut xs: Vec<T> = Vec::with_capacity(n);
    for row in 0..h {
        let yc = T::from_usize(row).unwrap() + half;
        xs.clear();
        for k in 0..n {
            if let Some(x) = crossing(vertices[k], vertices[(k + 1) % n], yc) {
                xs.push(x);
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        let mut passed = 0;
        for col in 0..w {
            let xc = T::from_usize(col).unwrap() + half;
            while passed < xs.len() && xs[passed] <= xc {
                passed += 1;
            }
            if passed == xs.len() {
                break;
            }
            if passed % 2 == 1 {
                mask.set(row, col, true);
            }
        }
    }
}

pub fn fill_polygon<T: Scalar>(vertices: &[[T; 2]], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::filled(height, width, false);
    fill_polygon_into(vertices, &mut mask);
    mask
}

/// Normalized coordinates to clipped pixel coordinates.
pub fn to_pixel_space<T: Scalar>(coords: &[[T; 2]], height: usize, width: usize) -> Vec<[T; 2]> {
    let (hf, wf) = (T::from_usize(height).unwrap(), T::from_usize(width).unwrap());
    coords
        .iter()
        .map(|c| [(c[0] * wf).max(T::zero()).min(wf), (c[1] * hf).max(T::zero()).min(hf)])
        .collect()
}

/// Fills the polylines of one structure. `coords` covers the whole layout in
/// normalized units; rows of other structures are not read.
pub fn fill_structure<T: Scalar>(
    coords: &[[T; 2]],
    topology: &ContourTopology,
    structure: Structure,
    height: usize,
    width: usize,
) -> Result<BinaryMask> {
    let mut mask = BinaryMask::filled(height, width, false);
    for line in topology.polylines(structure) {
        if line.len() < 3 {
            return Err(Error::Topology(format!("polyline of {structure} has fewer than 3 nodes")));
        }
        let verts: Vec<[T; 2]> = line.iter().map(|&i| coords[i]).collect();
        fill_polygon_into(&to_pixel_space(&verts, height, width), &mut mask);
    }
    Ok(mask)
}

/// Rasterizes every structure of `landmarks` by filling its closed polylines.
pub fn fill_contours<T: Scalar>(
    landmarks: &LandmarkSet<T>,
    topology: &ContourTopology,
    height: usize,
    width: usize,
) -> Result<StructureMasks> {
    if landmarks.layout().as_ref() != topology.layout().as_ref() {
        return Err(Error::Shape("landmark layout differs from topology layout".into()));
    }
    let maps = landmarks
        .layout()
        .structures()
        .map(|s| Ok((s, fill_structure(landmarks.coords(), topology, s, height, width)?)))
        .collect::<Result<_>>()?;
    Ok(StructureMasks::new(maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::build_layout;
    use std::sync::Arc;

    #[test]
    fn square_covers_nine_pixels() {
        let sq = [[1.0, 1.0], [1.0, 4.0], [4.0, 4.0], [4.0, 1.0]];
        let m = fill_polygon(&sq, 6, 6);
        assert_eq!(m.count(), 9);
        for r in 1..4 {
            for c in 1..4 {
                assert!(*m.get(r, c));
            }
        }
    }

    #[test]
    fn top_left_boundary_centers_are_inside() {
        // Edges pass exactly through pixel centers at x = 1.5 and y = 1.5.
        let sq = [[1.5, 1.5], [3.5, 1.5], [3.5, 3.5], [1.5, 3.5]];
        let m = fill_polygon(&sq, 5, 5);
        let inside: Vec<(usize, usize)> =
            (0..5).flat_map(|r| (0..5).map(move |c| (r, c))).filter(|&(r, c)| *m.get(r, c)).collect();
        assert_eq!(inside, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn collapsed_polygon_is_empty() {
        let pt = [[2.2, 2.2]; 5];
        assert_eq!(fill_polygon(&pt, 6, 6).count(), 0);
    }

    #[test]
    fn overlapping_structures_both_fill() {
        let layout = Arc::new(build_layout(&[("L", 4), ("H", 4)]).unwrap());
        let topo = ContourTopology::single_cycles(Arc::clone(&layout)).unwrap();
        let big = [[0.1, 0.1], [0.9, 0.1], [0.9, 0.9], [0.1, 0.9]];
        let small = [[0.3, 0.3], [0.6, 0.3], [0.6, 0.6], [0.3, 0.6]];
        let lm = LandmarkSet::new(layout, big.iter().chain(&small).copied().collect()).unwrap();
        let masks = fill_contours(&lm, &topo, 10, 10).unwrap();
        let (l, h) = (masks.get(Structure::Lungs).unwrap(), masks.get(Structure::Heart).unwrap());
        assert!(h.count() > 0);
        for (a, b) in l.data().iter().zip(h.data()) {
            assert!(!*b || *a, "heart pixel missing from the lung map");
        }
    }

    #[test]
    fn coordinates_are_clipped_to_frame() {
        let sq = [[-1.0, -1.0], [2.0, -1.0], [2.0, 2.0], [-1.0, 2.0]];
        let px = to_pixel_space(&sq, 4, 4);
        assert_eq!(fill_polygon(&px, 4, 4).count(), 16);
    }
}
