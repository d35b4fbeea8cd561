//! Landmark layout, contour topology and availability masks.
//!
//! A layout orders the landmark rows as lungs, then heart, then clavicles.
//! Every loss and model indexes rows through it, so availability of a
//! structure always translates into a fixed set of row indices.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Structure {
    Lungs,
    Heart,
    Clavicles,
}

impl Structure {
    /// Canonical row order.
    pub const ALL: [Structure; 3] = [Structure::Lungs, Structure::Heart, Structure::Clavicles];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Lungs => "LUNGS",
            Structure::Heart => "HEART",
            Structure::Clavicles => "CLAVICLES",
        }
    }

    pub fn short(self) -> char {
        match self {
            Structure::Lungs => 'L',
            Structure::Heart => 'H',
            Structure::Clavicles => 'C',
        }
    }

    pub fn rank(self) -> usize {
        self as usize
    }

    fn bit(self) -> u8 {
        1 << self.rank()
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LUNGS" | "LUNG" | "L" => Ok(Structure::Lungs),
            "HEART" | "H" => Ok(Structure::Heart),
            "CLAVICLES" | "CLAVICLE" | "C" => Ok(Structure::Clavicles),
            other => Err(Error::InvalidInput(format!("unknown structure id {other:?}"))),
        }
    }
}

/// Set of annotated structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelAvailability(u8);

impl LabelAvailability {
    pub fn new(structures: &[Structure]) -> Self {
        Self(structures.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn all() -> Self {
        Self::new(&Structure::ALL)
    }

    pub fn none() -> Self {
        Self(0)
    }

    pub fn contains(self, s: Structure) -> bool {
        self.0 & s.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn without(self, s: Structure) -> Self {
        Self(self.0 & !s.bit())
    }

    pub fn with(self, s: Structure) -> Self {
        Self(self.0 | s.bit())
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Structure> {
        Structure::ALL.into_iter().filter(move |s| self.contains(*s))
    }

    /// Compact code such as `LH`.
    pub fn code(self) -> String {
        self.iter().map(Structure::short).collect()
    }
}

impl fmt::Display for LabelAvailability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.iter().map(Structure::name).collect::<Vec<_>>().join(","))
    }
}

impl Serialize for LabelAvailability {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LabelAvailability {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        let mut set = LabelAvailability::none();
        for n in names {
            set = set.with(n.parse().map_err(serde::de::Error::custom)?);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub structure: Structure,
    pub node_count: usize,
    pub offset: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.node_count
    }
}

/// Ordered structure blocks of the landmark matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureLayout {
    blocks: Vec<Block>,
    total_nodes: usize,
}

impl StructureLayout {
    /// Blocks are placed in canonical order whatever the input order. Only a
    /// prefix of the canonical order may be present.
    pub fn new(counts: &[(Structure, usize)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Layout("no structures given".into()));
        }
        let mut sorted = counts.to_vec();
        sorted.sort_by_key(|(s, _)| *s);
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Layout(format!("structure {} given twice", pair[0].0)));
            }
        }
        let mut blocks = Vec::with_capacity(sorted.len());
        let mut offset = 0;
        for (i, &(structure, node_count)) in sorted.iter().enumerate() {
            if node_count == 0 {
                return Err(Error::Layout(format!("structure {structure} has zero nodes")));
            }
            if structure != Structure::ALL[i] {
                return Err(Error::Layout(format!(
                    "structures must be a prefix of LUNGS, HEART, CLAVICLES; {} is missing",
                    Structure::ALL[i]
                )));
            }
            blocks.push(Block { structure, node_count, offset });
            offset += node_count;
        }
        Ok(Self { blocks, total_nodes: offset })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total_nodes(&self) -> usize {
        self.total_nodes
    }

    pub fn num_structures(&self) -> usize {
        self.blocks.len()
    }

    pub fn structures(&self) -> impl Iterator<Item = Structure> + '_ {
        self.blocks.iter().map(|b| b.structure)
    }

    pub fn as_availability(&self) -> LabelAvailability {
        LabelAvailability::new(&self.structures().collect::<Vec<_>>())
    }

    pub fn block(&self, s: Structure) -> Option<&Block> {
        self.blocks.iter().find(|b| b.structure == s)
    }

    pub fn range(&self, s: Structure) -> Option<Range<usize>> {
        self.block(s).map(Block::range)
    }

    pub fn structure_of(&self, node: usize) -> Option<Structure> {
        self.blocks.iter().find(|b| b.range().contains(&node)).map(|b| b.structure)
    }

    /// Sub-layout keeping only the structures in `keep` (must remain a prefix).
    pub fn truncated(&self, keep: LabelAvailability) -> Result<Self> {
        let counts: Vec<_> =
            self.blocks.iter().filter(|b| keep.contains(b.structure)).map(|b| (b.structure, b.node_count)).collect();
        Self::new(&counts)
    }
}

/// Builds a layout from textual structure ids and signed counts.
pub fn build_layout<S: AsRef<str>>(node_counts: &[(S, i64)]) -> Result<StructureLayout> {
    let mut parsed = Vec::with_capacity(node_counts.len());
    for (name, count) in node_counts {
        let s: Structure = name.as_ref().parse().map_err(|_| Error::Layout(format!("unknown structure id {:?}", name.as_ref())))?;
        if *count <= 0 {
            return Err(Error::Layout(format!("structure {s} has non-positive node count {count}")));
        }
        parsed.push((s, *count as usize));
    }
    StructureLayout::new(&parsed)
}

/// Per-node inclusion flags: `true` where the node's structure is available.
pub fn availability_mask(layout: &StructureLayout, avail: LabelAvailability) -> Result<Vec<bool>> {
    for s in avail.iter() {
        if layout.block(s).is_none() {
            return Err(Error::StructureNotInLayout(s));
        }
    }
    let mut mask = vec![false; layout.total_nodes()];
    for b in layout.blocks() {
        if avail.contains(b.structure) {
            mask[b.range()].fill(true);
        }
    }
    Ok(mask)
}

/// `D x 2` matrix of normalized `(x, y)` coordinates tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet<T> {
    layout: Arc<StructureLayout>,
    coords: Vec<[T; 2]>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(layout: Arc<StructureLayout>, coords: Vec<[T; 2]>) -> Result<Self> {
        if coords.len() != layout.total_nodes() {
            return Err(Error::Shape(format!(
                "{} landmark rows for a layout of {} nodes",
                coords.len(),
                layout.total_nodes()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidInput(format!("landmark row {i} is not finite")));
        }
        Ok(Self { layout, coords })
    }

    /// From a flat row-major `[x0, y0, x1, y1, ...]` buffer.
    pub fn from_flat(layout: Arc<StructureLayout>, flat: &[T]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape("odd coordinate count".into()));
        }
        Self::new(layout, flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn layout(&self) -> &Arc<StructureLayout> {
        &self.layout
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    pub fn rows(&self, s: Structure) -> Option<&[[T; 2]]> {
        self.layout.range(s).map(|r| &self.coords[r])
    }

    pub fn flat(&self) -> Vec<T> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LandmarkSet<U> {
        LandmarkSet {
            layout: Arc::clone(&self.layout),
            coords: self.coords.iter().map(|c| [U::from(c[0]).unwrap(), U::from(c[1]).unwrap()]).collect(),
        }
    }

    pub fn map_coords(&self, f: impl Fn([T; 2]) -> [T; 2]) -> Self {
        Self { layout: Arc::clone(&self.layout), coords: self.coords.iter().map(|&c| f(c)).collect() }
    }
}

/// Closed contour polylines per structure plus the derived node adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourTopology {
    layout: Arc<StructureLayout>,
    polylines: Vec<(Structure, Vec<Vec<usize>>)>,
    adjacency: Vec<bool>,
}

impl ContourTopology {
    /// Polyline indices are global row indices. Every node of a block must
    /// belong to exactly one polyline of that block.
    pub fn new(layout: Arc<StructureLayout>, polylines: &[(Structure, Vec<Vec<usize>>)]) -> Result<Self> {
        let d = layout.total_nodes();
        let mut seen = vec![false; d];
        let mut adjacency = vec![false; d * d];
        let mut ordered = Vec::new();
        for block in layout.blocks() {
            let lines: Vec<Vec<usize>> = polylines
                .iter()
                .filter(|(s, _)| *s == block.structure)
                .flat_map(|(_, l)| l.iter().cloned())
                .collect();
            if lines.is_empty() {
                return Err(Error::Topology(format!("no polylines for {}", block.structure)));
            }
            for line in &lines {
                if line.len() < 3 {
                    return Err(Error::Topology(format!(
                        "closed polyline of {} needs at least 3 nodes, got {}",
                        block.structure,
                        line.len()
                    )));
                }
                for &n in line {
                    if !block.range().contains(&n) {
                        return Err(Error::Topology(format!(
                            "node {n} lies outside the {} block {:?}; edges may not cross blocks",
                            block.structure,
                            block.range()
                        )));
                    }
                    if std::mem::replace(&mut seen[n], true) {
                        return Err(Error::Topology(format!("node {n} appears in more than one polyline position")));
                    }
                }
                for (k, &a) in line.iter().enumerate() {
                    let b = line[(k + 1) % line.len()];
                    adjacency[a * d + b] = true;
                    adjacency[b * d + a] = true;
                }
            }
            ordered.push((block.structure, lines));
        }
        for s in polylines.iter().map(|(s, _)| *s) {
            if layout.block(s).is_none() {
                return Err(Error::StructureNotInLayout(s));
            }
        }
        if let Some(n) = seen.iter().position(|&v| !v) {
            return Err(Error::Topology(format!("node {n} is not on any polyline")));
        }
        Ok(Self { layout, polylines: ordered, adjacency })
    }

    /// One polyline per block covering its nodes in order.
    pub fn single_cycles(layout: Arc<StructureLayout>) -> Result<Self> {
        let lines: Vec<_> = layout.blocks().iter().map(|b| (b.structure, vec![b.range().collect()])).collect();
        Self::new(layout, &lines)
    }

    pub fn layout(&self) -> &Arc<StructureLayout> {
        &self.layout
    }

    pub fn polylines(&self, s: Structure) -> &[Vec<usize>] {
        self.polylines.iter().find(|(p, _)| *p == s).map(|(_, l)| l.as_slice()).unwrap_or(&[])
    }

    pub fn all_polylines(&self) -> &[(Structure, Vec<Vec<usize>>)] {
        &self.polylines
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.layout.total_nodes() + b]
    }

    /// Dense 0/1 adjacency, row-major.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        let d = self.layout.total_nodes();
        self.adjacency[node * d..(node + 1) * d].iter().filter(|&&v| v).count()
    }

    /// Rescaled Laplacian used by the Chebyshev filters,
    /// `2 L / lambda_max - I` with `L = I - D^-1/2 A D^-1/2` and
    /// `lambda_max = 2`, i.e. `-D^-1/2 A D^-1/2`. Its spectrum lies in `[-1, 1]`.
    pub fn chebyshev_operator<T: Scalar>(&self) -> Vec<T> {
        let d = self.layout.total_nodes();
        let inv_sqrt: Vec<T> = (0..d)
            .map(|i| {
                let deg = self.degree(i);
                if deg == 0 {
                    T::zero()
                } else {
                    T::one() / T::from_usize(deg).unwrap().sqrt()
                }
            })
            .collect();
        let mut op = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                if self.adjacency[i * d + j] {
                    op[i * d + j] = -(inv_sqrt[i] * inv_sqrt[j]);
                }
            }
        }
        op
    }

    /// Node ids relabelled by `perm[old] = new`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let lines: Vec<_> = self
            .polylines
            .iter()
            .map(|(s, ls)| (*s, ls.iter().map(|l| l.iter().map(|&n| perm[n]).collect()).collect()))
            .collect();
        Self::new(Arc::clone(&self.layout), &lines)
    }

    pub fn to_doc(&self) -> TopologyDoc {
        TopologyDoc {
            blocks: self
                .layout
                .blocks()
                .iter()
                .map(|b| BlockDoc {
                    structure: b.structure.name().to_string(),
                    nodes: b.node_count as i64,
                    polylines: self.polylines(b.structure).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &TopologyDoc) -> Result<Self> {
        let counts: Vec<(&str, i64)> = doc.blocks.iter().map(|b| (b.structure.as_str(), b.nodes)).collect();
        let layout = Arc::new(build_layout(&counts)?);
        let mut lines = Vec::new();
        for b in &doc.blocks {
            let s: Structure = b.structure.parse()?;
            lines.push((s, b.polylines.clone()));
        }
        Self::new(layout, &lines)
    }

    /// Restriction to a prefix of the structures (L or LH tasks).
    pub fn truncated(&self, keep: LabelAvailability) -> Result<Self> {
        let layout = Arc::new(self.layout.truncated(keep)?);
        let lines: Vec<_> = self.polylines.iter().filter(|(s, _)| keep.contains(*s)).cloned().collect();
        Self::new(layout, &lines)
    }
}

/// Validated contour graph; see [`ContourTopology::chebyshev_operator`] for
/// the normalized operator consumed by the graph decoder.
pub fn build_contour_adjacency(
    layout: Arc<StructureLayout>,
    polylines: &[(Structure, Vec<Vec<usize>>)],
) -> Result<ContourTopology> {
    ContourTopology::new(layout, polylines)
}

/// JSON form of a layout with its contour polylines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub blocks: Vec<BlockDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDoc {
    pub structure: String,
    pub nodes: i64,
    pub polylines: Vec<Vec<usize>>,
}

/// Node counts of one structure split over consecutive polylines.
fn split_block(offset: usize, sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = offset;
    sizes
        .iter()
        .map(|&n| {
            let line = (start..start + n).collect();
            start += n;
            line
        })
        .collect()
}

/// Topology of the synthetic chest family: two lung contours, one heart
/// contour and two clavicle contours, with the given node count per contour.
pub fn synthetic_topology(lung_nodes: usize, heart_nodes: usize, clavicle_nodes: usize) -> Result<ContourTopology> {
    let layout = Arc::new(StructureLayout::new(&[
        (Structure::Lungs, 2 * lung_nodes),
        (Structure::Heart, heart_nodes),
        (Structure::Clavicles, 2 * clavicle_nodes),
    ])?);
    let l = layout.block(Structure::Lungs).unwrap().offset;
    let h = layout.block(Structure::Heart).unwrap().offset;
    let c = layout.block(Structure::Clavicles).unwrap().offset;
    let lines = vec![
        (Structure::Lungs, split_block(l, &[lung_nodes, lung_nodes])),
        (Structure::Heart, split_block(h, &[heart_nodes])),
        (Structure::Clavicles, split_block(c, &[clavicle_nodes, clavicle_nodes])),
    ];
    ContourTopology::new(layout, &lines)
}

/// Default synthetic topology: 40 lung, 20 heart and 16 clavicle nodes.
pub fn default_synthetic_topology() -> ContourTopology {
    synthetic_topology(20, 20, 8).expect("default topology is valid")
}

/// Distinct structures mentioned by a list, in canonical order.
pub fn canonical(structures: impl IntoIterator<Item = Structure>) -> Vec<Structure> {
    structures.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}
