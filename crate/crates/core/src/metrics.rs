//! Evaluation metrics and the per-structure report table.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::anatomy::{LandmarkSet, Structure, StructureLayout};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::models::PixelMode;
use crate::raster::StructureMasks;
use crate::Scalar;

/// `2 |a ∩ b| / (|a| + |b|)`, and 1 when both maps are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b, "dice")?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background or
/// outside the frame.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    Grid::from_fn(h, w, |i, j| {
        if !*mask.get(i, j) {
            return false;
        }
        i == 0 || j == 0 || i + 1 == h || j + 1 == w || !mask.get(i - 1, j) || !mask.get(i + 1, j) || !mask.get(i, j - 1) || !mask.get(i, j + 1)
    })
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the first parabola.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(mask: &BinaryMask) -> Grid<f64> {
    let (h, w) = mask.dims();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid = mask.map(|&b| if b { 0.0 } else { FAR });
    for j in 0..w {
        for i in 0..h {
            f[i] = *grid.get(i, j);
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for i in 0..h {
            grid.set(i, j, d[i]);
        }
    }
    for i in 0..h {
        f[..w].copy_from_slice(&grid.data()[i * w..(i + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid.data_mut()[i * w..(i + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

fn directed(from: &BinaryMask, to_dt: &Grid<f64>) -> f64 {
    from.data()
        .iter()
        .zip(to_dt.data())
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels between the boundaries of two
/// masks. `None` when either mask is empty.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    a.check_dims(b, "hausdorff")?;
    if a.is_empty_mask() || b.is_empty_mask() {
        return Ok(None);
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_transform(&ba), squared_distance_transform(&bb));
    Ok(Some(directed(&ba, &db).max(directed(&bb, &da))))
}

/// Mean squared coordinate error of one structure in pixel units, averaged
/// over both coordinates of every node.
pub fn landmark_mse<T: Scalar>(
    pred: &LandmarkSet<T>,
    gt: &LandmarkSet<T>,
    structure: Structure,
    height: usize,
    width: usize,
) -> Result<T> {
    if pred.layout() != gt.layout() {
        return Err(Error::Shape("prediction and ground truth use different layouts".into()));
    }
    let (p, g) = match (pred.rows(structure), gt.rows(structure)) {
        (Some(p), Some(g)) => (p, g),
        _ => return Err(Error::StructureNotInLayout(structure)),
    };
    landmark_mse_rows(p, g, height, width)
}

pub(crate) fn landmark_mse_rows<T: Scalar>(p: &[[T; 2]], g: &[[T; 2]], height: usize, width: usize) -> Result<T> {
    if p.len() != g.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth rows", p.len(), g.len())));
    }
    let (hf, wf) = (T::from_usize(height).unwrap(), T::from_usize(width).unwrap());
    let mut sum = T::zero();
    for (a, b) in p.iter().zip(g) {
        let dx = (a[0] - b[0]) * wf;
        let dy = (a[1] - b[1]) * hf;
        sum += dx * dx + dy * dy;
    }
    Ok(sum / T::from_usize(2 * p.len()).unwrap())
}

/// Thresholds multi-label probabilities at 0.5 (inclusive) or takes the
/// per-pixel argmax of multiclass logits, dropping the background channel.
pub fn decode_pixel_prediction<T: Scalar>(
    scores: &[Grid<T>],
    mode: PixelMode,
    layout: &StructureLayout,
) -> Result<StructureMasks> {
    let k = layout.num_structures();
    let expected = match mode {
        PixelMode::Multiclass => k + 1,
        PixelMode::MultilabelHt => k,
    };
    if scores.len() != expected {
        return Err(Error::Shape(format!("{mode:?} over {k} structures needs {expected} channels, got {}", scores.len())));
    }
    let (h, w) = scores[0].dims();
    for s in scores {
        if s.dims() != (h, w) {
            return Err(Error::Shape("score channels differ in size".into()));
        }
    }
    let maps = match mode {
        PixelMode::MultilabelHt => {
            let half = T::lit(0.5);
            layout.structures().zip(scores).map(|(s, g)| (s, g.map(|&p| p >= half))).collect()
        }
        PixelMode::Multiclass => {
            let labels: Vec<usize> = (0..h * w)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..scores.len() {
                        if scores[c].data()[px] > scores[best].data()[px] {
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            layout
                .structures()
                .enumerate()
                .map(|(i, s)| (s, Grid::from_vec(h, w, labels.iter().map(|&l| l == i + 1).collect()).unwrap()))
                .collect()
        }
    };
    Ok(StructureMasks::new(maps))
}

/// One row of a results table. Missing values mirror "-" cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub setting: String,
    pub center: String,
    pub structure: Structure,
    pub mse: Option<f64>,
    pub dice: Option<f64>,
    pub hd: Option<f64>,
    /// Removal experiment the row belongs to, if any.
    pub experiment: Option<String>,
    /// The structure was hidden from this center during training.
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: [&str; 7] = ["model", "setting", "center", "structure", "mse", "dice", "hd"];
pub const REMOVAL_HEADER: [&str; 9] = ["model", "setting", "center", "structure", "mse", "dice", "hd", "experiment", "removed"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::InvalidInput(format!("bad numeric cell {s:?}")))
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn find(&self, center: &str, structure: Structure) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.center == center && r.structure == structure)
    }

    fn has_removal_columns(&self) -> bool {
        self.rows.iter().any(|r| r.experiment.is_some() || r.removed)
    }

    /// `model,setting,center,structure,mse,dice,hd`; removal reports append
    /// `experiment,removed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let extended = self.has_removal_columns();
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        if extended {
            w.write_record(REMOVAL_HEADER).map_err(csv_err)?;
        } else {
            w.write_record(REPORT_HEADER).map_err(csv_err)?;
        }
        for r in &self.rows {
            let mut rec = vec![
                r.model.clone(),
                r.setting.clone(),
                r.center.clone(),
                r.structure.name().to_string(),
                cell(r.mse),
                cell(r.dice),
                cell(r.hd),
            ];
            if extended {
                rec.push(r.experiment.clone().unwrap_or_default());
                rec.push(if r.removed { "1".into() } else { "0".into() });
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf8 csv")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("report csv: {e}"));
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.len() < 7 || header[..7] != REPORT_HEADER {
            return Err(Error::InvalidInput(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            rows.push(MetricRow {
                model: rec[0].to_string(),
                setting: rec[1].to_string(),
                center: rec[2].to_string(),
                structure: rec[3].parse()?,
                mse: parse_cell(&rec[4])?,
                dice: parse_cell(&rec[5])?,
                hd: parse_cell(&rec[6])?,
                experiment: rec.get(7).filter(|s| !s.is_empty()).map(str::to_string),
                removed: rec.get(8).is_some_and(|s| s == "1"),
            });
        }
        Ok(Self { rows })
    }

    /// Wide table: one line per (model, setting, experiment), one column
    /// group per (center, structure). Removed cells are marked with `*`.
    pub fn to_markdown(&self) -> String {
        let mut columns: Vec<(String, Structure)> = Vec::new();
        let mut lines: Vec<(String, String, String)> = Vec::new();
        for r in &self.rows {
            let col = (r.center.clone(), r.structure);
            if !columns.contains(&col) {
                columns.push(col);
            }
            let line = (r.model.clone(), r.setting.clone(), r.experiment.clone().unwrap_or_default());
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
        let with_exp = lines.iter().any(|l| !l.2.is_empty());
        let mut out = String::new();
        let _ = write!(out, "| Model | Trained in |");
        if with_exp {
            let _ = write!(out, " Exp |");
        }
        for (c, s) in &columns {
            let _ = write!(out, " {c} {} MSE | {c} {} Dice | {c} {} HD |", s.name(), s.name(), s.name());
        }
        out.push('\n');
        let ncols = 2 + with_exp as usize + 3 * columns.len();
        out.push('|');
        for _ in 0..ncols {
            out.push_str("---|");
        }
        out.push('\n');
        let fmt = |v: Option<f64>, digits: usize| v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into());
        for (model, setting, exp) in &lines {
            let _ = write!(out, "| {model} | {setting} |");
            if with_exp {
                let _ = write!(out, " {exp} |");
            }
            for (c, s) in &columns {
                let row = self.rows.iter().find(|r| {
                    &r.model == model
                        && &r.setting == setting
                        && r.experiment.clone().unwrap_or_default() == *exp
                        && &r.center == c
                        && r.structure == *s
                });
                match row {
                    Some(r) => {
                        let mark = if r.removed { "*" } else { "" };
                        let _ = write!(out, " {}{mark} | {}{mark} | {}{mark} |", fmt(r.mse, 1), fmt(r.dice, 3), fmt(r.hd, 1));
                    }
                    None => out.push_str(" - | - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::build_layout;
    use std::sync::Arc;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::filled(h, w, false);
        for &(i, j) in on {
            m.set(i, j, true);
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (2, 2), (2, 3)]);
        assert_eq!(dice(&a, &c).unwrap(), 0.5);
        let e = mask(4, 4, &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &mask(3, 4, &[])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(6, 6, &[(0, 0)]);
        let b = mask(6, 6, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
        let blob = mask(6, 6, &[(1, 1), (1, 2), (2, 1), (2, 2), (3, 3)]);
        assert_eq!(hausdorff(&blob, &blob).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&blob, &mask(6, 6, &[])).unwrap(), None);
    }

    #[test]
    fn boundary_of_filled_square_is_its_ring() {
        let on: Vec<_> = (1..5).flat_map(|i| (1..5).map(move |j| (i, j))).collect();
        let b = boundary(&mask(6, 6, &on));
        assert_eq!(b.count(), 12);
        assert!(!b.get(2, 2) && !b.get(3, 3));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let m = mask(7, 5, &[(0, 4), (6, 0), (3, 2)]);
        let dt = squared_distance_transform(&m);
        for i in 0..7 {
            for j in 0..5 {
                let want = [(0, 4), (6, 0), (3, 2)]
                    .iter()
                    .map(|&(a, b): &(i32, i32)| ((i as i32 - a).pow(2) + (j as i32 - b).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(*dt.get(i, j), want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn landmark_mse_examples() {
        let layout = Arc::new(build_layout(&[("L", 3), ("H", 2)]).unwrap());
        let gt = LandmarkSet::new(Arc::clone(&layout), vec![[0.5, 0.5]; 5]).unwrap();
        assert_eq!(landmark_mse(&gt, &gt, Structure::Lungs, 64, 64).unwrap(), 0.0);
        let shifted = gt.map_coords(|c| [c[0] + 3.0 / 64.0, c[1] + 4.0 / 64.0]);
        let v: f64 = landmark_mse(&shifted, &gt, Structure::Heart, 64, 64).unwrap();
        assert!((v - 12.5).abs() < 1e-9);
        let v2: f64 = landmark_mse(&shifted, &gt, Structure::Heart, 128, 128).unwrap();
        assert!((v2 - 4.0 * v).abs() < 1e-9);
        assert!(landmark_mse(&gt, &gt, Structure::Clavicles, 64, 64).is_err());
    }

    #[test]
    fn decode_examples() {
        let layout = build_layout(&[("L", 3)]).unwrap();
        let ht = decode_pixel_prediction(&[Grid::filled(2, 2, 0.6f64)], PixelMode::MultilabelHt, &layout).unwrap();
        assert_eq!(ht.get(Structure::Lungs).unwrap().count(), 4);
        let tie = decode_pixel_prediction(&[Grid::filled(2, 2, 0.5f64)], PixelMode::MultilabelHt, &layout).unwrap();
        assert_eq!(tie.get(Structure::Lungs).unwrap().count(), 4);
        let mc = decode_pixel_prediction(
            &[Grid::filled(2, 2, 3.0f64), Grid::filled(2, 2, -1.0)],
            PixelMode::Multiclass,
            &layout,
        )
        .unwrap();
        assert_eq!(mc.get(Structure::Lungs).unwrap().count(), 0);
        assert!(decode_pixel_prediction(&[Grid::filled(2, 2, 0.0f64)], PixelMode::Multiclass, &layout).is_err());
    }

    #[test]
    fn csv_header_and_missing_cells() {
        let mut r = MetricReport::new();
        r.push(MetricRow {
            model: "unet".into(),
            setting: "LHC_full".into(),
            center: "JSRT".into(),
            structure: Structure::Heart,
            mse: None,
            dice: Some(0.5),
            hd: Some(3.0),
            experiment: None,
            removed: false,
        });
        let s = r.to_csv_string();
        assert_eq!(s, "model,setting,center,structure,mse,dice,hd\nunet,LHC_full,JSRT,HEART,,0.5,3\n");
        assert_eq!(MetricReport::read_csv(s.as_bytes()).unwrap(), r);
        assert!(r.to_markdown().contains("| unet | LHC_full |"));
    }
}
