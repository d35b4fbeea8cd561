//! Latent collection, 2-D embedding and center-separability scoring.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::ContourTopology;
use crate::data::{lung_bbox_area, normalize_organ_scale, CenterDataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::models::Model;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub sample_id: String,
    pub center_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedMethod {
    #[serde(rename = "pca")]
    Pca,
    /// Coordinates produced by an outside reducer (see [`read_external_embedding`]).
    #[serde(rename = "external")]
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingResult {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub method: EmbedMethod,
    /// Silhouette of the full-dimension latents; independent of the reducer.
    pub separability: f64,
}

fn records_latents<T: Scalar>(model: &Model<T>, records: &[SampleRecord<T>]) -> Result<Vec<LatentRecord>> {
    let images: Vec<&Grid<T>> = records.iter().map(|r| &r.image).collect();
    let vectors = model.latents(&images)?;
    Ok(records
        .iter()
        .zip(vectors)
        .map(|(r, v)| LatentRecord {
            sample_id: r.sample_id.clone(),
            center_id: r.center_id.clone(),
            vector: v.iter().map(|x| x.to_f64().unwrap()).collect(),
        })
        .collect())
}

fn check_sizes<T: Scalar>(model: &Model<T>, records: &[SampleRecord<T>]) -> Result<()> {
    let s = model.input_size();
    match records.iter().find(|r| r.image.dims() != (s, s)) {
        Some(r) => Err(Error::Shape(format!("{}: image size differs from the model input {s}x{s}", r.sample_id))),
        None => Ok(()),
    }
}

/// One latent per `split` record of every center, in center order.
pub fn collect_latents<T: Scalar>(model: &Model<T>, centers: &[CenterDataset<T>], split: Split) -> Result<Vec<LatentRecord>> {
    let records: Vec<SampleRecord<T>> = centers.iter().flat_map(|c| c.in_split(split).cloned()).collect();
    check_sizes(model, &records)?;
    records_latents(model, &records)
}

/// Latents after rescaling every record to the same lung bounding-box area.
pub fn rescaled_latents<T: Scalar>(
    model: &Model<T>,
    centers: &[CenterDataset<T>],
    topology: &ContourTopology,
    target_area: f64,
    split: Split,
) -> Result<Vec<LatentRecord>> {
    let records = centers
        .iter()
        .flat_map(|c| c.in_split(split))
        .map(|r| normalize_organ_scale(r, topology, target_area))
        .collect::<Result<Vec<_>>>()?;
    check_sizes(model, &records)?;
    records_latents(model, &records)
}

/// Mean lung bounding-box area over every record, the default rescaling target.
pub fn mean_lung_bbox_area<T: Scalar>(centers: &[CenterDataset<T>]) -> Result<f64> {
    let areas = centers.iter().flat_map(|c| &c.records).map(lung_bbox_area).collect::<Result<Vec<_>>>()?;
    if areas.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    Ok(areas.iter().sum::<f64>() / areas.len() as f64)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with unit eigenvectors as columns
/// of the row-major `n x n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + col] = v[k * n + i];
        }
    }
    (values, vecs)
}

/// Projection of mean-centered vectors onto the two leading principal axes,
/// plus all eigenvalues of the covariance `X^T X / N` (descending).
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    if vectors.len() < 3 {
        return Err(Error::InvalidInput(format!("embedding needs at least 3 vectors, got {}", vectors.len())));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embedding needs equal-length vectors of dimension >= 2".into()));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| vectors.iter().map(|v| v[k]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for v in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += v[i] * v[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let (values, vecs) = symmetric_eigen(&cov, d);
    let points = centered
        .iter()
        .map(|v| {
            let mut p = [0.0; 2];
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (0..d).map(|k| v[k] * vecs[k * d + c]).sum();
            }
            p
        })
        .collect();
    Ok((points, values))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
pub fn silhouette<L: PartialEq + Sync>(vectors: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::Shape("one label per vector expected".into()));
    }
    let mut groups: Vec<&L> = Vec::new();
    for l in labels {
        if !groups.contains(&l) {
            groups.push(l);
        }
    }
    if groups.len() < 2 {
        return Err(Error::InvalidInput("silhouette needs at least two labels".into()));
    }
    let ids: Vec<usize> = labels.iter().map(|l| groups.iter().position(|g| *g == l).unwrap()).collect();
    let mut counts = vec![0usize; groups.len()];
    for &g in &ids {
        counts[g] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::InvalidInput("every label needs at least two members".into()));
    }
    let scores: Vec<f64> = (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0; groups.len()];
            for (j, v) in vectors.iter().enumerate() {
                if j != i {
                    sums[ids[j]] += euclid(&vectors[i], v);
                }
            }
            let own = ids[i];
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..groups.len())
                .filter(|&g| g != own)
                .map(|g| sums[g] / counts[g] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Center-label silhouette of latent records.
pub fn cluster_score(records: &[LatentRecord]) -> Result<f64> {
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let labels: Vec<&str> = records.iter().map(|r| r.center_id.as_str()).collect();
    silhouette(&vectors, &labels)
}

/// PCA embedding; for [`EmbedMethod::External`] use
/// [`read_external_embedding`] instead.
pub fn embed_2d(records: &[LatentRecord], method: EmbedMethod) -> Result<EmbeddingResult> {
    if method == EmbedMethod::External {
        return Err(Error::Config("external embeddings are read with read_external_embedding".into()));
    }
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let (points, _) = pca_2d(&vectors)?;
    Ok(EmbeddingResult {
        points,
        labels: records.iter().map(|r| r.center_id.clone()).collect(),
        method,
        separability: cluster_score(records)?,
    })
}

/// `id,center,v0..vk` rows.
pub fn write_latents_csv<W: Write>(records: &[LatentRecord], mut w: W) -> Result<()> {
    let k = records.first().map_or(0, |r| r.vector.len());
    write!(w, "id,center")?;
    for i in 0..k {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for r in records {
        write!(w, "{},{}", r.sample_id, r.center_id)?;
        for v in &r.vector {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `id,center,x,y` rows.
pub fn write_embedding_csv<W: Write>(records: &[LatentRecord], emb: &EmbeddingResult, mut w: W) -> Result<()> {
    writeln!(w, "id,center,x,y")?;
    for (r, p) in records.iter().zip(&emb.points) {
        writeln!(w, "{},{},{},{}", r.sample_id, r.center_id, p[0], p[1])?;
    }
    Ok(())
}

/// Reads an `N x 2` CSV (`x,y` columns, optional header) written by an
/// outside reducer for `records`, in the same order.
pub fn read_external_embedding<R: Read>(records: &[LatentRecord], input: R) -> Result<EmbeddingResult> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::InvalidInput(format!("external embedding: {e}")))?;
        let n = rec.len();
        if n < 2 {
            return Err(Error::InvalidInput("external embedding rows need two columns".into()));
        }
        match (rec[n - 2].trim().parse::<f64>(), rec[n - 1].trim().parse::<f64>()) {
            (Ok(x), Ok(y)) => points.push([x, y]),
            _ if points.is_empty() => continue,
            _ => return Err(Error::InvalidInput(format!("external embedding: bad row {:?}", rec))),
        }
    }
    if points.len() != records.len() {
        return Err(Error::Shape(format!("{} embedded points for {} records", points.len(), records.len())));
    }
    Ok(EmbeddingResult {
        points,
        labels: records.iter().map(|r| r.center_id.clone()).collect(),
        method: EmbedMethod::External,
        separability: cluster_score(records)?,
    })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Scatter plot colored by center, with a legend.
pub fn scatter_svg(emb: &EmbeddingResult, title: &str) -> String {
    let (w, h, m) = (480.0, 420.0, 30.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &emb.points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let sx = if x1 > x0 { (w - 2.0 * m - 120.0) / (x1 - x0) } else { 1.0 };
    let sy = if y1 > y0 { (h - 2.0 * m) / (y1 - y0) } else { 1.0 };
    let mut labels: Vec<&str> = Vec::new();
    for l in &emb.labels {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{m}" y="18">{title} (silhouette {:.3})</text>"#, emb.separability);
    for (p, l) in emb.points.iter().zip(&emb.labels) {
        let c = PALETTE[labels.iter().position(|x| x == l).unwrap() % PALETTE.len()];
        let cx = m + (p[0] - x0) * sx;
        let cy = h - m - (p[1] - y0) * sy;
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{c}" fill-opacity="0.75"/>"#);
    }
    for (i, l) in labels.iter().enumerate() {
        let y = m + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="{}" cy="{y}" r="4" fill="{c}"/><text x="{}" y="{}">{l}</text>"#, w - 120.0, w - 110.0, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_silhouette(v: &[Vec<f64>], l: &[usize]) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut total = 0.0;
        for i in 0..v.len() {
            let mut best = f64::INFINITY;
            let mut a = 0.0;
            let mut labels: Vec<usize> = l.to_vec();
            labels.sort_unstable();
            labels.dedup();
            for &g in &labels {
                let others: Vec<usize> = (0..v.len()).filter(|&j| l[j] == g && j != i).collect();
                let mean = others.iter().map(|&j| d(&v[i], &v[j])).sum::<f64>() / others.len() as f64;
                if g == l[i] {
                    a = mean;
                } else {
                    best = best.min(mean);
                }
            }
            total += if a.max(best) > 0.0 { (best - a) / a.max(best) } else { 0.0 };
        }
        total / v.len() as f64
    }

    #[test]
    fn silhouette_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v = Vec::new();
        let mut l = Vec::new();
        for c in 0..2 {
            for _ in 0..20 {
                v.push(vec![100.0 * c as f64 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
                l.push(c);
            }
        }
        let s = silhouette(&v, &l).unwrap();
        assert!(s > 0.9);
        assert!((s - brute_silhouette(&v, &l)).abs() < 1e-12);
        assert!(silhouette(&v, &vec![0; 40]).is_err());
        let mut one = l.clone();
        one[0] = 7;
        assert!(silhouette(&v, &one).is_err());
    }

    #[test]
    fn permuted_labels_on_one_blob_score_near_zero() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
            let mut l: Vec<usize> = (0..100).map(|i| i % 2).collect();
            rand::seq::SliceRandom::shuffle(l.as_mut_slice(), &mut rng);
            assert!(silhouette(&v, &l).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn pca_examples() {
        let line: Vec<Vec<f64>> = (0..20).map(|i| (0..10).map(|k| i as f64 * (k as f64 + 1.0)).collect()).collect();
        let (p, ev) = pca_2d(&line).unwrap();
        let var2 = p.iter().map(|q| q[1] * q[1]).sum::<f64>() / 20.0;
        assert!(var2 < 1e-9 * ev[0]);
        let same = vec![vec![1.0, 2.0, 3.0]; 5];
        let (p, _) = pca_2d(&same).unwrap();
        assert!(p.iter().all(|q| q[0].abs() < 1e-12 && q[1].abs() < 1e-12));
        assert!(pca_2d(&same[..2]).is_err());
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|k| rng.random_range(-1.0..1.0) * (k + 1) as f64).collect()).collect();
        let (points, ev) = pca_2d(&x).unwrap();
        let mean: Vec<f64> = (0..8).map(|k| x.iter().map(|v| v[k]).sum::<f64>() / 50.0).collect();
        let m = nalgebra::DMatrix::from_fn(50, 8, |i, k| x[i][k] - mean[k]);
        let cov = m.transpose() * &m / 50.0;
        let mut oracle: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in ev.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        // Residual energy after the 2-D projection equals the trailing eigenvalues.
        let total: f64 = m.iter().map(|v| v * v).sum::<f64>() / 50.0;
        let kept: f64 = points.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / 50.0;
        assert!((total - kept - oracle[2..].iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn external_hook_round_trip() {
        let recs: Vec<LatentRecord> = (0..4)
            .map(|i| LatentRecord { sample_id: format!("s{i}"), center_id: format!("C{}", i % 2), vector: vec![i as f64, 1.0] })
            .collect();
        let e = read_external_embedding(&recs, "x,y\n0,1\n1,2\n2,3\n3,4\n".as_bytes()).unwrap();
        assert_eq!(e.points[3], [3.0, 4.0]);
        assert!(read_external_embedding(&recs, "0,1\n".as_bytes()).is_err());
        assert!(scatter_svg(&e, "t").contains("<circle"));
    }
}
