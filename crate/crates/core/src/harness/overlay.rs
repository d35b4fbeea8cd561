use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::anatomy::{ContourTopology, Structure};
use crate::data::{CenterDataset, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::boundary;
use crate::models::{Model, Prediction};
use crate::raster::to_pixel_space;
use crate::Scalar;

const ZOOM: usize = 4;

pub fn structure_color(s: Structure) -> Rgb<u8> {
    match s {
        Structure::Lungs => Rgb([230, 60, 60]),
        Structure::Heart => Rgb([60, 200, 255]),
        Structure::Clavicles => Rgb([255, 210, 0]),
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a[0] + t * (b[0] - a[0])).round() as i64, (a[1] + t * (b[1] - a[1])).round() as i64, c);
    }
}

/// Input image magnified 4x with the prediction drawn on top: contour
/// polylines for landmark predictions, mask boundaries otherwise.
pub fn render_overlay<T: Scalar>(image: &Grid<T>, pred: &Prediction<T>, topology: &ContourTopology) -> RgbImage {
    let (h, w) = image.dims();
    let mut img = RgbImage::from_fn((w * ZOOM) as u32, (h * ZOOM) as u32, |x, y| {
        let v = image.get(y as usize / ZOOM, x as usize / ZOOM).to_f64().unwrap();
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    match &pred.landmarks {
        Some(lm) => {
            let px = to_pixel_space(lm.coords(), h * ZOOM, w * ZOOM);
            for (s, lines) in topology.all_polylines() {
                let c = structure_color(*s);
                for l in lines {
                    for k in 0..l.len() {
                        let (a, b) = (px[l[k]], px[l[(k + 1) % l.len()]]);
                        line(&mut img, [a[0].to_f64().unwrap(), a[1].to_f64().unwrap()], [b[0].to_f64().unwrap(), b[1].to_f64().unwrap()], c);
                    }
                }
            }
        }
        None => {
            for (s, mask) in pred.masks.iter() {
                let c = structure_color(s);
                let edge = boundary(mask);
                for r in 0..h {
                    for col in 0..w {
                        if *edge.get(r, col) {
                            for dy in 0..ZOOM {
                                for dx in 0..ZOOM {
                                    img.put_pixel((col * ZOOM + dx) as u32, (r * ZOOM + dy) as u32, c);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// One PNG per test record, named `<center>_<sample>.png`, so panels of
/// different models line up file by file.
pub fn emit_overlays<T: Scalar>(model: &Model<T>, centers: &[CenterDataset<T>], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e.to_string()))?;
    let mut written = Vec::new();
    for c in centers {
        let records: Vec<_> = c.in_split(Split::Test).collect();
        let images: Vec<&Grid<T>> = records.iter().map(|r| &r.image).collect();
        let preds = model.predict(&images)?;
        for (r, p) in records.iter().zip(&preds) {
            let path = out.join(format!("{}_{}.png", sanitize(&c.center_id), sanitize(&r.sample_id)));
            render_overlay(&r.image, p, model.topology())
                .save(&path)
                .map_err(|e| Error::file(&path, e.to_string()))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
