use rayon::prelude::*;

use crate::data::{CenterDataset, SampleRecord, Split};
use crate::error::Result;
use crate::grid::Grid;
use crate::metrics::{dice, hausdorff, landmark_mse_rows, MetricReport, MetricRow};
use crate::models::{Model, Prediction};
use crate::Scalar;

/// Per-sample metric values of one structure.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    n: usize,
    dice: f64,
    mse: f64,
    mse_n: usize,
    hd: f64,
    hd_n: usize,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Mean Dice, Hausdorff (over samples where both masks are non-empty) and,
/// for the landmark model, landmark MSE on every center's `split` records.
/// Rows cover the predicted structures that have ground truth in a center.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    centers: &[CenterDataset<T>],
    model_label: &str,
    setting_label: &str,
    split: Split,
) -> Result<MetricReport> {
    let layout = model.layout();
    let size = model.input_size();
    let mut report = MetricReport::new();
    for c in centers {
        let records: Vec<&SampleRecord<T>> = c.in_split(split).collect();
        if records.is_empty() {
            continue;
        }
        let images: Vec<&Grid<T>> = records.iter().map(|r| &r.image).collect();
        let preds = model.predict(&images)?;
        let structures: Vec<_> = layout.structures().filter(|&s| c.ground_truth().contains(s)).collect();
        let per_sample: Vec<Result<Vec<Acc>>> = records
            .par_iter()
            .zip(preds.par_iter())
            .map(|(r, p): (&&SampleRecord<T>, &Prediction<T>)| {
                structures
                    .iter()
                    .map(|&s| {
                        let gt = r.gt_mask(s).expect("ground truth present");
                        let pm = p.masks.get(s).expect("predicted structure");
                        let mut a = Acc { n: 1, dice: dice(pm, gt)?, ..Acc::default() };
                        if let Some(h) = hausdorff(pm, gt)? {
                            a.hd = h;
                            a.hd_n = 1;
                        }
                        if let Some(lm) = &p.landmarks {
                            let v = landmark_mse_rows(lm.rows(s).unwrap(), r.gt_rows(s).unwrap(), size, size)?;
                            a.mse = v.to_f64().unwrap();
                            a.mse_n = 1;
                        }
                        Ok(a)
                    })
                    .collect()
            })
            .collect();
        let mut totals = vec![Acc::default(); structures.len()];
        for sample in per_sample {
            for (t, a) in totals.iter_mut().zip(sample?) {
                t.n += a.n;
                t.dice += a.dice;
                t.mse += a.mse;
                t.mse_n += a.mse_n;
                t.hd += a.hd;
                t.hd_n += a.hd_n;
            }
        }
        for (&s, t) in structures.iter().zip(&totals) {
            report.push(MetricRow {
                model: model_label.to_string(),
                setting: setting_label.to_string(),
                center: c.center_id.clone(),
                structure: s,
                mse: mean(t.mse, t.mse_n),
                dice: mean(t.dice, t.n),
                hd: mean(t.hd, t.hd_n),
                experiment: None,
                removed: false,
            });
        }
    }
    Ok(report)
}
