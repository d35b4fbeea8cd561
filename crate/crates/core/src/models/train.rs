//! Single-source mini-batch training with availability-masked losses.

use std::io::Write;

use heteroseg_autograd::{Adam, AdamConfig, Bound, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::image_batch;
use super::{Model, Net, PixelMode, Setting};
use crate::anatomy::StructureLayout;
use crate::data::{split_indices, CenterDataset, SampleRecord, SingleSourceSampler, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::objectives::{het_pixel_loss_with_grad, kl_latent_with_grad, masked_mse_raw, multiclass_loss_with_grad};
use crate::util::derive_seed;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the latent KL term (landmark model).
    pub kl_weight: f64,
    /// Share of each center's train/val records held out for model selection.
    pub val_fraction: f64,
    /// `best_val` restores the weights with the lowest validation loss,
    /// `last` keeps the final ones.
    pub selection: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            kl_weight: 1e-5,
            val_fraction: 0.1,
            selection: "best_val".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("lr must be positive, weight_decay and kl_weight non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 0.5)", self.val_fraction)));
        }
        if self.selection != "best_val" && self.selection != "last" {
            return Err(Error::Config(format!("unknown selection rule {:?} (best_val, last)", self.selection)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub center: String,
    pub batch: usize,
    pub loss: f64,
    pub terms: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept.
    pub selected_epoch: Option<usize>,
    /// Centers used for training.
    pub centers: Vec<String>,
}

impl TrainLog {
    pub fn write_steps_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "step,epoch,center,batch,loss")?;
        if let Some(first) = self.steps.first() {
            for (n, _) in &first.terms {
                write!(w, ",{n}")?;
            }
        }
        writeln!(w)?;
        for s in &self.steps {
            write!(w, "{},{},{},{},{}", s.step, s.epoch, s.center, s.batch, s.loss)?;
            for (_, v) in &s.terms {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,selected")?;
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let sel = (self.selected_epoch == Some(e.epoch)) as u8;
            writeln!(w, "{},{},{val},{sel}", e.epoch, e.train_loss)?;
        }
        Ok(())
    }
}

/// Centers usable under `setting`: Strict keeps centers annotating every
/// target structure, the other settings keep any center annotating at least
/// one.
pub fn filter_for_setting<'a, T: Scalar>(
    centers: &'a [CenterDataset<T>],
    setting: Setting,
) -> Result<Vec<&'a CenterDataset<T>>> {
    let target = setting.structures();
    let kept: Vec<_> = centers
        .iter()
        .filter(|c| {
            if setting.is_strict() {
                target.is_subset(c.availability)
            } else {
                !c.availability.intersection(target).is_empty()
            }
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Data(format!("no center provides labels for setting {setting}")));
    }
    Ok(kept)
}

/// Label map for the multiclass model: clavicles over heart over lungs,
/// unavailable structures count as background.
pub(crate) fn multiclass_target<T: Scalar>(record: &SampleRecord<T>, layout: &StructureLayout) -> Result<Grid<u8>> {
    let (h, w) = record.image.dims();
    let mut labels = Grid::filled(h, w, 0u8);
    for (k, s) in layout.structures().enumerate() {
        if !record.availability().contains(s) {
            continue;
        }
        let m = record.training_mask(s)?;
        for (l, &on) in labels.data_mut().iter_mut().zip(m.data()) {
            if on {
                *l = (k + 1) as u8;
            }
        }
    }
    Ok(labels)
}

struct BatchLoss {
    loss: f64,
    terms: Vec<(String, f64)>,
    root: Option<Var>,
}

fn add_terms(acc: &mut Vec<(String, f64)>, name: &str, v: f64) {
    match acc.iter_mut().find(|(n, _)| n == name) {
        Some((_, x)) => *x += v,
        None => acc.push((name.to_string(), v)),
    }
}

fn sum_roots<T: Scalar>(tape: &mut Tape<T>, nodes: &[Var]) -> Option<Var> {
    let mut it = nodes.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |a, b| tape.add(a, b)))
}

/// Builds the batch loss on `tape`. Loss values are means over the batch;
/// structures outside a record's availability never reach a loss node.
fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    records: &[&SampleRecord<T>],
    kl_weight: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    let layout = model.layout();
    let images: Vec<&Grid<T>> = records.iter().map(|r| &r.image).collect();
    let x = tape.constant(image_batch(&images));
    let b = records.len();
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut terms = Vec::new();
    let mut roots = Vec::new();
    match &model.net {
        Net::Landmark(net) => {
            let noise = rng.map(|r| net.sample_noise(b, r));
            let out = net.forward(tape, p, x, noise);
            let per = 2 * layout.total_nodes();
            let coords = tape.value(out.coords).data().to_vec();
            let mut grad = vec![T::zero(); coords.len()];
            let mut mse = T::zero();
            for (i, r) in records.iter().enumerate() {
                let (target, mask) = r.training_targets(layout)?;
                let (v, g) = masked_mse_raw(&coords[i * per..(i + 1) * per], &target, &mask)?;
                mse += v * inv_b;
                for (d, gv) in grad[i * per..(i + 1) * per].iter_mut().zip(g) {
                    *d = gv * inv_b;
                }
            }
            roots.push(tape.external_loss(out.coords, mse, grad));
            add_terms(&mut terms, "mse", mse.to_f64().unwrap());
            let z = net.config().latent_dim;
            let mu = tape.value(out.mu).data().to_vec();
            let lv = tape.value(out.logvar).data().to_vec();
            let w = T::lit(kl_weight) * inv_b;
            let (mut kl, mut gmu, mut glv) = (T::zero(), Vec::with_capacity(mu.len()), Vec::with_capacity(mu.len()));
            for i in 0..b {
                let (v, dm, dl) = kl_latent_with_grad(&mu[i * z..(i + 1) * z], &lv[i * z..(i + 1) * z])?;
                kl += v * inv_b;
                gmu.extend(dm.into_iter().map(|g| g * w));
                glv.extend(dl.into_iter().map(|g| g * w));
            }
            add_terms(&mut terms, "kl", kl.to_f64().unwrap());
            roots.push(tape.external_loss(out.mu, kl * T::lit(kl_weight), gmu));
            roots.push(tape.external_loss(out.logvar, T::zero(), glv));
        }
        Net::Pixel(net) => {
            let out = net.forward(tape, p, x);
            let (h, w) = records[0].image.dims();
            let hw = h * w;
            match net.config().mode {
                PixelMode::MultilabelHt => {
                    let k = layout.num_structures();
                    let mut grads = vec![vec![T::zero(); b * hw]; k];
                    let mut used = vec![false; k];
                    let (mut bce, mut dice) = (T::zero(), T::zero());
                    for (i, r) in records.iter().enumerate() {
                        let probs = out
                            .heads
                            .iter()
                            .map(|&hv| Grid::from_vec(h, w, tape.value(hv).data()[i * hw..(i + 1) * hw].to_vec()))
                            .collect::<Result<Vec<_>>>()?;
                        let targets = r.training_masks(layout)?;
                        let avail = r.availability().intersection(layout.as_availability());
                        let (v, g) = het_pixel_loss_with_grad(layout, &probs, &targets, avail)?;
                        bce += v.component("bce").unwrap() * inv_b;
                        dice += v.component("dice").unwrap() * inv_b;
                        for (kk, s) in layout.structures().enumerate() {
                            if avail.contains(s) {
                                used[kk] = true;
                                for (d, gv) in grads[kk][i * hw..(i + 1) * hw].iter_mut().zip(&g[kk]) {
                                    *d = *gv * inv_b;
                                }
                            }
                        }
                    }
                    add_terms(&mut terms, "bce", bce.to_f64().unwrap());
                    add_terms(&mut terms, "dice", dice.to_f64().unwrap());
                    let mut first = true;
                    for (kk, g) in grads.into_iter().enumerate() {
                        if used[kk] {
                            let value = if first { bce + dice } else { T::zero() };
                            first = false;
                            roots.push(tape.external_loss(out.heads[kk], value, g));
                        }
                    }
                }
                PixelMode::Multiclass => {
                    let head = out.heads[0];
                    let c = tape.shape(head)[1];
                    let mut grad = vec![T::zero(); b * c * hw];
                    let (mut ce, mut dice) = (T::zero(), T::zero());
                    for (i, r) in records.iter().enumerate() {
                        let base = i * c * hw;
                        let logits = (0..c)
                            .map(|ch| {
                                let s = base + ch * hw;
                                Grid::from_vec(h, w, tape.value(head).data()[s..s + hw].to_vec())
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let target = multiclass_target(r, layout)?;
                        let (v, g) = multiclass_loss_with_grad(&logits, &target)?;
                        ce += v.component("ce").unwrap() * inv_b;
                        dice += v.component("dice").unwrap() * inv_b;
                        for (ch, gc) in g.iter().enumerate() {
                            let s = base + ch * hw;
                            for (d, gv) in grad[s..s + hw].iter_mut().zip(gc) {
                                *d = *gv * inv_b;
                            }
                        }
                    }
                    add_terms(&mut terms, "ce", ce.to_f64().unwrap());
                    add_terms(&mut terms, "dice", dice.to_f64().unwrap());
                    roots.push(tape.external_loss(head, ce + dice, grad));
                }
            }
        }
    }
    let root = sum_roots(tape, &roots);
    let loss = root.map(|r| tape.value(r).item().to_f64().unwrap()).unwrap_or(0.0);
    Ok(BatchLoss { loss, terms, root })
}

/// Mean validation loss over `records` (deterministic forward).
fn validation_loss<T: Scalar>(model: &Model<T>, records: &[Vec<&SampleRecord<T>>], cfg: &TrainConfig) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut n = 0usize;
    for center in records {
        for chunk in center.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = model.store().bind(&mut tape, false);
            let l = batch_loss(model, &mut tape, &p, chunk, cfg.kl_weight, None)?;
            total += l.loss * chunk.len() as f64;
            n += chunk.len();
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Trains `model` on the train/val records of the centers admitted by
/// `setting`. Deterministic for a fixed seed.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    centers: &[CenterDataset<T>],
    setting: Setting,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.layout().as_availability() != setting.structures() {
        return Err(Error::Config(format!(
            "model predicts {} but setting {setting} targets {}",
            model.layout().as_availability(),
            setting.structures()
        )));
    }
    let kept = filter_for_setting(centers, setting)?;
    let mut train_sets: Vec<Vec<&SampleRecord<T>>> = Vec::new();
    let mut val_sets: Vec<Vec<&SampleRecord<T>>> = Vec::new();
    let mut names = Vec::new();
    for c in &kept {
        let pool: Vec<&SampleRecord<T>> = c.in_split(Split::TrainVal).collect();
        if pool.is_empty() {
            continue;
        }
        for r in &pool {
            if r.image.dims() != (model.input_size(), model.input_size()) {
                return Err(Error::Data(format!("{}: image size differs from model input", r.sample_id)));
            }
        }
        let (tr, va) = if cfg.val_fraction > 0.0 && pool.len() >= 2 {
            let (a, b) = split_indices(pool.len(), 1.0 - cfg.val_fraction, derive_seed(cfg.seed, &format!("val/{}", c.center_id)))?;
            (a.iter().map(|&i| pool[i]).collect(), b.iter().map(|&i| pool[i]).collect())
        } else {
            (pool, Vec::new())
        };
        if tr.is_empty() {
            continue;
        }
        names.push(c.center_id.clone());
        train_sets.push(tr);
        val_sets.push(va);
    }
    if train_sets.is_empty() {
        return Err(Error::Data(format!("setting {setting} leaves no training records")));
    }
    let sizes: Vec<usize> = train_sets.iter().map(Vec::len).collect();
    let mut sampler = SingleSourceSampler::new(&sizes, cfg.batch_size, derive_seed(cfg.seed, "sampler"))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
        model.store(),
    );
    let use_val = cfg.selection == "best_val" && val_sets.iter().any(|v| !v.is_empty());
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut log = TrainLog { centers: names.clone(), ..TrainLog::default() };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let plan = sampler.next_epoch();
        let batches = plan.len();
        for bp in plan {
            let recs: Vec<&SampleRecord<T>> = bp.indices.iter().map(|&i| train_sets[bp.center][i]).collect();
            let mut tape = Tape::new();
            let p = model.store().bind(&mut tape, true);
            let bl = batch_loss(model, &mut tape, &p, &recs, cfg.kl_weight, Some(&mut noise_rng))?;
            if !bl.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {} on a {} batch in epoch {epoch}", bl.loss, names[bp.center]),
                });
            }
            if let Some(root) = bl.root {
                let mut grads = tape.backward(root);
                let g = model.store().collect_grads(&p, &mut grads);
                if g.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step, detail: format!("non-finite gradient in epoch {epoch}") });
                }
                adam.step(model.store_mut(), &g);
            }
            epoch_loss += bl.loss;
            log.steps.push(StepLog {
                step,
                epoch,
                center: names[bp.center].clone(),
                batch: recs.len(),
                loss: bl.loss,
                terms: bl.terms,
            });
            step += 1;
        }
        let val = if use_val { validation_loss(model, &val_sets, cfg)? } else { None };
        if let Some(v) = val {
            if !v.is_finite() {
                return Err(Error::Divergence { step, detail: format!("validation loss {v} after epoch {epoch}") });
            }
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store().clone()));
            }
        }
        log::debug!("epoch {epoch}: train {:.5} val {val:?}", epoch_loss / batches as f64);
        log.epochs.push(EpochLog { epoch, train_loss: epoch_loss / batches as f64, val_loss: val });
    }
    match best {
        Some((_, epoch, store)) => {
            *model.store_mut() = store;
            log.selected_epoch = Some(epoch);
        }
        None => log.selected_epoch = cfg.epochs.checked_sub(1),
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::anatomy::{default_synthetic_topology, Structure};
    use crate::data::{default_synthetic_specs, generate_synthetic_centers};
    use crate::models::{ArchConfig, ModelKind};

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            input_size: 64,
            encoder_channels: vec![2, 2, 2, 2, 2],
            latent_dim: 4,
            chebyshev_order: 2,
            decoder_channels: vec![4],
            unet_channels: vec![2, 2],
        }
    }

    fn centers(n: usize) -> Vec<CenterDataset<f64>> {
        let topo = Arc::new(default_synthetic_topology());
        let specs: Vec<_> = default_synthetic_specs(1)
            .into_iter()
            .map(|mut s| {
                s.n_samples = n;
                s
            })
            .collect();
        generate_synthetic_centers(&specs, &topo).unwrap()
    }

    fn model(kind: ModelKind, setting: Setting) -> Model<f64> {
        let topo = Arc::new(default_synthetic_topology().truncated(setting.structures()).unwrap());
        Model::build(kind, &tiny_arch(), topo, 0).unwrap()
    }

    #[test]
    fn strict_and_full_filtering() {
        let c = centers(2);
        let ids = |s| filter_for_setting(&c, s).unwrap().iter().map(|c| c.center_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(Setting::LhcStrict), vec!["SYNTH_LHC"]);
        assert_eq!(ids(Setting::LhStrict), vec!["SYNTH_LH", "SYNTH_LHC"]);
        assert_eq!(ids(Setting::LhFull).len(), 3);
        assert_eq!(ids(Setting::L).len(), 3);
        assert!(filter_for_setting(&c[..1], Setting::LhcStrict).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let c = centers(6);
        let cfg = TrainConfig { epochs: 2, batch_size: 3, lr: 1e-3, ..TrainConfig::default() };
        for kind in ModelKind::ALL {
            let mut a = model(kind, Setting::LhcFull);
            let mut b = model(kind, Setting::LhcFull);
            let la = train(&mut a, &c, Setting::LhcFull, &cfg).unwrap();
            let lb = train(&mut b, &c, Setting::LhcFull, &cfg).unwrap();
            let (mut sa, mut sb) = (Vec::new(), Vec::new());
            la.write_steps_csv(&mut sa).unwrap();
            lb.write_steps_csv(&mut sb).unwrap();
            assert_eq!(sa, sb, "{kind}");
            assert!(la.steps.iter().all(|s| s.loss.is_finite()));
        }
    }

    #[test]
    fn mismatched_setting_is_a_config_error() {
        let mut m = model(ModelKind::UNet, Setting::L);
        let err = train(&mut m, &centers(2), Setting::LhcFull, &TrainConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unavailable_heads_are_untouched() {
        let c = centers(4);
        let mut m = model(ModelKind::UNetHt, Setting::LhcFull);
        let before = m.store().clone();
        // Only the lung-only center, one step.
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-2, val_fraction: 0.0, ..TrainConfig::default() };
        train(&mut m, &c[..1], Setting::LhcFull, &cfg).unwrap();
        let net = m.as_pixel().unwrap();
        for head in [1, 2] {
            for id in net.head_params(head) {
                assert_eq!(m.store().get(id), before.get(id));
            }
        }
        for id in net.head_params(0) {
            assert_ne!(m.store().get(id), before.get(id));
        }
    }

    #[test]
    fn multiclass_label_priority() {
        let c = centers(1);
        let r = &c[2].records[0];
        let layout = default_synthetic_topology().layout().clone();
        let t = multiclass_target(r, &layout).unwrap();
        let clav = r.gt_mask(Structure::Clavicles).unwrap();
        for (l, &on) in t.data().iter().zip(clav.data()) {
            if on {
                assert_eq!(*l, 3);
            }
        }
        let lung_only = multiclass_target(&c[0].records[0], &layout).unwrap();
        assert!(lung_only.data().iter().all(|&l| l <= 1));
    }
}
