use std::sync::Arc;

use heteroseg_core::anatomy::synthetic_topology;
use heteroseg_core::grid::{BinaryMask, Grid};
use heteroseg_core::latent::{cluster_score, pca_2d, LatentRecord};
use heteroseg_core::objectives::{binary_cross_entropy, het_pixel_loss, soft_dice_binary};
use heteroseg_core::{availability_mask, dice, hausdorff, LabelAvailability, Structure, StructureLayout};
use proptest::prelude::*;

fn layout_strategy() -> impl Strategy<Value = StructureLayout> {
    (1usize..=3, prop::collection::vec(1usize..12, 3)).prop_map(|(n, counts)| {
        let all = [Structure::Lungs, Structure::Heart, Structure::Clavicles];
        StructureLayout::new(&all[..n].iter().zip(counts).map(|(&s, c)| (s, c)).collect::<Vec<_>>()).unwrap()
    })
}

fn subset(layout: &StructureLayout, bits: u8) -> LabelAvailability {
    LabelAvailability::new(&layout.structures().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, s)| s).collect::<Vec<_>>())
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
}

/// Random rotation via Gram-Schmidt on a random matrix.
fn orthogonal(d: usize, raw: &[f64]) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = raw[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.iter().map(|a| a / norm).collect());
    }
    q
}

fn apply(q: &[Vec<f64>], v: &[f64], shift: &[f64]) -> Vec<f64> {
    q.iter().zip(shift).map(|(row, s)| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn availability_mask_union_is_elementwise_or(layout in layout_strategy(), a in 0u8..8, b in 0u8..8) {
        let (x, y) = (subset(&layout, a), subset(&layout, b));
        let mu = availability_mask(&layout, x.union(y)).unwrap();
        let mx = availability_mask(&layout, x).unwrap();
        let my = availability_mask(&layout, y).unwrap();
        for i in 0..mu.len() {
            prop_assert_eq!(mu[i], mx[i] || my[i]);
        }
    }

    #[test]
    fn prefix_availability_masks_are_leading_ranges(layout in layout_strategy(), k in 1usize..=3) {
        let k = k.min(layout.num_structures());
        let prefix: Vec<Structure> = layout.structures().take(k).collect();
        let end: usize = layout.blocks()[..k].iter().map(|b| b.node_count).sum();
        let m = availability_mask(&layout, LabelAvailability::new(&prefix)).unwrap();
        prop_assert!(m.iter().enumerate().all(|(i, &v)| v == (i < end)));
    }

    #[test]
    fn synthetic_topologies_are_symmetric_cycles(l in 3usize..20, h in 3usize..20, c in 3usize..12) {
        let t = synthetic_topology(l, h, c).unwrap();
        let n = t.layout().total_nodes();
        for i in 0..n {
            prop_assert_eq!(t.degree(i), 2);
            for j in 0..n {
                prop_assert_eq!(t.adjacent(i, j), t.adjacent(j, i));
            }
        }
    }

    #[test]
    fn full_availability_pixel_loss_is_sum_of_parts(
        probs in prop::collection::vec(prop::collection::vec(0.01f64..0.99, 20), 3),
        targets in prop::collection::vec(prop::collection::vec(any::<bool>(), 20), 3),
    ) {
        let layout = StructureLayout::new(&[(Structure::Lungs, 4), (Structure::Heart, 3), (Structure::Clavicles, 3)]).unwrap();
        let p: Vec<Grid<f64>> = probs.into_iter().map(|v| Grid::from_vec(4, 5, v).unwrap()).collect();
        let t: Vec<BinaryMask> = targets.into_iter().map(|v| Grid::from_vec(4, 5, v).unwrap()).collect();
        let total = het_pixel_loss(&layout, &p, &t.iter().cloned().map(Some).collect::<Vec<_>>(), LabelAvailability::all()).unwrap().total;
        let parts: f64 = p.iter().zip(&t).map(|(a, b)| binary_cross_entropy(a, b).unwrap() + soft_dice_binary(a, b).unwrap()).sum();
        prop_assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn dice_properties(a in mask_strategy(6, 7), b in mask_strategy(6, 7)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        // Growing the intersection at fixed sizes cannot lower Dice.
        let only_b: Vec<usize> = (0..42).filter(|&i| b.data()[i] && !a.data()[i]).collect();
        let b_not_a: Vec<usize> = (0..42).filter(|&i| !b.data()[i] && a.data()[i]).collect();
        if let (Some(&drop), Some(&add)) = (only_b.first(), b_not_a.first()) {
            let mut c = b.clone();
            c.data_mut()[drop] = false;
            c.data_mut()[add] = true;
            prop_assert!(dice(&a, &c).unwrap() >= dice(&a, &b).unwrap());
        }
    }

    #[test]
    fn hausdorff_properties(a in mask_strategy(5, 6), b in mask_strategy(5, 6), dy in 0usize..4, dx in 0usize..4) {
        let ha = hausdorff(&a, &b).unwrap();
        prop_assert_eq!(ha, hausdorff(&b, &a).unwrap());
        if !a.is_empty_mask() {
            prop_assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
        }
        // Embed both masks in a larger frame at the same offset.
        let place = |m: &BinaryMask| Grid::from_fn(12, 12, |i, j| {
            i >= dy + 1 && j >= dx + 1 && i < dy + 6 && j < dx + 7 && *m.get(i - dy - 1, j - dx - 1)
        });
        let place0 = |m: &BinaryMask| Grid::from_fn(12, 12, |i, j| i >= 1 && j >= 1 && i < 6 && j < 7 && *m.get(i - 1, j - 1));
        prop_assert_eq!(hausdorff(&place(&a), &place(&b)).unwrap(), hausdorff(&place0(&a), &place0(&b)).unwrap());
    }

    #[test]
    fn cluster_score_ignores_rigid_motion(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 6..30),
        raw in prop::collection::vec(-1.0f64..1.0, 16),
        shift in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let q = orthogonal(4, &raw);
        let rec = |v: Vec<f64>, i: usize| LatentRecord { sample_id: i.to_string(), center_id: format!("C{}", i % 3), vector: v };
        let a: Vec<_> = pts.iter().cloned().enumerate().map(|(i, v)| rec(v, i)).collect();
        let b: Vec<_> = pts.iter().enumerate().map(|(i, v)| rec(apply(&q, v, &shift), i)).collect();
        prop_assert!((cluster_score(&a).unwrap() - cluster_score(&b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pca_is_rotation_invariant_up_to_sign(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 5..25),
        raw in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        // Stretch the axes so the top two components are well separated.
        let pts: Vec<Vec<f64>> = pts.iter().map(|v| vec![4.0 * v[0], 2.0 * v[1], 0.5 * v[2]]).collect();
        let q = orthogonal(3, &raw);
        let moved: Vec<Vec<f64>> = pts.iter().map(|v| apply(&q, v, &[1.0, -2.0, 3.0])).collect();
        let (a, ev) = pca_2d(&pts).unwrap();
        prop_assume!(ev[0] - ev[1] > 1e-3 * ev[0] && ev[1] - ev[2] > 1e-3 * ev[0]);
        let (b, _) = pca_2d(&moved).unwrap();
        for axis in 0..2 {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x[axis] * y[axis]).sum();
            let sign = dot.signum();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x[axis] - sign * y[axis]).abs() < 1e-6 * (1.0 + ev[0].sqrt()));
            }
        }
    }
}

#[test]
fn single_cycle_topology_is_valid_for_any_layout() {
    let layout = Arc::new(StructureLayout::new(&[(Structure::Lungs, 5), (Structure::Heart, 4)]).unwrap());
    let t = heteroseg_core::ContourTopology::single_cycles(layout).unwrap();
    assert!((0..9).all(|i| t.degree(i) == 2));
}
