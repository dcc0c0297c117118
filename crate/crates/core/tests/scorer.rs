mod common;

use common::suites::{monotonicity_violations, open_interval_violations};
use logad::nets::{ModelConfig, PdnConfig, StudentHeads, TripletModel};
use logad::numeric::NdArray;
use logad::scorer::{
    calibrate, calibrate_from_maps, combine, image_score, normalize_map, project, score_image, upsample, AnomalyMap,
    Branch, BranchStats, Projection, ScoreMap,
};
use proptest::prelude::*;

#[test]
fn normalized_maps_stay_in_the_open_unit_interval() {
    assert_eq!(open_interval_violations(10), 0);
}

#[test]
fn normalization_is_strictly_monotone() {
    for seed in 0..5 {
        assert_eq!(monotonicity_violations(seed, 10_000), 0);
    }
}

#[test]
fn spec_examples() {
    let s = BranchStats { q_low: 2.0, q_high: 6.0, degenerate: false };
    assert_eq!(project(2.0, &s, Projection::Sigmoid), 0.5);
    let g = AnomalyMap { height: 1, width: 1, values: vec![0.2], source: (1, 1), branch: Branch::Global };
    let l = AnomalyMap { values: vec![0.8], branch: Branch::Local, ..g.clone() };
    assert_eq!(combine(&g, &l).unwrap().values, vec![0.5]);
    let c = AnomalyMap { height: 2, width: 2, values: vec![0.3; 4], source: (2, 2), branch: Branch::Combined };
    assert!(upsample(&c, 8, 8).unwrap().values.iter().all(|&v| v == 0.3));
}

#[test]
fn constant_calibration_is_degenerate() {
    let m = (ScoreMap::new(2, 2, vec![1.5; 4]).unwrap(), ScoreMap::new(2, 2, vec![0.5; 4]).unwrap());
    let stats = calibrate_from_maps(&[m.clone(), m]).unwrap();
    assert!(stats.global.degenerate && stats.local.degenerate);
    let out = normalize_map(&ScoreMap::new(1, 3, vec![0.0, 1.5, 9.0]).unwrap(), &stats.global, Projection::Sigmoid, Branch::Global);
    assert_eq!(out.values, vec![0.5; 3]);
}

fn tiny_model() -> TripletModel {
    TripletModel::new(ModelConfig {
        pdn: PdnConfig { in_channels: 3, out_channels: 8, widths: [8, 8, 8] },
        ae_width: 8,
        image_size: 32,
        instance_norm: true,
        student_heads: StudentHeads::Shared,
        seed: 3,
    })
    .unwrap()
}

fn image(seed: u64) -> NdArray<f32> {
    common::normal(&mut common::rng(seed), &[3, 32, 32]).cast()
}

#[test]
fn scored_images_have_image_resolution_and_max_score() {
    let model = tiny_model();
    let val: Vec<_> = (0..4).map(image).collect();
    let stats = calibrate(&model, &val).unwrap();
    for s in 10..14 {
        let (map, score) = score_image(&model, &stats, &image(s)).unwrap();
        assert_eq!((map.height, map.width), (32, 32));
        assert!(map.values.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(score, image_score(&map));
    }
    let again = calibrate(&model, &val).unwrap();
    assert_eq!(stats, again);
}

proptest! {
    #[test]
    fn upsampling_stays_within_range(
        vals in proptest::collection::vec(0.0f64..1.0, 1..=64), h in 1usize..=8, out in 1usize..=40,
    ) {
        let h = h.min(vals.len());
        let w = vals.len() / h;
        let v = vals[..h * w].to_vec();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m = AnomalyMap { height: h, width: w, values: v, source: (h, w), branch: Branch::Combined };
        let u = upsample(&m, out, out).unwrap();
        prop_assert!(u.values.iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn calibration_quantiles_are_ordered(vals in proptest::collection::vec(0.0f64..100.0, 1..500)) {
        let s = BranchStats::fit(vals).unwrap();
        prop_assert!(s.q_low <= s.q_high);
        prop_assert_eq!(s.degenerate, s.q_low == s.q_high);
    }
}
