use std::sync::Arc;

use proptest::prelude::*;
use trackany_core::backend::{DegradationConfig, SyntheticOraclePropagator, SyntheticScene, SyntheticSegmenter};
use trackany_core::engine::{parse_log, replay, EngineConfig, Session, SessionOptions};
use trackany_core::mask::extract_or_empty;
use trackany_core::metrics::{boundary_f, jaccard, report_percent};
use trackany_core::morphology::{dilate_disk, erode};
use trackany_core::pngio::{read_mask_png, write_mask_png};
use trackany_core::prompts::simulate_click;
use trackany_core::{BinaryMask, FrameRef, LabelMap};

fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
}

fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1u32..20, 1u32..20).prop_flat_map(|(w, h)| (arb_mask(w, h), arb_mask(w, h)))
}

proptest! {
    #[test]
    fn scores_are_bounded_and_perfect_on_identity((a, b) in arb_pair(), tol in 0u32..4) {
        let j: f64 = jaccard(&a, &b).unwrap();
        let f: f64 = boundary_f(&a, &b, tol).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(jaccard::<f64>(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(boundary_f::<f64>(&a, &a, tol).unwrap(), 1.0);
    }

    #[test]
    fn boundary_f_grows_with_tolerance((a, b) in arb_pair(), tol in 0u32..4) {
        let narrow: f64 = boundary_f(&a, &b, tol).unwrap();
        let wide: f64 = boundary_f(&a, &b, tol + 1).unwrap();
        prop_assert!(wide >= narrow - 1e-12, "{narrow} > {wide}");
    }

    #[test]
    fn precisions_agree((a, b) in arb_pair(), tol in 0u32..3) {
        let (j64, j32) = (jaccard::<f64>(&a, &b).unwrap(), jaccard::<f32>(&a, &b).unwrap());
        let (f64_, f32_) = (boundary_f::<f64>(&a, &b, tol).unwrap(), boundary_f::<f32>(&a, &b, tol).unwrap());
        prop_assert!((j64 - j32 as f64).abs() < 1e-5);
        prop_assert!((f64_ - f32_ as f64).abs() < 1e-5);
    }

    #[test]
    fn erosion_shrinks_and_dilation_grows(m in (1u32..16, 1u32..16).prop_flat_map(|(w, h)| arb_mask(w, h)), k in 0u32..4) {
        let e = erode(&m, k);
        prop_assert!(e.is_subset_of(&m));
        prop_assert!(erode(&m, k + 1).is_subset_of(&e));
        prop_assert!(m.is_subset_of(&dilate_disk(&m, k)));
        prop_assert_eq!(erode(&m, 0), m);
    }

    #[test]
    fn report_percent_stays_within_half_a_tenth(x in 0.0f64..=1.0) {
        let p = report_percent(x);
        prop_assert!((p - 100.0 * x).abs() <= 0.05 + 1e-9);
        prop_assert!((p * 10.0 - (p * 10.0).round()).abs() < 1e-9);
    }

    #[test]
    fn simulated_clicks_land_on_the_error((a, b) in arb_pair()) {
        match simulate_click(&a, Some(&b), 1).unwrap() {
            Some(p) => {
                prop_assert_ne!(a.get(p.x, p.y), b.get(p.x, p.y));
                prop_assert_eq!(p.is_positive(), a.get(p.x, p.y));
            }
            None => prop_assert_eq!(&a, &b),
        }
    }

    #[test]
    fn label_maps_survive_png(labels in prop::collection::vec(0u8..4, 12 * 9)) {
        let map = LabelMap::from_raster(12, 9, labels).unwrap();
        prop_assert_eq!(read_mask_png(&write_mask_png(&map).unwrap()).unwrap(), map);
    }
}

/// A square of side `side` drifting right by one pixel per frame.
fn drifting_square(frames: usize, side: u32) -> Vec<LabelMap> {
    (0..frames as u32)
        .map(|t| {
            let m = BinaryMask::rect(64, 48, 8 + t, 10, 8 + t + side, 10 + side);
            LabelMap::background(64, 48).replace_object(1, &m).unwrap()
        })
        .collect()
}

type Backends = (Vec<FrameRef>, Arc<SyntheticSegmenter>, Box<SyntheticOraclePropagator>);

fn backends(gt: &[LabelMap], erosion: f64) -> Backends {
    let video = (0..gt.len()).map(|t| FrameRef::blank("s", t, 64, 48)).collect();
    let seg = Arc::new(SyntheticSegmenter::new(SyntheticScene::new().with_sequence("s", gt.to_vec())));
    let prop = SyntheticOraclePropagator::new(Arc::new(gt.to_vec()), DegradationConfig::new(erosion, 16.0).unwrap());
    (video, seg, Box::new(prop))
}

fn session(gt: &[LabelMap], erosion: f64) -> Session {
    let (video, seg, prop) = backends(gt, erosion);
    Session::new(video, seg, prop, EngineConfig::default(), SessionOptions::default()).unwrap()
}

fn one_pass(gt: &[LabelMap], erosion: f64) -> Session {
    let mut s = session(gt, erosion);
    let click = simulate_click(&extract_or_empty(&gt[0], 1), None, 1).unwrap().unwrap();
    s.init_object(vec![click]).unwrap();
    s.run_one_pass().unwrap();
    s
}

#[test]
fn lossless_propagation_reproduces_the_groundtruth() {
    let gt = drifting_square(12, 16);
    let s = one_pass(&gt, 0.0);
    let masks: Vec<LabelMap> = s.masks().iter().map(|m| m.clone().unwrap()).collect();
    assert_eq!(masks, gt);
}

#[test]
fn logs_replay_and_any_edit_is_caught() {
    let gt = drifting_square(10, 20);
    let text = one_pass(&gt, 1.0).log().to_jsonl();
    let (video, seg, prop) = backends(&gt, 1.0);
    let replayed = replay(&text, video, seg, prop).unwrap();
    assert_eq!(replayed.log().to_jsonl(), text);

    let bytes = text.as_bytes();
    for i in (0..bytes.len()).step_by(17).filter(|&i| bytes[i].is_ascii_digit()) {
        let mut edited = bytes.to_vec();
        edited[i] = if bytes[i] == b'9' { b'0' } else { bytes[i] + 1 };
        let edited = String::from_utf8(edited).unwrap();
        assert!(parse_log(&edited).is_err(), "edit at byte {i} went unnoticed");
    }
}
