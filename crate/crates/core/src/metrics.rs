//! Region similarity (J), contour accuracy (F) and their DAVIS-style
//! aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{extract_or_empty, BinaryMask, LabelMap, ObjectId};
use crate::morphology::{dilate_disk, inner_boundary};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("sequence lengths differ: {preds} predictions vs {gts} groundtruth frames")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("object {0} is absent from every groundtruth frame")]
    ObjectAbsent(ObjectId),
    #[error("frame policy leaves no frames to evaluate in a {0}-frame sequence")]
    NoFramesEvaluated(usize),
    #[error("nothing to aggregate")]
    Empty,
    #[error("sequence {0} appears twice")]
    DuplicateSequence(String),
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), MetricError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::DimensionMismatch(pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard<T: Scalar>(pred: &BinaryMask, gt: &BinaryMask) -> Result<T, MetricError> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(T::one());
    }
    Ok(T::from_count(inter) / T::from_count(union))
}

/// F-measure from matched boundary counts. Shared by the metric and tests so
/// both routes finish with identical arithmetic.
pub fn f_from_counts<T: Scalar>(matched_pred: usize, pred_len: usize, matched_gt: usize, gt_len: usize) -> T {
    match (pred_len, gt_len) {
        (0, 0) => T::one(),
        (0, _) | (_, 0) => T::zero(),
        _ => {
            let precision = T::from_count(matched_pred) / T::from_count(pred_len);
            let recall = T::from_count(matched_gt) / T::from_count(gt_len);
            if precision + recall == T::zero() {
                T::zero()
            } else {
                T::lit(2.0) * precision * recall / (precision + recall)
            }
        }
    }
}

/// Boundary F-measure. Boundaries are the 4-neighbour inner contours; a
/// boundary pixel matches when a pixel of the other boundary lies within
/// `tolerance` (Euclidean). 1 when both masks are empty.
pub fn boundary_f<T: Scalar>(pred: &BinaryMask, gt: &BinaryMask, tolerance: u32) -> Result<T, MetricError> {
    check_dims(pred, gt)?;
    let pb = inner_boundary(pred);
    let gb = inner_boundary(gt);
    let (pred_len, gt_len) = (pb.area(), gb.area());
    if pred_len == 0 || gt_len == 0 {
        return Ok(f_from_counts(0, pred_len, 0, gt_len));
    }
    let matched_pred = pb.intersection_count(&dilate_disk(&gb, tolerance));
    let matched_gt = gb.intersection_count(&dilate_disk(&pb, tolerance));
    Ok(f_from_counts(matched_pred, pred_len, matched_gt, gt_len))
}

/// Boundary matching radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTolerance {
    Pixels(u32),
    /// `ceil(fraction * image diagonal)`.
    DiagonalFraction(f64),
}

impl Default for BoundaryTolerance {
    fn default() -> Self {
        BoundaryTolerance::DiagonalFraction(0.008)
    }
}

impl BoundaryTolerance {
    pub fn resolve(&self, width: u32, height: u32) -> u32 {
        match *self {
            BoundaryTolerance::Pixels(p) => p,
            BoundaryTolerance::DiagonalFraction(frac) => {
                let diag = ((width as f64).powi(2) + (height as f64).powi(2)).sqrt();
                (frac * diag).ceil() as u32
            }
        }
    }
}

/// Which frames contribute to a sequence score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Skip the initialised frame, keep the last.
    #[default]
    SkipFirst,
    /// Skip both first and last frames.
    StrictDavis,
    All,
}

impl FramePolicy {
    pub fn frames(&self, len: usize) -> std::ops::Range<usize> {
        match self {
            FramePolicy::All => 0..len,
            FramePolicy::SkipFirst => 1.min(len)..len,
            FramePolicy::StrictDavis => 1.min(len)..len.saturating_sub(1).max(1.min(len)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub tolerance: BoundaryTolerance,
    pub frame_policy: FramePolicy,
}

/// Per-object J, F and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectScore<T> {
    pub object_id: ObjectId,
    pub j: T,
    pub f: T,
    pub jf: T,
}

impl<T: Scalar> ObjectScore<T> {
    pub fn new(object_id: ObjectId, j: T, f: T) -> Self {
        Self { object_id, j, f, jf: (j + f) / T::lit(2.0) }
    }

    /// Averages per-frame `(J, F)` pairs.
    pub fn from_frame_scores(object_id: ObjectId, frames: &[(T, T)]) -> Option<Self> {
        if frames.is_empty() {
            return None;
        }
        let n = T::from_count(frames.len());
        let (sj, sf) = frames.iter().fold((T::zero(), T::zero()), |(a, b), &(j, f)| (a + j, b + f));
        Some(Self::new(object_id, sj / n, sf / n))
    }
}

/// J and F of one object in one frame.
pub fn score_frame<T: Scalar>(
    pred: &LabelMap,
    gt: &LabelMap,
    object_id: ObjectId,
    tolerance: u32,
) -> Result<(T, T), MetricError> {
    let p = extract_or_empty(pred, object_id);
    let g = extract_or_empty(gt, object_id);
    Ok((jaccard(&p, &g)?, boundary_f(&p, &g, tolerance)?))
}

pub fn score_object<T: Scalar>(
    preds: &[LabelMap],
    gts: &[LabelMap],
    object_id: ObjectId,
    config: &MetricConfig,
) -> Result<ObjectScore<T>, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    if !gts.iter().any(|g| g.labels().contains(&object_id)) || object_id == 0 {
        return Err(MetricError::ObjectAbsent(object_id));
    }
    let mut frames = Vec::new();
    for i in config.frame_policy.frames(gts.len()) {
        let (p, g) = (&preds[i], &gts[i]);
        if p.dims() != g.dims() {
            return Err(MetricError::DimensionMismatch(p.dims(), g.dims()));
        }
        let tol = config.tolerance.resolve(g.width(), g.height());
        frames.push(score_frame(p, g, object_id, tol)?);
    }
    ObjectScore::from_frame_scores(object_id, &frames).ok_or(MetricError::NoFramesEvaluated(gts.len()))
}

/// Object scores of one sequence plus their means.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult<T> {
    pub sequence_id: String,
    pub objects: Vec<ObjectScore<T>>,
    pub j: T,
    pub f: T,
    pub jf: T,
}

impl<T: Scalar> SequenceResult<T> {
    /// Objects are stored sorted by id. Means are zero for an object-less
    /// sequence.
    pub fn new(sequence_id: impl Into<String>, mut objects: Vec<ObjectScore<T>>) -> Self {
        objects.sort_by_key(|o| o.object_id);
        let js: Vec<T> = objects.iter().map(|o| o.j).collect();
        let fs: Vec<T> = objects.iter().map(|o| o.f).collect();
        let j = crate::scalar::mean(&js).unwrap_or_else(T::zero);
        let f = crate::scalar::mean(&fs).unwrap_or_else(T::zero);
        Self { sequence_id: sequence_id.into(), objects, j, f, jf: (j + f) / T::lit(2.0) }
    }
}

/// Scores every object present in the groundtruth.
pub fn score_sequence<T: Scalar>(
    sequence_id: &str,
    preds: &[LabelMap],
    gts: &[LabelMap],
    config: &MetricConfig,
) -> Result<SequenceResult<T>, MetricError> {
    let ids: BTreeSet<ObjectId> = gts.iter().flat_map(|g| g.labels().iter().copied()).filter(|&v| v != 0).collect();
    let objects = ids
        .into_iter()
        .map(|id| score_object(preds, gts, id, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SequenceResult::new(sequence_id, objects))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetResult<T> {
    pub sequences: Vec<SequenceResult<T>>,
    pub j: T,
    pub f: T,
    pub jf: T,
}

/// Dataset means over all (sequence, object) pairs. Inputs are sorted by
/// sequence id and object id first, so the result does not depend on input
/// order.
pub fn aggregate<T: Scalar>(results: Vec<(String, Vec<ObjectScore<T>>)>) -> Result<DatasetResult<T>, MetricError> {
    let mut sequences: Vec<SequenceResult<T>> =
        results.into_iter().map(|(id, objs)| SequenceResult::new(id, objs)).collect();
    sequences.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    for pair in sequences.windows(2) {
        if pair[0].sequence_id == pair[1].sequence_id {
            return Err(MetricError::DuplicateSequence(pair[0].sequence_id.clone()));
        }
    }
    let all: Vec<&ObjectScore<T>> = sequences.iter().flat_map(|s| &s.objects).collect();
    if all.is_empty() {
        return Err(MetricError::Empty);
    }
    let js: Vec<T> = all.iter().map(|o| o.j).collect();
    let fs: Vec<T> = all.iter().map(|o| o.f).collect();
    let j = crate::scalar::mean(&js).expect("nonempty");
    let f = crate::scalar::mean(&fs).expect("nonempty");
    Ok(DatasetResult { sequences, j, f, jf: (j + f) / T::lit(2.0) })
}

/// A unit-interval score as a percentage rounded to one decimal, with
/// decimal ties (after snapping away binary noise) going to the even digit.
pub fn report_percent<T: Scalar>(score: T) -> f64 {
    let tenths = score.as_f64() * 1000.0;
    let snapped = (tenths * 1e6).round() / 1e6;
    let floor = snapped.floor();
    let frac = snapped - floor;
    let rounded = if (frac - 0.5).abs() < 1e-9 {
        if floor.rem_euclid(2.0) == 0.0 { floor } else { floor + 1.0 }
    } else {
        snapped.round()
    };
    rounded / 10.0
}

/// Aggregates already-scored sequences.
pub fn aggregate_sequences<T: Scalar>(sequences: Vec<SequenceResult<T>>) -> Result<DatasetResult<T>, MetricError> {
    aggregate(sequences.into_iter().map(|s| (s.sequence_id, s.objects)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn report_percent_ties_to_even() {
        assert_eq!(report_percent(0.8845), 88.4);
        assert_eq!(report_percent(0.9195), 92.0);
        assert_eq!(report_percent(0.893), 89.3);
        assert_eq!(report_percent(0.88451), 88.5);
        assert_eq!(report_percent(1.0f32), 100.0);
        assert_eq!(report_percent(0.0), 0.0);
    }

    fn rows(w: u32, h: u32, r0: u32, r1: u32) -> BinaryMask {
        BinaryMask::rect(w, h, 0, r0, w, r1)
    }

    #[test]
    fn jaccard_examples() {
        let a = BinaryMask::rect(8, 8, 1, 1, 5, 5);
        assert_eq!(jaccard::<f64>(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::rect(8, 8, 6, 6, 8, 8);
        assert_eq!(jaccard::<f64>(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::empty(8, 8);
        assert_eq!(jaccard::<f32>(&e, &e).unwrap(), 1.0);
        // rows 0-3 vs rows 2-5: 16 shared of 48
        let j: f64 = jaccard(&rows(8, 8, 0, 4), &rows(8, 8, 2, 6)).unwrap();
        assert_eq!(j, 16.0 / 48.0);
        assert!(matches!(jaccard::<f64>(&a, &BinaryMask::empty(4, 4)), Err(MetricError::DimensionMismatch(..))));
    }

    #[test]
    fn boundary_examples() {
        let a = BinaryMask::rect(16, 16, 4, 4, 10, 10);
        assert_eq!(boundary_f::<f64>(&a, &a, 1).unwrap(), 1.0);
        let mut p = BinaryMask::empty(16, 16);
        p.set(1, 1, true);
        let mut g = BinaryMask::empty(16, 16);
        g.set(10, 10, true);
        assert_eq!(boundary_f::<f64>(&p, &g, 3).unwrap(), 0.0);
        let e = BinaryMask::empty(16, 16);
        assert_eq!(boundary_f::<f64>(&e, &e, 2).unwrap(), 1.0);
        assert_eq!(boundary_f::<f64>(&e, &a, 2).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square_tolerance_one() {
        // Brute-force all-pairs matcher for the 1-px shifted square.
        let gt = BinaryMask::rect(16, 16, 4, 4, 10, 10);
        let pred = BinaryMask::rect(16, 16, 5, 4, 11, 10);
        let got: f64 = boundary_f(&pred, &gt, 1).unwrap();
        let pb = inner_boundary(&pred);
        let gb = inner_boundary(&gt);
        let pts = |m: &BinaryMask| {
            let mut v = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    if m.get(x, y) {
                        v.push((x as i64, y as i64));
                    }
                }
            }
            v
        };
        let (pp, gp) = (pts(&pb), pts(&gb));
        let near = |a: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= 1);
        let mp = pp.iter().filter(|a| near(a, &gp)).count() as f64 / pp.len() as f64;
        let mg = gp.iter().filter(|a| near(a, &pp)).count() as f64 / gp.len() as f64;
        let expected = 2.0 * mp * mg / (mp + mg);
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(got, 1.0);
        let strict: f64 = boundary_f(&pred, &gt, 0).unwrap();
        assert!(strict < 1.0 && strict > 0.0);
    }

    #[test]
    fn tolerance_resolution() {
        assert_eq!(BoundaryTolerance::default().resolve(854, 480), 8);
        assert_eq!(BoundaryTolerance::Pixels(3).resolve(10, 10), 3);
        assert_eq!(BoundaryTolerance::DiagonalFraction(0.008).resolve(160, 120), 2);
    }

    #[test]
    fn frame_policies() {
        assert_eq!(FramePolicy::SkipFirst.frames(5), 1..5);
        assert_eq!(FramePolicy::StrictDavis.frames(5), 1..4);
        assert_eq!(FramePolicy::All.frames(5), 0..5);
        assert!(FramePolicy::SkipFirst.frames(1).is_empty());
        assert!(FramePolicy::StrictDavis.frames(2).is_empty());
    }

    #[test]
    fn score_object_perfect_and_errors() {
        let gt: Vec<LabelMap> = (0..4)
            .map(|i| {
                let m = BinaryMask::rect(12, 12, i, i, i + 5, i + 5);
                crate::mask::compose_labelmap(&[(1, m)], &Default::default()).unwrap()
            })
            .collect();
        let s: ObjectScore<f64> = score_object(&gt, &gt, 1, &MetricConfig::default()).unwrap();
        assert_eq!((s.j, s.f, s.jf), (1.0, 1.0, 1.0));
        assert_eq!(score_object::<f64>(&gt, &gt, 2, &MetricConfig::default()), Err(MetricError::ObjectAbsent(2)));
        assert!(matches!(score_object::<f64>(&gt[..2], &gt, 1, &MetricConfig::default()), Err(MetricError::LengthMismatch { .. })));
        assert_eq!(score_object::<f64>(&gt[..1], &gt[..1], 1, &MetricConfig::default()), Err(MetricError::NoFramesEvaluated(1)));
    }

    #[test]
    fn table_rows_arithmetic() {
        // constant per-frame scores reproduce the reported table means
        let tam = ObjectScore::from_frame_scores(1, &[(0.875f64, 0.894); 10]).unwrap();
        assert!((tam.jf - 0.8845).abs() < 1e-12);
        let stm = ObjectScore::new(1, 0.887f64, 0.899);
        assert!((stm.jf - 0.893).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(vec![("a".to_string(), vec![ObjectScore::new(1, 0.5f64, 0.7)])]).unwrap();
        assert_eq!((one.j, one.f), (0.5, 0.7));
        let two = aggregate(vec![("a".into(), vec![ObjectScore::new(1, 0.8f64, 0.8)]), ("b".into(), vec![ObjectScore::new(1, 0.6, 0.6)])]).unwrap();
        assert!((two.j - 0.7).abs() < 1e-15);
        assert_eq!(two.jf, (two.j + two.f) / 2.0);
        assert_eq!(aggregate::<f64>(vec![]), Err(MetricError::Empty));
        assert!(matches!(
            aggregate(vec![("a".into(), vec![ObjectScore::new(1, 0.1f64, 0.1)]), ("a".into(), vec![])]),
            Err(MetricError::DuplicateSequence(_))
        ));
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1u32..20, 1u32..20).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)).prop_map(
                move |(a, b)| (BinaryMask::new(w, h, a).unwrap(), BinaryMask::new(w, h, b).unwrap()),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((a, b) in arb_pair(), tol in 0u32..4) {
            prop_assert_eq!(jaccard::<f64>(&a, &b).unwrap(), jaccard::<f64>(&b, &a).unwrap());
            let f1: f64 = boundary_f(&a, &b, tol).unwrap();
            let f2: f64 = boundary_f(&b, &a, tol).unwrap();
            prop_assert!((f1 - f2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn adding_a_correct_pixel_never_lowers_j((a, b) in arb_pair()) {
            let before: f64 = jaccard(&a, &b).unwrap();
            if let Some(i) = (0..b.bits().len()).find(|&i| b.bits()[i] && !a.bits()[i]) {
                let mut bits = a.bits().to_vec();
                bits[i] = true;
                let grown = BinaryMask::new(a.width(), a.height(), bits).unwrap();
                prop_assert!(jaccard::<f64>(&grown, &b).unwrap() >= before);
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(scores in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12), seed in any::<u64>()) {
            let input: Vec<(String, Vec<ObjectScore<f64>>)> = scores
                .iter()
                .enumerate()
                .map(|(i, &(j, f))| (format!("s{i}"), vec![ObjectScore::new(1, j, f), ObjectScore::new(2, f, j)]))
                .collect();
            let mut shuffled = input.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            for (_, objs) in shuffled.iter_mut() {
                objs.reverse();
            }
            prop_assert_eq!(aggregate(input).unwrap(), aggregate(shuffled).unwrap());
        }
    }
}
