//! Turning propagator output into segmenter prompts, and the simulated
//! user that places clicks for unattended evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::mask::{BinaryMask, MaskError, ObjectId, PointPrompt, Polarity};
use crate::morphology::{disk_offsets, interior_pole, largest_component};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("affinity is {0:?} but mask is {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("groundtruth mask is empty")]
    EmptyGroundtruth,
    #[error("need at least one click")]
    ZeroClicks,
    #[error("prompt resolution must be positive")]
    ZeroResolution,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Per-object per-pixel confidence in `[0, 1]` emitted by a propagator.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityField<T> {
    object_id: ObjectId,
    width: u32,
    height: u32,
    values: Vec<T>,
}

impl<T: Scalar> AffinityField<T> {
    /// Values are clamped into `[0, 1]`; NaN becomes 0.
    pub fn new(object_id: ObjectId, width: u32, height: u32, values: Vec<T>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        if values.len() != width as usize * height as usize {
            return Err(MaskError::RasterSize { width, height, actual: values.len() });
        }
        let values = values.into_iter().map(Scalar::unit_clamp).collect();
        Ok(Self { object_id, width, height, values })
    }

    pub fn uniform(object_id: ObjectId, width: u32, height: u32, v: T) -> Self {
        Self::new(object_id, width, height, vec![v; width as usize * height as usize]).expect("valid dims")
    }

    pub fn object_id(&self) -> ObjectId {
        self.object_id
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> T {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// Mean affinity over the set pixels of `mask`; zero for an empty mask.
    pub fn mean_over(&self, mask: &BinaryMask) -> T {
        let mut sum = T::zero();
        let mut n = 0usize;
        for (&v, &b) in self.values.iter().zip(mask.bits()) {
            if b {
                sum = sum + v;
                n += 1;
            }
        }
        if n == 0 {
            T::zero()
        } else {
            sum / T::from_count(n)
        }
    }

    pub fn peak(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

/// Coarse mask conditioning: a square grid of signed logits plus the
/// dimensions of the mask it was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrompt {
    pub res: u32,
    pub logits: Vec<f32>,
    pub src_width: u32,
    pub src_height: u32,
}

impl MaskPrompt {
    /// Nearest-neighbour resample back to the source size; positive logits
    /// are foreground.
    pub fn decode(&self) -> BinaryMask {
        let (res, sw, sh) = (self.res as u64, self.src_width as u64, self.src_height as u64);
        BinaryMask::from_fn(self.src_width, self.src_height, |x, y| {
            let gx = (x as u64 * res / sw) as usize;
            let gy = (y as u64 * res / sh) as usize;
            self.logits[gy * res as usize + gx] > 0.0
        })
    }
}

/// Tunables for prompt projection and the simulated user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub k_pos: usize,
    pub k_neg: usize,
    pub min_dist: u32,
    pub init_clicks: usize,
    pub prompt_res: u32,
    pub logit_mag: f32,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { k_pos: 5, k_neg: 3, min_dist: 10, init_clicks: 3, prompt_res: 256, logit_mag: 8.0 }
    }
}

/// Samples `mask` onto a `res x res` grid. Grid cell `(gx, gy)` reads source
/// pixel `(gx * w / res, gy * h / res)`.
pub fn encode_mask_prompt(mask: &BinaryMask, res: u32, logit_mag: f32) -> Result<MaskPrompt, PromptError> {
    if res == 0 {
        return Err(PromptError::ZeroResolution);
    }
    let (w, h) = (mask.width() as u64, mask.height() as u64);
    let r = res as u64;
    let mut logits = Vec::with_capacity((r * r) as usize);
    for gy in 0..r {
        let sy = (gy * h / r) as u32;
        for gx in 0..r {
            let sx = (gx * w / r) as u32;
            logits.push(if mask.get(sx, sy) { logit_mag } else { -logit_mag });
        }
    }
    Ok(MaskPrompt { res, logits, src_width: mask.width(), src_height: mask.height() })
}

/// Greedy non-maximum suppression: highest value first, row-major order on
/// ties, rejecting candidates closer than `min_dist` to an accepted point.
fn pick_maxima<T: Scalar>(mut candidates: Vec<(usize, T)>, k: usize, min_dist: u32, width: u32) -> Vec<(u32, u32)> {
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    let w = width as usize;
    let min_sq = min_dist as i64 * min_dist as i64;
    let mut picked: Vec<(u32, u32)> = Vec::with_capacity(k);
    for (i, _) in candidates {
        if picked.len() == k {
            break;
        }
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let clear = picked.iter().all(|&(px, py)| {
            let (dx, dy) = (x - px as i64, y - py as i64);
            dx * dx + dy * dy >= min_sq
        });
        if clear {
            picked.push((x as u32, y as u32));
        }
    }
    picked
}

/// Projects an affinity field into point prompts.
///
/// Positives are the strongest pixels inside `mask`. Negatives are the
/// strongest pixels outside it whose affinity is nonzero but below half the
/// field's peak: the model is unsure there. Pixels outside the mask at or
/// above half the peak read as object the mask missed; they are left to the
/// mask prompt and never clicked negative. Positives come first in the output.
pub fn project_prompts<T: Scalar>(
    affinity: &AffinityField<T>,
    mask: &BinaryMask,
    k_pos: usize,
    k_neg: usize,
    min_dist: u32,
) -> Result<Vec<PointPrompt>, PromptError> {
    if affinity.dims() != mask.dims() {
        return Err(PromptError::DimensionMismatch(affinity.dims(), mask.dims()));
    }
    let id = affinity.object_id();
    let half_peak = affinity.peak() * T::lit(0.5);
    let inside: Vec<(usize, T)> = affinity
        .values()
        .iter()
        .zip(mask.bits())
        .enumerate()
        .filter(|(_, (_, &b))| b)
        .map(|(i, (&v, _))| (i, v))
        .collect();
    let outside: Vec<(usize, T)> = affinity
        .values()
        .iter()
        .zip(mask.bits())
        .enumerate()
        .filter(|(_, (&v, &b))| !b && v > T::zero() && v < half_peak)
        .map(|(i, (&v, _))| (i, v))
        .collect();
    let mut out: Vec<PointPrompt> = pick_maxima(inside, k_pos, min_dist, affinity.width)
        .into_iter()
        .map(|(x, y)| PointPrompt::positive(x, y, id))
        .collect();
    out.extend(
        pick_maxima(outside, k_neg, min_dist, affinity.width)
            .into_iter()
            .map(|(x, y)| PointPrompt::negative(x, y, id)),
    );
    Ok(out)
}

/// One simulated corrective click: the interior pole of the largest error
/// component, positive when it lands on the object.
pub fn simulate_click(
    gt: &BinaryMask,
    current: Option<&BinaryMask>,
    object_id: ObjectId,
) -> Result<Option<PointPrompt>, PromptError> {
    let error = match current {
        Some(cur) => gt.xor(cur)?,
        None => gt.clone(),
    };
    let Some(component) = largest_component(&error) else { return Ok(None) };
    let region = component.to_mask(gt.width(), gt.height());
    let (x, y) = interior_pole(&region).expect("nonempty component");
    let polarity = if gt.get(x, y) { Polarity::Positive } else { Polarity::Negative };
    Ok(Some(PointPrompt { x, y, polarity, object_id }))
}

/// Initial clicks without a segmenter in the loop: the first click of
/// [`simulate_click`], then poles of the largest remaining groundtruth
/// component after clearing a `min_dist` disk around each earlier click.
/// May return fewer than `n_clicks` when the object is exhausted.
pub fn simulate_init_clicks(
    gt: &BinaryMask,
    n_clicks: usize,
    min_dist: u32,
    object_id: ObjectId,
) -> Result<Vec<PointPrompt>, PromptError> {
    if n_clicks == 0 {
        return Err(PromptError::ZeroClicks);
    }
    if gt.is_empty() {
        return Err(PromptError::EmptyGroundtruth);
    }
    let mut clicks: Vec<PointPrompt> = simulate_click(gt, None, object_id)?.into_iter().collect();
    let mut remaining = gt.clone();
    let (w, h) = (gt.width() as i64, gt.height() as i64);
    let offsets = disk_offsets(min_dist);
    while clicks.len() < n_clicks {
        let last = clicks.last().expect("first click exists");
        for &(dx, dy) in &offsets {
            let (x, y) = (last.x as i64 + dx, last.y as i64 + dy);
            if x >= 0 && y >= 0 && x < w && y < h {
                remaining.set(x as u32, y as u32, false);
            }
        }
        let Some(component) = largest_component(&remaining) else { break };
        let region = component.to_mask(gt.width(), gt.height());
        let (x, y) = interior_pole(&region).expect("nonempty component");
        clicks.push(PointPrompt::positive(x, y, object_id));
    }
    if clicks.len() < n_clicks {
        debug!(requested = n_clicks, produced = clicks.len(), "initial click budget exhausted the object");
    }
    Ok(clicks)
}

/// Initial clicks with a segmenter in the loop: each click corrects the
/// segmenter's output for the clicks so far. Stops early once the output
/// matches `gt`.
pub fn simulate_init_clicks_online<E>(
    gt: &BinaryMask,
    n_clicks: usize,
    object_id: ObjectId,
    mut segment: impl FnMut(&[PointPrompt]) -> Result<BinaryMask, E>,
) -> Result<Vec<PointPrompt>, E>
where
    E: From<PromptError>,
{
    if n_clicks == 0 {
        return Err(PromptError::ZeroClicks.into());
    }
    if gt.is_empty() {
        return Err(PromptError::EmptyGroundtruth.into());
    }
    let mut clicks = Vec::new();
    let mut current: Option<BinaryMask> = None;
    while clicks.len() < n_clicks {
        let Some(click) = simulate_click(gt, current.as_ref(), object_id)? else { break };
        clicks.push(click);
        current = Some(segment(&clicks)?);
    }
    Ok(clicks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::components;
    use proptest::prelude::*;

    #[test]
    fn zero_budget_gives_no_prompts() {
        let a = AffinityField::uniform(1, 4, 4, 0.5f32);
        let m = BinaryMask::full(4, 4);
        assert!(project_prompts(&a, &m, 0, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_affinity_breaks_ties_row_major() {
        let a = AffinityField::uniform(2, 6, 5, 0.5f64);
        let p = project_prompts(&a, &BinaryMask::full(6, 5), 1, 0, 3).unwrap();
        assert_eq!(p, vec![PointPrompt::positive(0, 0, 2)]);
    }

    #[test]
    fn left_half_top_two_match_sorted_oracle() {
        let values: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64 / 16.0).collect();
        let a = AffinityField::new(1, 4, 4, values.clone()).unwrap();
        let mask = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let got = project_prompts(&a, &mask, 2, 0, 0).unwrap();
        let mut cands: Vec<(usize, f64)> =
            (0..16).filter(|i| i % 4 < 2).map(|i| (i, values[i])).collect();
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let want: Vec<PointPrompt> = cands[..2]
            .iter()
            .map(|&(i, _)| PointPrompt::positive((i % 4) as u32, (i / 4) as u32, 1))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn negatives_skip_object_like_pixels() {
        // inside: 1.0; ring outside at 0.8 (missed object); far pixel at 0.3
        let mask = BinaryMask::rect(10, 10, 3, 3, 6, 6);
        let a = AffinityField::new(
            1,
            10,
            10,
            (0..100)
                .map(|i| {
                    let (x, y) = (i % 10, i / 10);
                    if (3..6).contains(&x) && (3..6).contains(&y) {
                        1.0f32
                    } else if (2..7).contains(&x) && (2..7).contains(&y) {
                        0.8
                    } else if (x, y) == (9, 9) {
                        0.3
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .unwrap();
        let p = project_prompts(&a, &mask, 1, 3, 0).unwrap();
        assert_eq!(p, vec![PointPrompt::positive(3, 3, 1), PointPrompt::negative(9, 9, 1)]);
    }

    #[test]
    fn mask_prompt_examples() {
        let full = encode_mask_prompt(&BinaryMask::full(7, 3), 256, 8.0).unwrap();
        assert_eq!(full.logits.len(), 256 * 256);
        assert!(full.logits.iter().all(|&v| v == 8.0));
        let none = encode_mask_prompt(&BinaryMask::empty(7, 3), 256, 8.0).unwrap();
        assert!(none.logits.iter().all(|&v| v == -8.0));
        let top = BinaryMask::from_fn(512, 512, |_, y| y < 256);
        let p = encode_mask_prompt(&top, 256, 8.0).unwrap();
        for gy in 0..256 {
            let row = &p.logits[gy * 256..(gy + 1) * 256];
            let want = if gy < 128 { 8.0 } else { -8.0 };
            assert!(row.iter().all(|&v| v == want), "row {gy}");
        }
        assert_eq!(p.decode(), top);
    }

    #[test]
    fn click_when_correct_is_none() {
        let gt = BinaryMask::rect(8, 8, 2, 2, 5, 5);
        assert_eq!(simulate_click(&gt, Some(&gt), 1).unwrap(), None);
    }

    #[test]
    fn click_on_centered_square_hits_center() {
        let gt = BinaryMask::rect(11, 11, 3, 3, 8, 8);
        // brute-force depth over the 25 square pixels
        let mut best = (0, 0, 0);
        for y in 3..8u32 {
            for x in 3..8u32 {
                let d = [x - 2, 8 - x, y - 2, 8 - y].into_iter().min().unwrap();
                if d > best.2 {
                    best = (x, y, d);
                }
            }
        }
        let c = simulate_click(&gt, None, 1).unwrap().unwrap();
        assert_eq!((c.x, c.y), (best.0, best.1));
        assert_eq!((c.x, c.y), (5, 5));
        assert!(c.is_positive());
    }

    #[test]
    fn spurious_blob_gets_negative_click() {
        let gt = BinaryMask::rect(30, 30, 2, 2, 6, 6);
        let mut cur = gt.clone();
        for y in 18..25 {
            for x in 18..25 {
                cur.set(x, y, true);
            }
        }
        let c = simulate_click(&gt, Some(&cur), 1).unwrap().unwrap();
        assert_eq!(c.polarity, Polarity::Negative);
        assert_eq!((c.x, c.y), (21, 21));
    }

    #[test]
    fn init_clicks_examples() {
        let gt = BinaryMask::rect(11, 11, 3, 3, 8, 8);
        let one = simulate_init_clicks(&gt, 1, 2, 1).unwrap();
        assert_eq!(one, vec![simulate_click(&gt, None, 1).unwrap().unwrap()]);

        let mut two = BinaryMask::rect(20, 10, 1, 1, 6, 6);
        for y in 1..6 {
            for x in 12..17 {
                two.set(x, y, true);
            }
        }
        let clicks = simulate_init_clicks(&two, 2, 1, 1).unwrap();
        assert_eq!(clicks.len(), 2);
        let comps = components(&two);
        for (c, comp) in clicks.iter().zip(&comps) {
            let idx = (c.y * 20 + c.x) as usize;
            assert!(comp.pixels.contains(&idx));
        }

        let tiny = BinaryMask::rect(5, 5, 2, 2, 3, 3);
        assert_eq!(simulate_init_clicks(&tiny, 4, 1, 1).unwrap().len(), 1);
        assert_eq!(simulate_init_clicks(&BinaryMask::empty(3, 3), 1, 1, 1), Err(PromptError::EmptyGroundtruth));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f32>, Vec<bool>, u32, u32)> {
        (2u32..14, 2u32..14).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (
                proptest::collection::vec(prop_oneof![Just(0.0f32), (0u32..=64).prop_map(|v| v as f32 / 64.0)], n),
                proptest::collection::vec(any::<bool>(), n),
                Just(w),
                Just(h),
            )
        })
    }

    proptest! {
        #[test]
        fn projected_prompts_respect_regions((vals, bits, w, h) in arb_case(), k_pos in 0usize..6, k_neg in 0usize..6, min_dist in 0u32..5) {
            let a = AffinityField::new(1, w, h, vals.clone()).unwrap();
            let m = BinaryMask::new(w, h, bits).unwrap();
            let p = project_prompts(&a, &m, k_pos, k_neg, min_dist).unwrap();
            let pos: Vec<_> = p.iter().filter(|c| c.is_positive()).collect();
            prop_assert!(pos.len() <= k_pos);
            prop_assert!(p.len() - pos.len() <= k_neg);
            for c in &p {
                prop_assert_eq!(m.get(c.x, c.y), c.is_positive());
            }
            for (i, a) in pos.iter().enumerate() {
                for b in &pos[i + 1..] {
                    let d2 = (a.x as i64 - b.x as i64).pow(2) + (a.y as i64 - b.y as i64).pow(2);
                    prop_assert!(d2 >= (min_dist as i64).pow(2));
                }
            }
            // power-of-two scaling is exact, so ordering must be unchanged
            for scale in [0.5f32, 0.25, 0.125] {
                let scaled = AffinityField::new(1, w, h, vals.iter().map(|v| v * scale).collect()).unwrap();
                prop_assert_eq!(&project_prompts(&scaled, &m, k_pos, k_neg, min_dist).unwrap(), &p);
            }
        }

        #[test]
        fn simulated_click_lands_in_error_component(
            (w, h, gt, cur) in (3u32..16, 3u32..16).prop_flat_map(|(w, h)| {
                let n = (w * h) as usize;
                (Just(w), Just(h), proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
            })
        ) {
            let gt = BinaryMask::new(w, h, gt).unwrap();
            let cur = BinaryMask::new(w, h, cur).unwrap();
            let err = gt.xor(&cur).unwrap();
            match simulate_click(&gt, Some(&cur), 3).unwrap() {
                None => prop_assert!(err.is_empty()),
                Some(c) => {
                    prop_assert!(err.get(c.x, c.y));
                    let biggest = largest_component(&err).unwrap();
                    prop_assert!(biggest.pixels.contains(&((c.y * w + c.x) as usize)));
                    prop_assert_eq!(c.is_positive(), gt.get(c.x, c.y));
                }
            }
        }
    }
}
