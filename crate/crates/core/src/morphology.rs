//! Binary raster operations: distance transforms, erosion, dilation,
//! boundaries and connected components.
//!
//! Pixels outside the frame count as background everywhere in this module.

use crate::mask::BinaryMask;

/// Sentinel distance for pixels with no reachable target.
pub const UNREACHABLE: u32 = u32::MAX;

/// Two-pass unit-weight chamfer distance from every pixel to the nearest
/// pixel where `target(i)` holds: city-block with 4 neighbours, chessboard
/// when `diagonal` adds the other 4. When `frame_is_target` is set, the area
/// outside the frame also counts as target.
fn chamfer(width: u32, height: u32, frame_is_target: bool, diagonal: bool, target: impl Fn(usize) -> bool) -> Vec<u32> {
    let (w, h) = (width as usize, height as usize);
    let big = UNREACHABLE / 2;
    let edge = if frame_is_target { 0 } else { big };
    let mut d: Vec<u32> = (0..w * h).map(|i| if target(i) { 0 } else { big }).collect();
    let at = |d: &[u32], x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            edge
        } else {
            d[y as usize * w + x as usize]
        }
    };
    let forward: &[(isize, isize)] = if diagonal { &[(0, -1), (-1, 0), (-1, -1), (1, -1)] } else { &[(0, -1), (-1, 0)] };
    let backward: &[(isize, isize)] = if diagonal { &[(0, 1), (1, 0), (1, 1), (-1, 1)] } else { &[(0, 1), (1, 0)] };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let best = forward.iter().map(|&(dx, dy)| at(&d, x as isize + dx, y as isize + dy)).min().unwrap_or(big);
            d[i] = d[i].min(best.saturating_add(1));
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let best = backward.iter().map(|&(dx, dy)| at(&d, x as isize + dx, y as isize + dy)).min().unwrap_or(big);
            d[i] = d[i].min(best.saturating_add(1));
        }
    }
    for v in d.iter_mut() {
        if *v >= big {
            *v = UNREACHABLE;
        }
    }
    d
}

/// Depth of each foreground pixel: city-block distance to the nearest
/// background pixel or the frame edge. Background pixels get 0.
pub fn depth_map(mask: &BinaryMask) -> Vec<u32> {
    let bits = mask.bits();
    chamfer(mask.width(), mask.height(), true, false, |i| !bits[i])
}

/// City-block distance from every pixel to the nearest set pixel of `mask`
/// (0 inside). [`UNREACHABLE`] everywhere when the mask is empty.
pub fn distance_to(mask: &BinaryMask) -> Vec<u32> {
    let bits = mask.bits();
    chamfer(mask.width(), mask.height(), false, false, |i| bits[i])
}

/// Chessboard (8-connected) distance from every pixel to the nearest set
/// pixel of `mask` (0 inside). [`UNREACHABLE`] everywhere when the mask is
/// empty.
pub fn chessboard_distance_to(mask: &BinaryMask) -> Vec<u32> {
    let bits = mask.bits();
    chamfer(mask.width(), mask.height(), false, true, |i| bits[i])
}

/// Erosion by `k` iterations of the 4-neighbour cross.
pub fn erode(mask: &BinaryMask, k: u32) -> BinaryMask {
    if k == 0 {
        return mask.clone();
    }
    let depth = depth_map(mask);
    let bits = depth.iter().map(|&d| d > k).collect();
    BinaryMask::new(mask.width(), mask.height(), bits).expect("same dims")
}

/// Foreground pixels with at least one 4-neighbour in the background or
/// outside the frame.
pub fn inner_boundary(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        x == 0 || y == 0 || x + 1 == w || y + 1 == h
            || !mask.get(x - 1, y)
            || !mask.get(x + 1, y)
            || !mask.get(x, y - 1)
            || !mask.get(x, y + 1)
    })
}

/// Offsets of the closed Euclidean disk `dx² + dy² <= r²`.
pub fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilation by a closed Euclidean disk of the given radius.
pub fn dilate_disk(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let offsets = disk_offsets(radius);
    let mut out = BinaryMask::empty(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as u32, y as u32) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
    }
    out
}

/// One 4-connected component. Pixels are sorted row-major linear indices;
/// `first` is the smallest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub first: usize,
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_mask(&self, width: u32, height: u32) -> BinaryMask {
        let mut bits = vec![false; width as usize * height as usize];
        for &i in &self.pixels {
            bits[i] = true;
        }
        BinaryMask::new(width, height, bits).expect("same dims")
    }
}

/// 4-connected components ordered by their first row-major pixel.
pub fn components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = mask.bits();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        pixels.sort_unstable();
        out.push(Component { first: start, pixels });
    }
    out
}

/// Largest component; ties go to the one whose first pixel comes first.
pub fn largest_component(mask: &BinaryMask) -> Option<Component> {
    components(mask)
        .into_iter()
        .fold(None, |best: Option<Component>, c| match best {
            Some(b) if b.len() >= c.len() => Some(b),
            _ => Some(c),
        })
}

/// Interior pole of a region: the pixel with the greatest city-block
/// distance to the region's complement, first in row-major order on ties.
pub fn interior_pole(region: &BinaryMask) -> Option<(u32, u32)> {
    let depth = depth_map(region);
    let mut best: Option<(usize, u32)> = None;
    for (i, &d) in depth.iter().enumerate() {
        if d == 0 {
            continue;
        }
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    let w = region.width() as usize;
    best.map(|(i, _)| ((i % w) as u32, (i / w) as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: u32, side: u32, at: u32) -> BinaryMask {
        BinaryMask::rect(n, n, at, at, at + side, at + side)
    }

    #[test]
    fn erosion_of_square_shrinks_each_side() {
        let m = square(20, 10, 5);
        for k in 0..6 {
            let e = erode(&m, k);
            let side = 10u32.saturating_sub(2 * k) as usize;
            assert_eq!(e.area(), side * side, "k={k}");
            assert!(e.is_subset_of(&m));
        }
    }

    #[test]
    fn erosion_matches_iterated_cross() {
        // brute force: erode one step at a time by checking 4-neighbours
        let m = BinaryMask::from_fn(12, 9, |x, y| (x * 7 + y * 3) % 5 != 0 || (x > 3 && x < 9));
        let mut iter = m.clone();
        for k in 1..4 {
            let prev = iter.clone();
            let (w, h) = prev.dims();
            iter = BinaryMask::from_fn(w, h, |x, y| {
                prev.get(x, y)
                    && x > 0
                    && y > 0
                    && x + 1 < w
                    && y + 1 < h
                    && prev.get(x - 1, y)
                    && prev.get(x + 1, y)
                    && prev.get(x, y - 1)
                    && prev.get(x, y + 1)
            });
            assert_eq!(erode(&m, k), iter, "k={k}");
        }
    }

    #[test]
    fn distance_to_empty_is_unreachable() {
        let d = distance_to(&BinaryMask::empty(3, 3));
        assert!(d.iter().all(|&v| v == UNREACHABLE));
    }

    #[test]
    fn distance_to_point() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = distance_to(&m);
        assert_eq!(d[0], 4);
        assert_eq!(d[2 * 5 + 2], 0);
        assert_eq!(d[2 * 5 + 4], 2);
    }

    fn brute_distance(m: &BinaryMask, metric: impl Fn(i64, i64) -> i64) -> Vec<u32> {
        let (w, h) = m.dims();
        let set: Vec<(i64, i64)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| m.get(x, y)).map(|(x, y)| (x as i64, y as i64)).collect();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x as i64, y as i64)))
            .map(|(x, y)| {
                set.iter().map(|&(a, b)| metric(x - a, y - b) as u32).min().unwrap_or(UNREACHABLE)
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn distance_transforms_match_brute_force(w in 1u32..12, h in 1u32..12, seed in proptest::prelude::any::<u64>()) {
            let m = BinaryMask::from_fn(w, h, |x, y| (seed >> ((x * 7 + y * 13) % 64)) & 3 == 0);
            proptest::prop_assert_eq!(distance_to(&m), brute_distance(&m, |dx, dy| dx.abs() + dy.abs()));
            proptest::prop_assert_eq!(chessboard_distance_to(&m), brute_distance(&m, |dx, dy| dx.abs().max(dy.abs())));
        }
    }

    #[test]
    fn boundary_of_square_is_ring() {
        let b = inner_boundary(&square(10, 4, 3));
        assert_eq!(b.area(), 12);
        let full = inner_boundary(&BinaryMask::full(3, 3));
        assert_eq!(full.area(), 8);
    }

    #[test]
    fn components_order_and_size() {
        let mut m = BinaryMask::rect(10, 10, 6, 0, 8, 2);
        for (x, y) in [(0, 5), (1, 5), (0, 6)] {
            m.set(x, y, true);
        }
        let cs = components(&m);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].first, 6);
        assert_eq!(cs[0].len(), 4);
        assert_eq!(cs[1].len(), 3);
        // equal sizes: first wins
        let two = BinaryMask::from_fn(7, 1, |x, _| x != 3);
        assert_eq!(largest_component(&two).unwrap().first, 0);
    }

    #[test]
    fn pole_of_centered_square() {
        let gt = BinaryMask::rect(11, 11, 3, 3, 8, 8);
        assert_eq!(interior_pole(&gt), Some((5, 5)));
        assert_eq!(interior_pole(&BinaryMask::empty(4, 4)), None);
    }

    #[test]
    fn disk_dilation_radius_one_is_cross() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = dilate_disk(&m, 1);
        assert_eq!(d.area(), 5);
        assert_eq!(dilate_disk(&m, 2).area(), 13);
    }
}
