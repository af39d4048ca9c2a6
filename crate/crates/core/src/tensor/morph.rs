//! Connected-component labelling and grayscale reconstruction by dilation.

use std::collections::VecDeque;

use super::grid::{BinaryGrid, Grid2D};
use crate::error::{Error, Result};

/// Which neighbours of a cell count as connected to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Component labels: 0 is background, foreground cells carry `1..=count`
/// assigned in row-major order of each component's first cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

pub fn connected_components(b: &BinaryGrid, connectivity: Connectivity) -> Labels {
    let (h, w) = b.shape();
    let mut labels = vec![0u32; h * w];
    let mut count = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !b.data()[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        let id = count as u32;
        labels[start] = id;
        queue.push_back(start);
        while let Some(cell) = queue.pop_front() {
            let (y, x) = ((cell / w) as isize, (cell % w) as isize);
            for &(dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if b.data()[n] && labels[n] == 0 {
                    labels[n] = id;
                    queue.push_back(n);
                }
            }
        }
    }
    Labels {
        height: h,
        width: w,
        labels,
        count,
    }
}

/// 3×3 grayscale dilation (max over the 8-neighbourhood and the cell itself).
pub fn dilate3x3(g: &Grid2D) -> Grid2D {
    let (h, w) = (g.height() as isize, g.width() as isize);
    Grid2D::from_fn(g.height(), g.width(), |y, x| {
        let mut m = f64::NEG_INFINITY;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && ny < h && nx < w {
                    m = m.max(g.get(ny as usize, nx as usize));
                }
            }
        }
        m
    })
}

/// Grayscale reconstruction by dilation of `mask` from `marker`.
///
/// Iterates `r ← min(dilate₃ₓ₃(r), mask)` from `r = marker` until nothing
/// changes. Every step is monotone and values only ever take existing marker or
/// mask values, so the loop terminates.
pub fn morph_reconstruct(marker: &Grid2D, mask: &Grid2D) -> Result<Grid2D> {
    if marker.shape() != mask.shape() {
        return Err(Error::shape(
            "morph_reconstruct",
            format!("marker {:?} vs mask {:?}", marker.shape(), mask.shape()),
        ));
    }
    if let Some(i) = marker
        .data()
        .iter()
        .zip(mask.data())
        .position(|(m, k)| m > k)
    {
        return Err(Error::Precondition {
            op: "morph_reconstruct",
            detail: format!(
                "marker exceeds mask at cell {i} ({} > {})",
                marker.data()[i],
                mask.data()[i]
            ),
        });
    }
    let mut current = marker.clone();
    loop {
        let dilated = dilate3x3(&current);
        let next = Grid2D::from_fn(mask.height(), mask.width(), |y, x| {
            dilated.get(y, x).min(mask.get(y, x))
        });
        if next == current {
            return Ok(current);
        }
        current = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    fn recursive_fill(b: &BinaryGrid, seen: &mut [bool], y: isize, x: isize, eight: bool) {
        let (h, w) = (b.height() as isize, b.width() as isize);
        if y < 0 || x < 0 || y >= h || x >= w {
            return;
        }
        let i = (y * w + x) as usize;
        if seen[i] || !b.data()[i] {
            return;
        }
        seen[i] = true;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                    continue;
                }
                recursive_fill(b, seen, y + dy, x + dx, eight);
            }
        }
    }

    fn flood_count(b: &BinaryGrid, eight: bool) -> usize {
        let mut seen = vec![false; b.data().len()];
        let mut n = 0;
        for y in 0..b.height() {
            for x in 0..b.width() {
                if b.get(y, x) && !seen[y * b.width() + x] {
                    n += 1;
                    recursive_fill(b, &mut seen, y as isize, x as isize, eight);
                }
            }
        }
        n
    }

    #[test]
    fn empty_grid_has_no_components() {
        let l = connected_components(&BinaryGrid::empty(4, 4), Connectivity::Eight);
        assert_eq!(l.count, 0);
        assert!(l.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let mut b = BinaryGrid::empty(3, 3);
        b.set(0, 0, true);
        b.set(1, 1, true);
        assert_eq!(connected_components(&b, Connectivity::Four).count, 2);
        assert_eq!(connected_components(&b, Connectivity::Eight).count, 1);
    }

    #[test]
    fn random_grids_match_flood_fill() {
        let mut s = SeededStream::new(17, 0);
        for trial in 0..200 {
            let h = 1 + s.below(16);
            let w = 1 + s.below(16);
            let density = 0.2 + 0.5 * (trial as f64 / 200.0);
            let b = BinaryGrid::from_fn(h, w, |_, _| s.unit() < density);
            for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
                let l = connected_components(&b, conn);
                assert_eq!(l.count, flood_count(&b, eight));
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        assert_eq!(l.labels[i] != 0, b.get(y, x));
                        if !b.get(y, x) {
                            continue;
                        }
                        for &(dy, dx) in conn.offsets() {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                                let n = ny as usize * w + nx as usize;
                                if b.data()[n] {
                                    assert_eq!(l.labels[n], l.labels[i]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reconstruct_marker_equal_mask() {
        let mut s = SeededStream::new(2, 0);
        let mask = Grid2D::from_fn(6, 6, |_, _| s.unit());
        assert_eq!(morph_reconstruct(&mask, &mask).unwrap(), mask);
    }

    #[test]
    fn reconstruct_zero_marker() {
        let mut s = SeededStream::new(3, 0);
        let mask = Grid2D::from_fn(6, 6, |_, _| s.unit());
        let z = Grid2D::zeros(6, 6);
        assert_eq!(morph_reconstruct(&z, &mask).unwrap(), z);
    }

    #[test]
    fn reconstruct_rejects_marker_above_mask() {
        let mask = Grid2D::zeros(3, 3);
        let mut marker = Grid2D::zeros(3, 3);
        marker.set(1, 1, 0.5);
        assert!(matches!(
            morph_reconstruct(&marker, &mask),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn reconstruct_keeps_only_marked_bump() {
        // Two bumps separated by a zero column at x = 4.
        let mask = Grid2D::from_fn(8, 8, |y, x| {
            let bump = |cy: f64, cx: f64, amp: f64| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                amp * (-d2 / 2.0).exp()
            };
            if x < 4 {
                bump(3.0, 1.5, 1.0)
            } else if x > 4 {
                bump(4.0, 6.0, 0.6)
            } else {
                0.0
            }
        });
        let peak = mask.argmax().unwrap();
        let mut marker = Grid2D::zeros(8, 8);
        marker.set(peak / 8, peak % 8, mask.data()[peak]);
        let r = morph_reconstruct(&marker, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if x < 4 {
                    assert_eq!(r.get(y, x), mask.get(y, x));
                } else {
                    assert_eq!(r.get(y, x), 0.0);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn reconstruction_is_a_bounded_fixpoint(
            vals in proptest::collection::vec(0.0f64..1.0, 49),
            frac in proptest::collection::vec(0.0f64..1.0, 49),
        ) {
            let mask = Grid2D::from_vec(7, 7, vals).unwrap();
            let marker = Grid2D::from_fn(7, 7, |y, x| {
                let i = y * 7 + x;
                if frac[i] > 0.8 { mask.data()[i] * frac[i] } else { 0.0 }
            });
            let r = morph_reconstruct(&marker, &mask).unwrap();
            let d = dilate3x3(&r);
            for i in 0..49 {
                proptest::prop_assert!(marker.data()[i] <= r.data()[i]);
                proptest::prop_assert!(r.data()[i] <= mask.data()[i]);
                proptest::prop_assert_eq!(d.data()[i].min(mask.data()[i]), r.data()[i]);
            }
        }
    }
}
