//! Reference implementations used to cross-check the production kernels.
//!
//! Each routine here takes a different route from the code it checks: explicit
//! scalar loops, recursive flood fill, full sorts, widest-path search, an SVD.
//! None of them call into [`crate::tensor`] kernels.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::tensor::{BinaryGrid, FeatureMatrix, Grid2D};

/// Triple-loop matrix product.
pub fn matmul(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// `exp(x) / Σ exp(x)` without max subtraction.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Sliding-window `Σ w·g` with clamped (replicate) indices.
pub fn conv_replicate(g: &Grid2D, weights: &[f64], size: usize) -> Grid2D {
    let half = (size / 2) as i64;
    let (h, w) = (g.height() as i64, g.width() as i64);
    Grid2D::from_fn(g.height(), g.width(), |y, x| {
        let mut acc = 0.0;
        for dy in -half..=half {
            for dx in -half..=half {
                let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, w - 1) as usize;
                acc += weights[((dy + half) as usize) * size + (dx + half) as usize] * g.get(sy, sx);
            }
        }
        acc
    })
}

/// Unnormalised Gaussian evaluated on the lattice, then divided by its sum.
pub fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Nearest-rank quantile from a full sort.
pub fn sort_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    let mut rank = (q * n as f64).ceil() as usize;
    if rank < 1 {
        rank = 1;
    }
    if rank > n {
        rank = n;
    }
    v[rank - 1]
}

fn fill(b: &BinaryGrid, seen: &mut [bool], y: isize, x: isize, eight: bool) {
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
            if (dy, dx) == (0, 0) || (!eight && dy != 0 && dx != 0) {
                continue;
            }
            fill(b, seen, y + dy, x + dx, eight);
        }
    }
}

/// Component count by recursive flood fill.
pub fn flood_fill_count(b: &BinaryGrid, eight: bool) -> usize {
    let mut seen = vec![false; b.data().len()];
    let mut n = 0;
    for y in 0..b.height() {
        for x in 0..b.width() {
            if b.get(y, x) && !seen[y * b.width() + x] {
                n += 1;
                fill(b, &mut seen, y as isize, x as isize, eight);
            }
        }
    }
    n
}

#[derive(PartialEq)]
struct Widest(f64, usize);

impl Eq for Widest {}

impl PartialOrd for Widest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Widest {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Grayscale reconstruction as a widest-path problem: the value at `x` is the
/// best bottleneck `min(marker(s), mask along the path)` over all 8-connected
/// paths from any cell `s`.
pub fn widest_path_reconstruct(marker: &Grid2D, mask: &Grid2D) -> Grid2D {
    let (h, w) = (mask.height(), mask.width());
    let mut best = vec![f64::NEG_INFINITY; h * w];
    let mut heap = BinaryHeap::new();
    for i in 0..h * w {
        let v = marker.data()[i].min(mask.data()[i]);
        best[i] = v;
        heap.push(Widest(v, i));
    }
    while let Some(Widest(v, i)) = heap.pop() {
        if v < best[i] {
            continue;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                let cand = v.min(mask.data()[n]);
                if cand > best[n] {
                    best[n] = cand;
                    heap.push(Widest(cand, n));
                }
            }
        }
    }
    Grid2D::from_vec(h, w, best).expect("same shape")
}

/// Singular values above `tol` (SVD via nalgebra).
pub fn numerical_rank(m: &FeatureMatrix, tol: f64) -> usize {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    dm.svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

/// Per-cell argmax over subject maps, lowest index on ties.
pub fn argmax_owner(maps: &[Grid2D], cell: usize) -> usize {
    let mut best = 0;
    for (u, m) in maps.iter().enumerate() {
        if m.data()[cell] > maps[best].data()[cell] {
            best = u;
        }
    }
    best
}

/// Token-by-token residual blending loop.
///
/// `priors[k][p]` is subject `k`'s claim on image token `p`; `image_rows` maps
/// image token `p` to its row in the record.
pub fn blend_rows(
    base: &FeatureMatrix,
    adapters: &[&FeatureMatrix],
    priors: &[Vec<bool>],
    image_offset: usize,
    image_len: usize,
    eps: f64,
) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(base.rows(), base.cols());
    for p in 0..base.rows() {
        let is_image = p >= image_offset && p < image_offset + image_len;
        if !is_image {
            for c in 0..base.cols() {
                out.set(p, c, base.get(p, c));
            }
            continue;
        }
        let tok = p - image_offset;
        let mut sum_mask = 0.0;
        for pr in priors {
            if pr[tok] {
                sum_mask += 1.0;
            }
        }
        if sum_mask == 0.0 {
            for c in 0..base.cols() {
                out.set(p, c, base.get(p, c));
            }
            continue;
        }
        let alphas: Vec<f64> = priors
            .iter()
            .map(|pr| if pr[tok] { 1.0 } else { 0.0 } / (sum_mask + eps))
            .collect();
        for c in 0..base.cols() {
            let mut acc = 0.0;
            for (k, f) in adapters.iter().enumerate() {
                acc += alphas[k] * f.get(p, c);
            }
            out.set(p, c, acc);
        }
    }
    out
}

/// Mean-over-heads softmax attention of image queries onto the selected text
/// keys, computed entry by entry.
pub fn attention_map(queries: &[FeatureMatrix], keys: &[FeatureMatrix], tokens: &[usize]) -> Vec<f64> {
    let s = queries[0].rows();
    let t = keys[0].rows();
    let d = queries[0].cols();
    let heads = queries.len();
    let mut out = vec![0.0; s];
    for (q, k) in queries.iter().zip(keys) {
        for (i, o) in out.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|e| q.get(i, e) * k.get(j, e)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let p = softmax_row(&logits);
            *o += tokens.iter().map(|&j| p[j]).sum::<f64>() / heads as f64;
        }
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        out.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; s]
    }
}
