//! Scalar fields over the latent grid: smoothing, rescaling and thresholds.

use crate::error::{Error, Result};

/// An `height × width` real field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "Grid2D::from_vec",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the first cell holding the maximum value.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// A `height × width` field of booleans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "BinaryGrid::from_vec",
                format!("{} cells for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// A normalized `size × size` isotropic Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::param(format!(
                "gaussian kernel size must be odd and positive, got {size}"
            )));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::param(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let half = (size / 2) as i64;
        let two_s2 = 2.0 * sigma * sigma;
        let mut weights = Vec::with_capacity(size * size);
        for dy in -half..=half {
            for dx in -half..=half {
                weights.push((-((dx * dx + dy * dy) as f64) / two_s2).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            size,
            sigma,
            weights,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize) -> f64 {
        self.weights[ky * self.size + kx]
    }

    /// Kernel with arbitrary weights. Used by the self-test mutation hook.
    pub fn from_raw(size: usize, sigma: f64, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != size * size {
            return Err(Error::shape(
                "GaussianKernel::from_raw",
                format!("{} weights for size {size}", weights.len()),
            ));
        }
        Ok(Self {
            size,
            sigma,
            weights,
        })
    }
}

/// Same-size correlation with replicate padding at the borders.
///
/// Evaluated as `g(y,x) + Σ w·(g(s) − g(y,x))`, which equals `Σ w·g(s)` for a
/// sum-1 kernel and leaves constant fields bit-identical.
pub fn conv2d_same(g: &Grid2D, kern: &GaussianKernel) -> Result<Grid2D> {
    let k = kern.size();
    if k > g.height.min(g.width) {
        return Err(Error::param(format!(
            "kernel size {k} exceeds grid {}x{}",
            g.height, g.width
        )));
    }
    let half = (k / 2) as isize;
    let (h, w) = (g.height as isize, g.width as isize);
    let mut out = Grid2D::zeros(g.height, g.width);
    for y in 0..h {
        for x in 0..w {
            let center = g.get(y as usize, x as usize);
            let mut acc = 0.0;
            for ky in 0..k as isize {
                let sy = (y + ky - half).clamp(0, h - 1) as usize;
                for kx in 0..k as isize {
                    let sx = (x + kx - half).clamp(0, w - 1) as usize;
                    acc += kern.weight(ky as usize, kx as usize) * (g.get(sy, sx) - center);
                }
            }
            out.set(y as usize, x as usize, center + acc);
        }
    }
    Ok(out)
}

/// Min-max rescaling to `[0, 1]`; constant fields become all zeros.
pub fn renorm(g: &Grid2D) -> Grid2D {
    let (lo, hi) = (g.min(), g.max());
    if !(hi > lo) {
        return Grid2D::zeros(g.height, g.width);
    }
    let span = hi - lo;
    g.map(|v| (v - lo) / span)
}

/// Nearest-rank quantile: the `max(1, ⌈q·n⌉)`-th smallest cell value.
pub fn quantile(g: &Grid2D, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::param(format!("quantile level {q} outside [0, 1]")));
    }
    if g.is_empty() {
        return Err(Error::param("quantile of an empty grid"));
    }
    let mut sorted = g.data.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}
