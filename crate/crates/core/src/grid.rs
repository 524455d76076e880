//! Single-channel image grids and masks.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A `height x width` grid of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "grid data does not match {height}x{width}");
        Grid { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Grid::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `[1, 1, h, w]` tensor view of the grid.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Stacks grids of equal size into a `[n, 1, h, w]` batch.
    pub fn batch(grids: &[&Grid]) -> Tensor {
        assert!(!grids.is_empty());
        let (h, w) = grids[0].dims();
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            assert_eq!(g.dims(), (h, w), "batch of differently sized grids");
            data.extend_from_slice(&g.data);
        }
        Tensor::new(vec![grids.len(), 1, h, w], data)
    }

    /// Extracts sample `n`, channel `c` of a rank-4 tensor.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Grid {
        let (_, cs, h, w) = t.dims4();
        let start = (n * cs + c) * h * w;
        Grid::new(h, w, t.data()[start..start + h * w].to_vec())
    }

    pub fn ensure_dims(&self, h: usize, w: usize) -> Result<()> {
        if self.dims() != (h, w) {
            return Err(Error::contract(format!(
                "expected a {h}x{w} image, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Bilinear resampling to a new size (pixel-center aligned).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Grid::from_fn(height, width, |r, c| {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

/// Continuous attribution map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(pub Grid);

impl SoftMask {
    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    /// Foreground where the value is at least `threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        let (h, w) = self.0.dims();
        BinaryMask::new(h, w, self.0.data().iter().map(|&v| v >= threshold).collect())
    }

    /// Rescales so the maximum is one; an all-zero map stays zero.
    pub fn max_normalized(grid: Grid) -> SoftMask {
        let m = grid.max();
        if m > 0.0 {
            SoftMask(grid.map(|v| (v / m).clamp(0.0, 1.0)))
        } else {
            SoftMask(grid.map(|_| 0.0))
        }
    }
}

/// Binary `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(height * width, data.len());
        BinaryMask { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        BinaryMask::new(height, width, (0..height * width).map(|i| f(i / width, i % width)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        )
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        )
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask::new(self.height, self.width, self.data.iter().map(|b| !b).collect())
    }

    /// Chebyshev (square) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = self.dims();
        let r = radius as isize;
        // separable: rows then columns
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = (-r..=r).any(|d| {
                    let xx = x as isize + d;
                    xx >= 0 && xx < w as isize && self.data[y * w + xx as usize]
                });
            }
        }
        BinaryMask::from_fn(h, w, |y, x| {
            (-r..=r).any(|d| {
                let yy = y as isize + d;
                yy >= 0 && yy < h as isize && rows[yy as usize * w + x]
            })
        })
    }

    /// Euclidean-disk dilation by `radius` pixels.
    pub fn dilate_disk(&self, radius: f64) -> BinaryMask {
        let (h, w) = self.dims();
        let r = radius.floor() as isize;
        let r2 = radius * radius;
        let mut out = self.clone();
        for (y, x) in self.points() {
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dy * dy + dx * dx) as f64 > r2 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        out.set(yy as usize, xx as usize, true);
                    }
                }
            }
        }
        out
    }

    /// `1.0` on foreground, `0.0` elsewhere.
    pub fn to_grid(&self) -> Grid {
        Grid::new(
            self.height,
            self.width,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Circular shift by `(dy, dx)`.
    pub fn roll(&self, dy: usize, dx: usize) -> BinaryMask {
        let (h, w) = self.dims();
        BinaryMask::from_fn(h, w, |y, x| self.get((y + h - dy % h) % h, (x + w - dx % w) % w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_inclusive() {
        let m = SoftMask(Grid::new(1, 3, vec![0.54, 0.55, 0.9]));
        assert_eq!(m.threshold(0.55).data(), &[false, true, true]);
    }

    #[test]
    fn dilation_grows_square() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        assert_eq!(m.dilate(1).area(), 9);
        assert_eq!(m.dilate(2).area(), 25);
        assert_eq!(m.dilate_disk(1.0).area(), 5);
    }

    #[test]
    fn bilinear_keeps_constants() {
        let g = Grid::filled(4, 4, 0.7);
        let up = g.resize_bilinear(16, 16);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn roll_wraps() {
        let mut m = BinaryMask::empty(3, 3);
        m.set(2, 2, true);
        let r = m.roll(1, 1);
        assert!(r.get(0, 0));
        assert_eq!(r.area(), 1);
    }
}
