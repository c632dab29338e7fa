//! Landmark-centred erase masks over a feature-map grid.
//!
//! Coordinates are `(x, y)` with `x` the row (height) index and `y` the
//! column (width) index, both 0-based. A hole of side `s` centred at
//! `(cx, cy)` covers rows `cx - floor(s/2) ..= cx + ceil(s/2) - 1` and the
//! same range of columns around `cy`, clipped to the grid. For even `s = 2r`
//! this is `cx - r ..= cx + r - 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `C x H x W` tensor, row-major with channel outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + x) * self.width + y]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + x) * self.width + y] = v;
    }

    /// The map mirrored along the width axis (horizontal flip).
    pub fn mirrored(&self) -> FeatureMap {
        let mut out = self.clone();
        for c in 0..self.channels {
            for x in 0..self.height {
                for y in 0..self.width {
                    out.set(c, x, y, self.get(c, x, self.width - 1 - y));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    center: (usize, usize),
    side: usize,
    /// Row-major 0/1 cells.
    grid: Vec<u8>,
}

impl Mask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    /// Side length of the erased square before clipping.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.grid[x * self.width + y]
    }

    pub fn zeros(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 0).count()
    }

    /// True when the hole erases every cell of the grid.
    pub fn is_fully_erased(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    pub fn all_ones(height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            center: (0, 0),
            side: 0,
            grid: vec![1; height * width],
        }
    }

    /// Builds a mask directly from a row-major 0/1 grid.
    pub fn from_grid(height: usize, width: usize, grid: Vec<u8>) -> Result<Mask> {
        if grid.len() != height * width {
            return Err(Error::shape(height * width, grid.len()));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask cells must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            center: (0, 0),
            side: 0,
            grid,
        })
    }

    /// The mask mirrored along the width axis, to pair with a flipped input.
    pub fn mirrored(&self) -> Mask {
        let mut grid = vec![0; self.grid.len()];
        for x in 0..self.height {
            for y in 0..self.width {
                grid[x * self.width + y] = self.at(x, self.width - 1 - y);
            }
        }
        Mask {
            height: self.height,
            width: self.width,
            center: (self.center.0, self.width - 1 - self.center.1),
            side: self.side,
            grid,
        }
    }

    /// Rows of `0`/`1` characters, each terminated by a newline.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.height * (self.width + 1));
        for x in 0..self.height {
            for y in 0..self.width {
                s.push(if self.at(x, y) == 1 { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mask> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::Contract("empty mask text".into()));
        }
        let width = rows[0].trim().len();
        let mut grid = Vec::with_capacity(rows.len() * width);
        for row in &rows {
            let row = row.trim();
            if row.len() != width {
                return Err(Error::Contract("ragged mask rows".into()));
            }
            for ch in row.chars() {
                grid.push(match ch {
                    '0' => 0,
                    '1' => 1,
                    other => {
                        return Err(Error::Contract(format!("bad mask character '{other}'")))
                    }
                });
            }
        }
        Mask::from_grid(rows.len(), width, grid)
    }
}

/// Serializes a mask set: one grid per mask, separated by blank lines.
pub fn masks_to_text(masks: &[Mask]) -> String {
    let mut out = String::new();
    for (i, m) in masks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&m.to_text());
    }
    out
}

pub fn masks_from_text(text: &str) -> Result<Vec<Mask>> {
    let mut masks = Vec::new();
    let mut block = String::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !block.is_empty() {
                masks.push(Mask::from_text(&block)?);
                block.clear();
            }
        } else {
            let _ = writeln!(block, "{line}");
        }
    }
    Ok(masks)
}

/// Mask with a `(2r) x (2r)` hole centred at `center`.
pub fn make_mask(center: (usize, usize), r: usize, height: usize, width: usize) -> Result<Mask> {
    if r == 0 {
        return Err(Error::Contract("mask radius must be at least 1".into()));
    }
    make_mask_with_side(center, 2 * r, height, width)
}

/// Mask with a hole of side `side` (odd sides allowed) centred at `center`.
/// Logs a warning when the hole erases the whole grid.
pub fn make_mask_with_side(
    center: (usize, usize),
    side: usize,
    height: usize,
    width: usize,
) -> Result<Mask> {
    if side == 0 {
        return Err(Error::Contract("mask hole side must be at least 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Contract("mask grid must be non-empty".into()));
    }
    let (cx, cy) = center;
    if cx >= height || cy >= width {
        return Err(Error::Contract(format!(
            "mask centre {center:?} outside {height}x{width} grid"
        )));
    }
    let lo = side / 2;
    let hi = side.div_ceil(2);
    let (cx, cy) = (cx as i64, cy as i64);
    let (x0, x1) = (cx - lo as i64, cx + hi as i64 - 1);
    let (y0, y1) = (cy - lo as i64, cy + hi as i64 - 1);
    let mut grid = vec![1u8; height * width];
    for x in 0..height {
        for y in 0..width {
            let (xi, yi) = (x as i64, y as i64);
            if (x0..=x1).contains(&xi) && (y0..=y1).contains(&yi) {
                grid[x * width + y] = 0;
            }
        }
    }
    let mask = Mask {
        height,
        width,
        center,
        side,
        grid,
    };
    if mask.is_fully_erased() {
        log::warn!(
            "mask of side {side} at {center:?} erases the whole {height}x{width} grid; \
             its branch will only see zero features"
        );
    }
    Ok(mask)
}

/// Element-wise product of every channel of `map` with `mask`.
pub fn apply_mask(map: &FeatureMap, mask: &Mask) -> Result<FeatureMap> {
    if map.height != mask.height || map.width != mask.width {
        return Err(Error::shape(
            format!("{}x{} mask", map.height, map.width),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    let cells = map.cells();
    let mut out = map.clone();
    for chan in out.data.chunks_exact_mut(cells) {
        for (v, &m) in chan.iter_mut().zip(&mask.grid) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over all `H * W` cells, masked zeros included.
pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    let cells = map.cells();
    map.data
        .chunks_exact(cells)
        .map(|c| c.iter().sum::<f64>() / cells as f64)
        .collect()
}

/// Fractional landmark positions `(row, col)`: left eye, right eye, nose tip,
/// left mouth corner, right mouth corner.
pub const LANDMARK_FRACTIONS: [(f64, f64); 5] = [
    (0.30, 0.30),
    (0.30, 0.70),
    (0.55, 0.50),
    (0.75, 0.35),
    (0.75, 0.65),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [(usize, usize); 5],
}

impl LandmarkSet {
    /// Landmark positions scaled to an `H x W` grid, rounded half-up.
    pub fn universal(height: usize, width: usize) -> LandmarkSet {
        let round = |v: f64, n: usize| ((v + 0.5).floor() as usize).min(n - 1);
        let mut points = [(0, 0); 5];
        for (p, &(fx, fy)) in points.iter_mut().zip(&LANDMARK_FRACTIONS) {
            *p = (
                round(fx * height as f64, height),
                round(fy * width as f64, width),
            );
        }
        LandmarkSet { points }
    }
}

/// The five universal masks with `(2r) x (2r)` holes.
pub fn default_landmark_masks(height: usize, width: usize, r: usize) -> Result<Vec<Mask>> {
    if r == 0 {
        return Err(Error::Contract("mask radius must be at least 1".into()));
    }
    landmark_masks_with_side(height, width, 2 * r)
}

/// The five universal masks with holes of side `side`.
pub fn landmark_masks_with_side(height: usize, width: usize, side: usize) -> Result<Vec<Mask>> {
    if side == 0 {
        return Err(Error::Contract("mask hole side must be at least 1".into()));
    }
    if height < side || width < side {
        return Err(Error::Contract(format!(
            "{height}x{width} grid too small for holes of side {side}"
        )));
    }
    LandmarkSet::universal(height, width)
        .points
        .iter()
        .map(|&c| make_mask_with_side(c, side, height, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_four_by_four() {
        let m = make_mask((3, 3), 2, 7, 7).unwrap();
        assert_eq!(m.zeros(), 16);
        assert_eq!(m.grid().len() - m.zeros(), 33);
        for x in 0..7 {
            for y in 0..7 {
                let inside = (1..=4).contains(&x) && (1..=4).contains(&y);
                assert_eq!(m.at(x, y), u8::from(!inside));
            }
        }
    }

    #[test]
    fn corner_clipping() {
        let m = make_mask((0, 0), 2, 7, 7).unwrap();
        assert_eq!(m.zeros(), 4);
        for x in 0..2 {
            for y in 0..2 {
                assert_eq!(m.at(x, y), 0);
            }
        }
    }

    #[test]
    fn full_cover_is_flagged() {
        let m = make_mask((3, 3), 4, 7, 7).unwrap();
        assert!(m.is_fully_erased());
        assert!(!make_mask((3, 3), 2, 7, 7).unwrap().is_fully_erased());
    }

    #[test]
    fn odd_sides() {
        let m = make_mask_with_side((3, 3), 3, 7, 7).unwrap();
        assert_eq!(m.zeros(), 9);
        assert_eq!(m.at(2, 2), 0);
        assert_eq!(m.at(4, 4), 0);
        assert_eq!(m.at(5, 5), 1);
        let m = make_mask_with_side((3, 3), 5, 7, 7).unwrap();
        assert_eq!(m.zeros(), 25);
        assert_eq!(m.at(1, 1), 0);
        assert_eq!(m.at(5, 5), 0);
    }

    #[test]
    fn bad_arguments() {
        assert!(make_mask((3, 3), 0, 7, 7).is_err());
        assert!(make_mask((7, 3), 1, 7, 7).is_err());
        assert!(default_landmark_masks(7, 7, 0).is_err());
        assert!(default_landmark_masks(3, 3, 2).is_err());
    }

    #[test]
    fn apply_examples() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Mask::from_grid(2, 2, vec![0, 1, 1, 0]).unwrap();
        let out = apply_mask(&f, &m).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(global_average_pool(&f), vec![2.5]);
        assert_eq!(global_average_pool(&out), vec![1.25]);

        assert_eq!(apply_mask(&f, &Mask::all_ones(2, 2)).unwrap(), f);
        let zero = Mask::from_grid(2, 2, vec![0; 4]).unwrap();
        assert!(apply_mask(&f, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let wrong = Mask::all_ones(3, 2);
        assert!(apply_mask(&f, &wrong).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let f = FeatureMap::new(3, 4, 5, vec![2.75; 60]).unwrap();
        assert_eq!(global_average_pool(&f), vec![2.75; 3]);
    }

    #[test]
    fn landmark_centres_on_seven_grid() {
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let centres: Vec<_> = masks.iter().map(|m| m.center()).collect();
        assert_eq!(centres, vec![(2, 2), (2, 5), (4, 4), (5, 2), (5, 5)]);
        for m in &masks {
            assert_eq!(m.side(), 4);
        }
    }

    #[test]
    fn landmark_holes_unclipped_on_fourteen_grid() {
        for m in default_landmark_masks(14, 14, 2).unwrap() {
            assert_eq!(m.zeros(), 16);
        }
    }

    #[test]
    fn text_round_trip() {
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let text = masks_to_text(&masks);
        let back = masks_from_text(&text).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in masks.iter().zip(&back) {
            assert_eq!(a.grid(), b.grid());
        }
        assert!(Mask::from_text("0120\n").is_err());
        assert!(Mask::from_text("01\n011\n").is_err());
    }

    #[test]
    fn mirroring() {
        let m = make_mask((0, 0), 1, 3, 4).unwrap();
        let mm = m.mirrored();
        assert_eq!(mm.at(0, 3), 0);
        assert_eq!(mm.at(0, 0), 1);
        assert_eq!(mm.center(), (0, 3));
        let f = FeatureMap::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.mirrored().data(), &[3.0, 2.0, 1.0]);
    }
}
