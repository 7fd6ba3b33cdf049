//! Sliding-window tiling of large rasters and probability stitching.
//!
//! Windows step by `stride`; a window that would overhang the image is
//! shifted inward so its far edge lands on the image edge. This keeps every
//! tile full-size with no synthetic border content, at the cost of extra
//! overlap near the edges.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub image_hw: (usize, usize),
    pub window: (usize, usize),
    pub stride: usize,
    /// Unique `(y, x)` window corners in row-major order.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut origin = 0usize;
    loop {
        if origin + window >= len {
            let last = len - window;
            if out.last() != Some(&last) {
                out.push(last);
            }
            break;
        }
        out.push(origin);
        origin += stride;
    }
    out
}

impl TileGrid {
    /// # Examples
    ///
    /// ```
    /// use farseg::data::tiling::TileGrid;
    /// let grid = TileGrid::new((1000, 1000), (896, 896), 512).unwrap();
    /// // the second window shifts inward to end at the image edge
    /// assert_eq!(grid.origins, vec![(0, 0), (0, 104), (104, 0), (104, 104)]);
    /// ```
    pub fn new(image_hw: (usize, usize), window: (usize, usize), stride: usize) -> Result<Self> {
        let (h, w) = image_hw;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if wh > h || ww > w {
            return Err(Error::Data(format!(
                "window {wh}x{ww} exceeds image {h}x{w}; pad the image up to the window first"
            )));
        }
        if stride > wh || stride > ww {
            return Err(Error::Config(format!(
                "stride {stride} larger than the window leaves uncovered pixels"
            )));
        }
        let ys = axis_origins(h, wh, stride);
        let xs = axis_origins(w, ww, stride);
        let mut origins = Vec::with_capacity(ys.len() * xs.len());
        for &y in &ys {
            for &x in &xs {
                origins.push((y, x));
            }
        }
        Ok(TileGrid {
            image_hw,
            window,
            stride,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of covering windows per pixel; the grid invariant is that no
    /// entry is zero.
    pub fn coverage_counts(&self) -> ndarray::Array2<u32> {
        let mut counts = ndarray::Array2::zeros(self.image_hw);
        let (wh, ww) = self.window;
        for &(y, x) in &self.origins {
            let mut region = counts.slice_mut(ndarray::s![y..y + wh, x..x + ww]);
            region += 1u32;
        }
        counts
    }
}

/// Averages per-tile probability maps `[K, h, w]` back into a full
/// `[K, H, W]` field. Every pixel must be covered by at least one tile.
pub fn stitch<T: Scalar>(
    tiles: &[((usize, usize), Array3<T>)],
    image_hw: (usize, usize),
) -> Result<Array3<T>> {
    let (h, w) = image_hw;
    if tiles.is_empty() {
        return Err(Error::Data("cannot stitch an empty tile list".into()));
    }
    let k = tiles[0].1.dim().0;
    let mut sum = Array3::<T>::zeros((k, h, w));
    let mut counts = ndarray::Array2::<u32>::zeros((h, w));
    for ((oy, ox), tile) in tiles {
        let (tk, th, tw) = tile.dim();
        if tk != k {
            return Err(Error::Shape(format!(
                "tile at ({oy}, {ox}) has {tk} classes, expected {k}"
            )));
        }
        if oy + th > h || ox + tw > w {
            return Err(Error::Shape(format!(
                "tile at ({oy}, {ox}) of size {th}x{tw} exceeds the {h}x{w} image"
            )));
        }
        {
            let mut region = sum.slice_mut(ndarray::s![.., *oy..oy + th, *ox..ox + tw]);
            region += tile;
        }
        let mut region = counts.slice_mut(ndarray::s![*oy..oy + th, *ox..ox + tw]);
        region += 1u32;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Data(
            "stitch grid leaves uncovered pixels; the tile grid invariant is broken".into(),
        ));
    }
    for ki in 0..k {
        let mut plane = sum.index_axis_mut(ndarray::Axis(0), ki);
        ndarray::Zip::from(&mut plane).and(&counts).for_each(|s, &c| {
            *s = *s / T::from_usize(c as usize);
        });
    }
    Ok(sum)
}

/// Pads a `[C, H, W]` raster on the bottom/right with mirrored content so it
/// reaches at least `(target_h, target_w)`; the original content stays at
/// the origin, so predictions crop back trivially.
pub fn reflect_pad_to<T: Scalar>(x: &ArrayView3<T>, target_h: usize, target_w: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let th = target_h.max(h);
    let tw = target_w.max(w);
    let mut out = Array3::zeros((c, th, tw));
    let reflect = |i: usize, len: usize| -> usize {
        if len == 1 {
            return 0;
        }
        // mirror without repeating the edge sample: 0 1 2 3 2 1 0 1 2 ...
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    for ci in 0..c {
        for y in 0..th {
            let sy = reflect(y, h);
            for xx in 0..tw {
                let sx = reflect(xx, w);
                out[[ci, y, xx]] = x[[ci, sy, sx]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn single_tile_when_window_equals_image() {
        let grid = TileGrid::new((896, 896), (896, 896), 512).unwrap();
        assert_eq!(grid.origins, vec![(0, 0)]);
    }

    #[test]
    fn exact_stride_multiple() {
        // 1408 - 896 = 512, so two windows tile the long axis exactly
        let grid = TileGrid::new((896, 1408), (896, 896), 512).unwrap();
        assert_eq!(grid.origins, vec![(0, 0), (0, 512)]);
    }

    #[test]
    fn overhang_shifts_the_last_window_inward() {
        let grid = TileGrid::new((1000, 1000), (896, 896), 512).unwrap();
        assert_eq!(
            grid.origins,
            vec![(0, 0), (0, 104), (104, 0), (104, 104)]
        );
    }

    #[test]
    fn every_pixel_is_covered() {
        for (h, w) in [(896, 896), (1000, 1300), (897, 2000), (896, 1408)] {
            let grid = TileGrid::new((h, w), (896, 896), 512).unwrap();
            let counts = grid.coverage_counts();
            assert!(counts.iter().all(|&c| c > 0), "{h}x{w} left gaps");
        }
    }

    #[test]
    fn window_larger_than_image_asks_for_padding() {
        let err = TileGrid::new((512, 512), (896, 896), 512).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn stitch_identity_for_single_tile() {
        let tile = Array3::from_shape_fn((3, 4, 4), |(k, y, x)| (k * 16 + y * 4 + x) as f64);
        let out = stitch(&[((0, 0), tile.clone())], (4, 4)).unwrap();
        assert_eq!(out, tile);
    }

    #[test]
    fn stitch_averages_identical_overlaps_exactly() {
        let tile = Array3::from_elem((2, 4, 4), 0.3125f64);
        let out = stitch(&[((0, 0), tile.clone()), ((0, 2), tile.clone())], (4, 6)).unwrap();
        for &v in out.iter() {
            assert_eq!(v, 0.3125);
        }
    }

    #[test]
    fn tile_then_stitch_round_trips_a_probability_field() {
        // a known full-image field, sliced into overlapping tiles
        let field = Array3::from_shape_fn((3, 10, 13), |(k, y, x)| {
            ((k + 1) * (y + 2) * (x + 3)) as f64 / 100.0
        });
        let grid = TileGrid::new((10, 13), (6, 6), 4).unwrap();
        let tiles: Vec<((usize, usize), Array3<f64>)> = grid
            .origins
            .iter()
            .map(|&(y, x)| {
                (
                    (y, x),
                    field.slice(ndarray::s![.., y..y + 6, x..x + 6]).to_owned(),
                )
            })
            .collect();
        let out = stitch(&tiles, (10, 13)).unwrap();
        // all covering tiles agree, so the average is exact
        assert_eq!(out, field);
    }

    #[test]
    fn reflect_padding_mirrors_content() {
        let x = Array3::from_shape_fn((1, 2, 3), |(_, y, xx)| (y * 3 + xx) as f64);
        let padded = reflect_pad_to(&x.view(), 4, 5);
        assert_eq!(padded.dim(), (1, 4, 5));
        // row 2 mirrors row 0 (periodic mirror over 2 rows: 0 1 0 1)
        assert_eq!(padded[[0, 2, 0]], padded[[0, 0, 0]]);
        // column pattern: 0 1 2 1 0
        assert_eq!(padded[[0, 0, 3]], x[[0, 0, 1]]);
        assert_eq!(padded[[0, 0, 4]], x[[0, 0, 0]]);
    }
}
