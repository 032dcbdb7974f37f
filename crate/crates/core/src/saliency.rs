//! Target-image saliency from foreground/background similarity contrast.

use image::{GrayImage, Luma};
use thiserror::Error;

use crate::features::SimilarityVolume;

pub const CLAHE_CLIP_LIMIT: f64 = 10.0;
pub const CLAHE_TILES: (usize, usize) = (2, 2);
const BINS: usize = 256;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("prototype has no foreground grid cells")]
    EmptyForeground,
    #[error("prototype image is {image:?} but the volume expects {expected:?}")]
    FrameMismatch {
        image: (usize, usize),
        expected: (usize, usize),
    },
}

/// Per-cell saliency on the target feature grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    source_size: (usize, usize),
}

impl SaliencyMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        source_size: (usize, usize),
    ) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
            source_size,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    /// Nearest-neighbour upscale to the source image size as 8-bit gray.
    pub fn to_image(&self) -> GrayImage {
        let (h, w) = self.source_size;
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let col = (x as usize * self.width / w).min(self.width - 1);
            let row = (y as usize * self.height / h).min(self.height - 1);
            Luma([(self.get(row, col) * 255.0).round() as u8])
        })
    }
}

/// Prototype grid cells whose covered pixels average darker than
/// `fg_threshold`.
pub fn foreground_cells(
    proto_image: &GrayImage,
    grid: (usize, usize),
    fg_threshold: u16,
) -> Vec<bool> {
    let (w, h) = proto_image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        let y0 = r * h / grid.0;
        let y1 = ((r + 1) * h / grid.0).max(y0 + 1).min(h);
        for c in 0..grid.1 {
            let x0 = c * w / grid.1;
            let x1 = ((c + 1) * w / grid.1).max(x0 + 1).min(w);
            let mut sum = 0u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += u64::from(proto_image.get_pixel(x as u32, y as u32)[0]);
                }
            }
            let mean = sum as f64 / ((y1 - y0) * (x1 - x0)) as f64;
            out.push(mean < f64::from(fg_threshold));
        }
    }
    out
}

/// Difference of mean similarity to prototype foreground and background
/// cells, for every target cell. An empty background contributes 0.
pub fn raw_contrast(s: &SimilarityVolume, fg: &[bool]) -> Result<Vec<f64>, SaliencyError> {
    let nt = s.target_cells();
    let n_fg = fg.iter().filter(|&&f| f).count();
    let n_bg = fg.len() - n_fg;
    if n_fg == 0 {
        return Err(SaliencyError::EmptyForeground);
    }
    let mut fg_sum = vec![0.0f64; nt];
    let mut bg_sum = vec![0.0f64; nt];
    for (p, &is_fg) in fg.iter().enumerate() {
        let acc = if is_fg { &mut fg_sum } else { &mut bg_sum };
        for (a, &v) in acc.iter_mut().zip(s.proto_slice(p)) {
            *a += f64::from(v);
        }
    }
    Ok((0..nt)
        .map(|t| {
            let bg = if n_bg == 0 { 0.0 } else { bg_sum[t] / n_bg as f64 };
            fg_sum[t] / n_fg as f64 - bg
        })
        .collect())
}

/// Affine map of `values` onto `[lo, hi]`; constant input maps to `lo`.
fn min_max(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![lo; values.len()];
    }
    values
        .iter()
        .map(|v| lo + (v - min) / range * (hi - lo))
        .collect()
}

/// Contrast-limited adaptive histogram equalization of an 8-bit field.
///
/// 256 bins per tile; the clip limit is a multiple of the uniform bin height;
/// clipped excess is spread evenly over all bins in one pass (remainder
/// one count at a time from bin 0 at a fixed stride). Tile mappings are
/// blended bilinearly between tile centers. Output is real-valued in
/// `[0, 255]`.
pub fn clahe(
    field: &[u8],
    height: usize,
    width: usize,
    tiles: (usize, usize),
    clip_limit: f64,
) -> Vec<f64> {
    assert_eq!(field.len(), height * width);
    let (ty, tx) = tiles;
    assert!(ty > 0 && tx > 0 && height >= ty && width >= tx);
    let tile_h = height / ty;
    let tile_w = width / tx;

    let mut luts = vec![[0.0f64; BINS]; ty * tx];
    for j in 0..ty {
        for i in 0..tx {
            // The last tile row/column absorbs any remainder.
            let y0 = j * tile_h;
            let y1 = if j + 1 == ty { height } else { y0 + tile_h };
            let x0 = i * tile_w;
            let x1 = if i + 1 == tx { width } else { x0 + tile_w };
            let area = (y1 - y0) * (x1 - x0);

            let mut hist = [0usize; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[field[y * width + x] as usize] += 1;
                }
            }

            let clip = ((clip_limit * area as f64 / BINS as f64) as usize).max(1);
            let mut excess = 0;
            for h in hist.iter_mut() {
                if *h > clip {
                    excess += *h - clip;
                    *h = clip;
                }
            }
            let batch = excess / BINS;
            let residual = excess - batch * BINS;
            for h in hist.iter_mut() {
                *h += batch;
            }
            if residual > 0 {
                let step = (BINS / residual).max(1);
                let mut left = residual;
                let mut b = 0;
                while b < BINS && left > 0 {
                    hist[b] += 1;
                    left -= 1;
                    b += step;
                }
            }

            let scale = 255.0 / area as f64;
            let lut = &mut luts[j * tx + i];
            let mut cum = 0usize;
            for (b, h) in hist.iter().enumerate() {
                cum += h;
                lut[b] = (cum as f64 * scale).min(255.0);
            }
        }
    }

    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        let fy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
        let y1 = fy.floor();
        let ya = fy - y1;
        let (ty1, ty2) = (
            (y1 as isize).clamp(0, ty as isize - 1) as usize,
            (y1 as isize + 1).clamp(0, ty as isize - 1) as usize,
        );
        for x in 0..width {
            let fx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
            let x1 = fx.floor();
            let xa = fx - x1;
            let (tx1, tx2) = (
                (x1 as isize).clamp(0, tx as isize - 1) as usize,
                (x1 as isize + 1).clamp(0, tx as isize - 1) as usize,
            );
            let v = field[y * width + x] as usize;
            let top = luts[ty1 * tx + tx1][v] * (1.0 - xa) + luts[ty1 * tx + tx2][v] * xa;
            let bot = luts[ty2 * tx + tx1][v] * (1.0 - xa) + luts[ty2 * tx + tx2][v] * xa;
            out[y * width + x] = top * (1.0 - ya) + bot * ya;
        }
    }
    out
}

/// Saliency of every target cell: foreground-minus-background mean
/// similarity, CLAHE (clip 10, 2×2 tiles), values below the field mean set to
/// zero, then min-max scaled to `[0, 1]`.
pub fn compute_saliency(
    s: &SimilarityVolume,
    proto_image: &GrayImage,
    fg_threshold: u16,
) -> Result<SaliencyMap, SaliencyError> {
    let (w, h) = proto_image.dimensions();
    if (h as usize, w as usize) != s.proto_size() {
        return Err(SaliencyError::FrameMismatch {
            image: (h as usize, w as usize),
            expected: s.proto_size(),
        });
    }
    let fg = foreground_cells(proto_image, s.proto_grid(), fg_threshold);
    let raw = raw_contrast(s, &fg)?;
    let (gh, gw) = s.target_grid();
    let values = postprocess(&raw, gh, gw);
    Ok(SaliencyMap::new(gh, gw, values, s.target_size()))
}

/// Equalize, zero below mean, rescale.
pub fn postprocess(raw: &[f64], height: usize, width: usize) -> Vec<f64> {
    let bytes: Vec<u8> = min_max(raw, 0.0, 255.0)
        .into_iter()
        .map(|v| v.round() as u8)
        .collect();
    let tiles = (CLAHE_TILES.0.min(height), CLAHE_TILES.1.min(width));
    let eq = clahe(&bytes, height, width, tiles, CLAHE_CLIP_LIMIT);
    let mean = eq.iter().sum::<f64>() / eq.len() as f64;
    let zeroed: Vec<f64> = eq.iter().map(|&v| if v < mean { 0.0 } else { v }).collect();
    min_max(&zeroed, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(grid: (usize, usize), size: usize, data: Vec<f32>) -> SimilarityVolume {
        SimilarityVolume::from_raw(grid, grid, (size, size), (size, size), data)
    }

    #[test]
    fn constant_volume_gives_zero_map() {
        let img = GrayImage::from_fn(32, 32, |x, _| Luma([if x < 16 { 0 } else { 255 }]));
        let s = volume((4, 4), 32, vec![0.3; 256]);
        let sal = compute_saliency(&s, &img, 128).unwrap();
        assert!(sal.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let img = GrayImage::from_pixel(32, 32, Luma([255]));
        let s = volume((4, 4), 32, vec![0.3; 256]);
        assert!(matches!(
            compute_saliency(&s, &img, 128),
            Err(SaliencyError::EmptyForeground)
        ));
    }

    #[test]
    fn all_foreground_uses_foreground_mean() {
        let fg = vec![true; 4];
        let data: Vec<f32> = (0..16).map(|i| (i % 4) as f32 * 0.1 + (i / 4) as f32 * 0.01).collect();
        let s = volume((2, 2), 16, data);
        let raw = raw_contrast(&s, &fg).unwrap();
        for (t, r) in raw.iter().enumerate() {
            let mean = (0..4).map(|p| f64::from(s.proto_slice(p)[t])).sum::<f64>() / 4.0;
            assert!((r - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn clahe_flat_field_is_flat() {
        let out = clahe(&[77u8; 64 * 64], 64, 64, (2, 2), 10.0);
        assert!(out.iter().all(|&v| v == out[0]));
    }

    #[test]
    fn clahe_monotone_in_input() {
        // Inside a corner region only one tile mapping applies, so a ramp
        // stays a ramp there.
        let field: Vec<u8> = (0..64 * 64).map(|i| ((i % 64) * 4) as u8).collect();
        let out = clahe(&field, 64, 64, (2, 2), 10.0);
        for y in 0..16 {
            for x in 1..16 {
                assert!(out[y * 64 + x] >= out[y * 64 + x - 1] - 1e-9);
            }
        }
        assert!(out.iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn clahe_clip_limits_contrast_gain() {
        // Half 100, half 101: plain equalization would stretch to 0..255;
        // clipping keeps the gap small.
        let field: Vec<u8> = (0..64 * 64).map(|i| if i % 64 < 32 { 100 } else { 101 }).collect();
        let out = clahe(&field, 64, 64, (2, 2), 10.0);
        let gap = out[40] - out[20];
        assert!(gap > 0.0 && gap < 40.0, "gap {gap}");
    }

    #[test]
    fn postprocess_zeroes_below_mean() {
        let raw: Vec<f64> = (0..64 * 64).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let out = postprocess(&raw, 64, 64);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let zeros = out.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 64 * 64 / 4);
        assert_eq!(out.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn foreground_cell_rule() {
        let img = GrayImage::from_fn(16, 16, |x, y| Luma([if x < 8 && y < 8 { 10 } else { 250 }]));
        let fg = foreground_cells(&img, (2, 2), 128);
        assert_eq!(fg, vec![true, false, false, false]);
    }
}
