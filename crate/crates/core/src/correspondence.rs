//! Best-buddies (mutual nearest neighbour) correspondences.

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::SimilarityVolume;
use crate::geometry::Point;

/// Default foreground cut: font glyphs are dark on a light page.
pub const DEFAULT_FG_THRESHOLD: u16 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub proto: Point,
    pub target: Point,
    pub score: f32,
}

/// Argmax over each row of a row-major `rows × cols` matrix, ties to the
/// lowest column.
fn row_argmax(data: &[f32], cols: usize) -> Vec<usize> {
    data.par_chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Argmax over each column, ties to the lowest row.
fn col_argmax(data: &[f32], rows: usize, cols: usize) -> Vec<usize> {
    let mut best_val: Vec<f32> = data[..cols].to_vec();
    let mut best_idx = vec![0usize; cols];
    for r in 1..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            if v > best_val[c] {
                best_val[c] = v;
                best_idx[c] = r;
            }
        }
    }
    best_idx
}

/// Grid-index pairs `(proto_cell, target_cell)` that are mutual argmaxes.
pub fn best_buddy_indices(s: &SimilarityVolume) -> Vec<(usize, usize)> {
    let (np, nt) = (s.proto_cells(), s.target_cells());
    if np == 0 || nt == 0 {
        return Vec::new();
    }
    let fwd = row_argmax(s.data(), nt);
    let bwd = col_argmax(s.data(), np, nt);
    fwd.iter()
        .enumerate()
        .filter(|&(p, &t)| bwd[t] == p)
        .map(|(p, &t)| (p, t))
        .collect()
}

/// Mutual nearest neighbours of `s`, converted to pixel cell centers and
/// ordered by prototype cell.
pub fn best_buddies(s: &SimilarityVolume) -> Vec<Correspondence> {
    let nt = s.target_cells();
    best_buddy_indices(s)
        .into_iter()
        .map(|(p, t)| Correspondence {
            proto: s.proto_index_to_pixel(p),
            target: s.target_index_to_pixel(t),
            score: s.data()[p * nt + t],
        })
        .collect()
}

/// Keeps correspondences whose prototype point sits on a pixel darker than
/// `threshold`.
pub fn filter_foreground(
    corrs: &[Correspondence],
    proto_image: &GrayImage,
    threshold: u16,
) -> Vec<Correspondence> {
    let (w, h) = proto_image.dimensions();
    corrs
        .iter()
        .filter(|c| {
            let x = c.proto.x.floor();
            let y = c.proto.y.floor();
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return false;
            }
            u16::from(proto_image.get_pixel(x as u32, y as u32)[0]) < threshold
        })
        .copied()
        .collect()
}

pub fn to_debug_json(corrs: &[Correspondence]) -> String {
    serde_json::to_string_pretty(corrs).expect("correspondences serialize")
}
