//! Dense feature maps, the `FMAP0001` file format, the built-in descriptor and
//! the 4-D similarity volume.

use std::io::Write;
use std::path::Path;

use image::GrayImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Point;

pub const FMAP_MAGIC: &[u8; 8] = b"FMAP0001";
const HEADER_LEN: usize = 8 + 5 * 4;
/// Allowed deviation of a stored vector's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;
/// Default feature grid (rows, cols).
pub const DEFAULT_GRID: (usize, usize) = (64, 64);

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad magic, expected FMAP0001")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("feature vector at ({row}, {col}) has norm {norm}")]
    NotNormalized { row: usize, col: usize, norm: f64 },
    #[error("channel mismatch: prototype has {proto}, target has {target}")]
    ChannelMismatch { proto: usize, target: usize },
    #[error("grid mismatch: prototype {proto:?}, target {target:?}")]
    GridMismatch {
        proto: (usize, usize),
        target: (usize, usize),
    },
    #[error("feature io: {0}")]
    Io(#[from] std::io::Error),
}

/// `C × H × W` unit-normalized descriptors for one image.
///
/// Stored position-major (`[row][col][channel]`) so that each cell's vector is
/// contiguous; the file format is channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    source_size: (usize, usize),
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map from position-major data, validating unit norms.
    pub fn from_vectors(
        channels: usize,
        height: usize,
        width: usize,
        source_size: (usize, usize),
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatureError::DimMismatch(format!(
                "C={channels}, H={height}, W={width} must all be positive"
            )));
        }
        if source_size.0 == 0 || source_size.1 == 0 {
            return Err(FeatureError::DimMismatch("empty source image size".into()));
        }
        if data.len() != channels * height * width {
            return Err(FeatureError::DimMismatch(format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        let map = Self {
            channels,
            height,
            width,
            source_size,
            data,
        };
        map.check_norms()?;
        Ok(map)
    }

    /// Builds a map from channel-major (`[c][h][w]`) data.
    pub fn from_chw(
        channels: usize,
        height: usize,
        width: usize,
        source_size: (usize, usize),
        chw: &[f32],
    ) -> Result<Self, FeatureError> {
        if chw.len() != channels * height * width {
            return Err(FeatureError::DimMismatch(format!(
                "expected {} values, got {}",
                channels * height * width,
                chw.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; chw.len()];
        for c in 0..channels {
            for pos in 0..plane {
                data[pos * channels + c] = chw[c * plane + pos];
            }
        }
        Self::from_vectors(channels, height, width, source_size, data)
    }

    fn check_norms(&self) -> Result<(), FeatureError> {
        for row in 0..self.height {
            for col in 0..self.width {
                let norm = self
                    .vector(row, col)
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                    return Err(FeatureError::NotNormalized { row, col, norm });
                }
            }
        }
        Ok(())
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

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Source image size as `(height, width)` in pixels.
    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.data
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; self.data.len()];
        for pos in 0..plane {
            for c in 0..self.channels {
                out[c * plane + pos] = self.data[pos * self.channels + c];
            }
        }
        out
    }

    /// Pixel size of one grid cell as `(cell_height, cell_width)`.
    pub fn cell_size(&self) -> (f64, f64) {
        cell_size(self.source_size, self.grid())
    }

    pub fn grid_to_pixel(&self, row: f64, col: f64) -> Point {
        grid_to_pixel((row, col), self.cell_size())
    }

    pub fn pixel_to_grid(&self, p: Point) -> (f64, f64) {
        pixel_to_grid(p, self.cell_size())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), FeatureError> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        buf.extend_from_slice(FMAP_MAGIC);
        for v in [
            self.channels,
            self.height,
            self.width,
            self.source_size.0,
            self.source_size.1,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.to_chw() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < 8 || &bytes[..8] != FMAP_MAGIC {
            return Err(FeatureError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::DimMismatch("truncated header".into()));
        }
        let field = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (c, h, w, src_h, src_w) = (field(0), field(1), field(2), field(3), field(4));
        let payload = &bytes[HEADER_LEN..];
        let expected = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| FeatureError::DimMismatch("declared size overflows".into()))?;
        if payload.len() != expected {
            return Err(FeatureError::DimMismatch(format!(
                "header declares {c}x{h}x{w} ({expected} bytes), payload has {} bytes",
                payload.len()
            )));
        }
        let chw: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_chw(c, h, w, (src_h, src_w), &chw)
    }
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap, FeatureError> {
    FeatureMap::from_bytes(&std::fs::read(path)?)
}

/// `(cell_height, cell_width)` for an image of `(height, width)` pixels split
/// into a `(rows, cols)` grid.
pub fn cell_size(image_size: (usize, usize), grid: (usize, usize)) -> (f64, f64) {
    (
        image_size.0 as f64 / grid.0 as f64,
        image_size.1 as f64 / grid.1 as f64,
    )
}

/// Center of grid cell `(row, col)`; accepts fractional indices.
pub fn grid_to_pixel(coord: (f64, f64), cell: (f64, f64)) -> Point {
    Point::new((coord.1 + 0.5) * cell.1, (coord.0 + 0.5) * cell.0)
}

/// Exact inverse of [`grid_to_pixel`]: fractional `(row, col)`.
pub fn pixel_to_grid(p: Point, cell: (f64, f64)) -> (f64, f64) {
    (p.y / cell.0 - 0.5, p.x / cell.1 - 0.5)
}

// ---------------------------------------------------------------------------
// Built-in descriptor

const PATCH: usize = 9;
const SCALES: [f64; 3] = [1.0, 2.0, 4.0];
/// Wide context patches sampled from box-filtered intensities; they tell
/// apart strokes that look alike up close.
const CONTEXT_SCALES: [f64; 4] = [8.0, 16.0, 32.0, 64.0];
const ORIENT_BINS: usize = 8;
/// Blocks with less than this RMS contrast (intensity units) are shrunk
/// towards zero instead of being blown up to unit norm.
const CONTRAST_FLOOR: f64 = 4.0;
const DARKNESS_WEIGHT: f64 = 0.5;
const BIAS: f64 = 0.1;

/// Channel count of [`extract_builtin_features`] output.
pub const BUILTIN_CHANNELS: usize =
    (SCALES.len() + CONTEXT_SCALES.len()) * (PATCH * PATCH + ORIENT_BINS + 1) + 1;

/// Hand-crafted multi-scale descriptor on a `(rows, cols)` grid.
///
/// Per scale (patch spans 1×, 2× and 4× the cell): a 9×9 bilinear intensity
/// patch, mean-subtracted, and an 8-bin gradient orientation histogram, each
/// normalized against a contrast floor; plus the patch's mean darkness. A
/// constant bias channel keeps flat regions well defined. The whole vector is
/// L2-normalized.
pub fn extract_builtin_features(image: &GrayImage, grid: (usize, usize)) -> FeatureMap {
    let (w, h) = image.dimensions();
    assert!(w > 0 && h > 0, "empty image");
    assert!(grid.0 > 0 && grid.1 > 0, "empty grid");
    let pixels: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let sampler = Bilinear {
        data: &pixels,
        width: w as usize,
        height: h as usize,
    };
    let boxes = BoxMean::new(&pixels, w as usize, h as usize);
    let cell = cell_size((h as usize, w as usize), grid);
    let channels = BUILTIN_CHANNELS;

    let data: Vec<f32> = (0..grid.0 * grid.1)
        .into_par_iter()
        .flat_map_iter(|pos| {
            let (row, col) = (pos / grid.1, pos % grid.1);
            let center = grid_to_pixel((row as f64, col as f64), cell);
            let v = describe(&sampler, &boxes, center, cell);
            debug_assert_eq!(v.len(), channels);
            v.into_iter().map(|x| x as f32)
        })
        .collect();

    FeatureMap::from_vectors(channels, grid.0, grid.1, (h as usize, w as usize), data)
        .expect("builtin descriptor is unit-normalized")
}

struct Bilinear<'a> {
    data: &'a [f64],
    width: usize,
    height: usize,
}

impl Bilinear<'_> {
    /// Samples at continuous pixel coordinates (pixel centers at +0.5),
    /// clamping to the border.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let at = |x: usize, y: usize| self.data[y * self.width + x];
        let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * tx;
        let bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * tx;
        top + (bot - top) * ty
    }
}

/// Box means over an integral image; windows are clipped to the image.
struct BoxMean {
    integral: Vec<f64>,
    width: usize,
    height: usize,
}

impl BoxMean {
    fn new(pixels: &[f64], width: usize, height: usize) -> Self {
        let stride = width + 1;
        let mut integral = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += pixels[y * width + x];
                integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
            }
        }
        Self {
            integral,
            width,
            height,
        }
    }

    /// Mean over pixels whose centers fall in `[x - r, x + r) × [y - r, y + r)`.
    fn mean(&self, x: f64, y: f64, r: f64) -> f64 {
        let clip = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        let mut x0 = clip(x - r, self.width);
        let mut x1 = clip(x + r, self.width);
        let mut y0 = clip(y - r, self.height);
        let mut y1 = clip(y + r, self.height);
        if x1 <= x0 {
            x0 = x0.min(self.width - 1);
            x1 = x0 + 1;
        }
        if y1 <= y0 {
            y0 = y0.min(self.height - 1);
            y1 = y0 + 1;
        }
        let stride = self.width + 1;
        let at = |x: usize, y: usize| self.integral[y * stride + x];
        let sum = at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0);
        sum / ((x1 - x0) * (y1 - y0)) as f64
    }
}

fn describe(
    sampler: &Bilinear<'_>,
    boxes: &BoxMean,
    center: Point,
    cell: (f64, f64),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(BUILTIN_CHANNELS);
    let scales = SCALES
        .iter()
        .map(|&s| (s, false))
        .chain(CONTEXT_SCALES.iter().map(|&s| (s, true)));
    for (scale, boxed) in scales {
        let span_x = cell.1 * scale;
        let span_y = cell.0 * scale;
        let radius = 0.5 * span_x.max(span_y) / PATCH as f64;
        let mut patch = [0.0f64; PATCH * PATCH];
        for a in 0..PATCH {
            let y = center.y + ((a as f64 + 0.5) / PATCH as f64 - 0.5) * span_y;
            for b in 0..PATCH {
                let x = center.x + ((b as f64 + 0.5) / PATCH as f64 - 0.5) * span_x;
                patch[a * PATCH + b] = if boxed {
                    boxes.mean(x, y, radius)
                } else {
                    sampler.sample(x, y)
                };
            }
        }
        let mean = patch.iter().sum::<f64>() / patch.len() as f64;
        for v in &mut patch {
            *v -= mean;
        }

        let mut hist = [0.0f64; ORIENT_BINS];
        for a in 0..PATCH {
            for b in 0..PATCH {
                let at = |a: usize, b: usize| patch[a * PATCH + b];
                let gx = at(a, (b + 1).min(PATCH - 1)) - at(a, b.saturating_sub(1));
                let gy = at((a + 1).min(PATCH - 1), b) - at(a.saturating_sub(1), b);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let pos = angle / std::f64::consts::TAU * ORIENT_BINS as f64;
                let lo = pos.floor() as usize % ORIENT_BINS;
                let hi = (lo + 1) % ORIENT_BINS;
                let frac = pos - pos.floor();
                hist[lo] += mag * (1.0 - frac);
                hist[hi] += mag * frac;
            }
        }

        push_block(&mut out, &patch, CONTRAST_FLOOR * PATCH as f64);
        push_block(&mut out, &hist, CONTRAST_FLOOR * (PATCH * PATCH) as f64);
        out.push(DARKNESS_WEIGHT * (128.0 - mean) / 128.0);
    }
    out.push(BIAS);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= norm + 1e-8;
    }
    out
}

fn push_block(out: &mut Vec<f64>, block: &[f64], floor: f64) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(floor);
    out.extend(block.iter().map(|v| v / denom));
}

// ---------------------------------------------------------------------------
// Similarity volume

/// Dense `H×W×H×W` cosine similarities, indexed
/// `[proto_row][proto_col][target_row][target_col]`.
#[derive(Debug, Clone)]
pub struct SimilarityVolume {
    proto_grid: (usize, usize),
    target_grid: (usize, usize),
    proto_cell: (f64, f64),
    target_cell: (f64, f64),
    proto_size: (usize, usize),
    target_size: (usize, usize),
    data: Vec<f32>,
}

impl SimilarityVolume {
    /// Builds a volume from raw values laid out proto-position-major.
    pub fn from_raw(
        proto_grid: (usize, usize),
        target_grid: (usize, usize),
        proto_size: (usize, usize),
        target_size: (usize, usize),
        data: Vec<f32>,
    ) -> Self {
        assert_eq!(
            data.len(),
            proto_grid.0 * proto_grid.1 * target_grid.0 * target_grid.1
        );
        Self {
            proto_grid,
            target_grid,
            proto_cell: cell_size(proto_size, proto_grid),
            target_cell: cell_size(target_size, target_grid),
            proto_size,
            target_size,
            data,
        }
    }

    pub fn proto_grid(&self) -> (usize, usize) {
        self.proto_grid
    }

    pub fn target_grid(&self) -> (usize, usize) {
        self.target_grid
    }

    pub fn proto_cells(&self) -> usize {
        self.proto_grid.0 * self.proto_grid.1
    }

    pub fn target_cells(&self) -> usize {
        self.target_grid.0 * self.target_grid.1
    }

    /// `(height, width)` of the prototype image.
    pub fn proto_size(&self) -> (usize, usize) {
        self.proto_size
    }

    /// `(height, width)` of the target image.
    pub fn target_size(&self) -> (usize, usize) {
        self.target_size
    }

    pub fn proto_cell(&self) -> (f64, f64) {
        self.proto_cell
    }

    pub fn target_cell(&self) -> (f64, f64) {
        self.target_cell
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f32 {
        let p = i * self.proto_grid.1 + j;
        let t = k * self.target_grid.1 + l;
        self.data[p * self.target_cells() + t]
    }

    /// Target slice `S[i][j][·][·]` for prototype cell index `p = i·W + j`.
    pub fn proto_slice(&self, p: usize) -> &[f32] {
        let n = self.target_cells();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn proto_index_to_pixel(&self, p: usize) -> Point {
        let (r, c) = (p / self.proto_grid.1, p % self.proto_grid.1);
        grid_to_pixel((r as f64, c as f64), self.proto_cell)
    }

    pub fn target_index_to_pixel(&self, t: usize) -> Point {
        let (r, c) = (t / self.target_grid.1, t % self.target_grid.1);
        grid_to_pixel((r as f64, c as f64), self.target_cell)
    }

    /// Volume with prototype and target roles swapped.
    pub fn transposed(&self) -> SimilarityVolume {
        let (np, nt) = (self.proto_cells(), self.target_cells());
        let mut data = vec![0.0f32; self.data.len()];
        for p in 0..np {
            for t in 0..nt {
                data[t * np + p] = self.data[p * nt + t];
            }
        }
        SimilarityVolume::from_raw(
            self.target_grid,
            self.proto_grid,
            self.target_size,
            self.proto_size,
            data,
        )
    }
}

/// `S[i][j][k][l] = f⁽ᵖ⁾ᵢⱼ · f⁽ᵗ⁾ₖₗ` for every pair of cells.
///
/// Every entry is an independent dot product with a fixed accumulation order,
/// so swapping the arguments yields exactly the transposed volume.
pub fn similarity_volume(
    proto: &FeatureMap,
    target: &FeatureMap,
) -> Result<SimilarityVolume, FeatureError> {
    if proto.channels != target.channels {
        return Err(FeatureError::ChannelMismatch {
            proto: proto.channels,
            target: target.channels,
        });
    }
    if proto.grid() != target.grid() {
        return Err(FeatureError::GridMismatch {
            proto: proto.grid(),
            target: target.grid(),
        });
    }
    let c = proto.channels;
    let np = proto.height * proto.width;
    let nt = target.height * target.width;
    let mut data = vec![0.0f32; np * nt];
    // S = P · Tᵀ with P: np×c and T: nt×c, both row-major.
    // SAFETY: the strides describe exactly the three buffers above, whose
    // lengths are np·c, nt·c and np·nt.
    unsafe {
        matrixmultiply::sgemm(
            np,
            c,
            nt,
            1.0,
            proto.vectors().as_ptr(),
            c as isize,
            1,
            target.vectors().as_ptr(),
            1,
            c as isize,
            0.0,
            data.as_mut_ptr(),
            nt as isize,
            1,
        );
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(SimilarityVolume::from_raw(
        proto.grid(),
        target.grid(),
        proto.source_size,
        target.source_size,
        data,
    ))
}
