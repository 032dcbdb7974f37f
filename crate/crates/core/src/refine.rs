//! Per-stroke projective refinement.
//!
//! Each stroke `i` gets a perturbation `P⁽ⁱ⁾ = I + Δ⁽ⁱ⁾` applied after the
//! global affine. The optimizer works on `Δ` expressed in the target's
//! normalized frame (`x ↦ 2x/W − 1`, `y ↦ 2y/H − 1`) so that one unit of every
//! parameter moves points by a comparable amount; results are converted back
//! to pixel-frame [`StrokeTransform`]s.
//!
//! The objective is
//! `λ_sim·L_sim + λ_sal·L_sal + λ_reg·(L_L1 + L_oob)` where the two data
//! terms are negated means of softmaxed fields sampled bilinearly at the
//! transformed skeleton points.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{pixel_to_grid, SimilarityVolume};
use crate::geometry::{
    transform_skeleton, AffineTransform, GeometryError, Point, Skeleton, StrokeTransform,
    MIN_PROJECTIVE_Z,
};
use crate::saliency::SaliencyMap;

pub const PARAMS_PER_STROKE: usize = 8;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error("saliency grid {saliency:?} does not match the volume's target grid {volume:?}")]
    GridMismatch {
        saliency: (usize, usize),
        volume: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lambda_sim: f64,
    pub lambda_sal: f64,
    pub lambda_reg: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub softmax_temperature: f64,
    pub points_per_segment: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda_sim: 1.0,
            lambda_sal: 3e-4,
            lambda_reg: 1e-4,
            iterations: 100,
            learning_rate: 0.01,
            softmax_temperature: 100.0,
            points_per_segment: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let nonneg = [
            ("lambda_sim", self.lambda_sim),
            ("lambda_sal", self.lambda_sal),
            ("lambda_reg", self.lambda_reg),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RefineError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("softmax_temperature", self.softmax_temperature),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RefineError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(RefineError::InvalidConfig("adam betas must be in [0, 1)".into()));
        }
        if self.iterations == 0 {
            return Err(RefineError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// A point on the prototype skeleton tagged with the stroke that moves it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkeletonSample {
    pub stroke: usize,
    pub point: Point,
    pub keypoint: bool,
}

/// All keypoints plus `points_per_segment` uniform random points on every
/// edge. Points on an edge joining two strokes follow the nearer endpoint's
/// stroke.
pub fn sample_skeleton_points(
    s: &Skeleton,
    points_per_segment: usize,
    rng: &mut impl Rng,
) -> Vec<SkeletonSample> {
    let mut out = Vec::with_capacity(s.stroke_count() * 4 + s.edges().len() * points_per_segment);
    for (i, st) in s.strokes().iter().enumerate() {
        out.extend(st.keypoints().into_iter().map(|p| SkeletonSample {
            stroke: i,
            point: p,
            keypoint: true,
        }));
    }
    for e in s.edges() {
        let (a, b) = s.edge_endpoints(e);
        for _ in 0..points_per_segment {
            let t = open_unit(rng);
            out.push(SkeletonSample {
                stroke: if t < 0.5 { e.stroke_a } else { e.stroke_b },
                point: a.lerp(&b, t),
                keypoint: false,
            });
        }
    }
    out
}

/// Uniform draw from the open interval (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    }
}

/// `exp(T·x) / Σ exp(T·x)`, stabilized by subtracting the maximum.
pub fn softmax_field(field: &[f64], temperature: f64) -> Vec<f64> {
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = field
        .iter()
        .map(|&v| (temperature * (v - max)).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Scalar field on a grid whose cell `(r, c)` sits at integer coordinates;
/// zero outside.
#[derive(Debug, Clone)]
pub struct GridField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    fn at(&self, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            0.0
        } else {
            self.data[r as usize * self.width + c as usize]
        }
    }

    /// Bilinear value and its partial derivatives `(∂/∂row, ∂/∂col)`.
    pub fn sample(&self, row: f64, col: f64) -> (f64, f64, f64) {
        let r0 = row.floor();
        let c0 = col.floor();
        let (ty, tx) = (row - r0, col - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v00 = self.at(r0, c0);
        let v01 = self.at(r0, c0 + 1);
        let v10 = self.at(r0 + 1, c0);
        let v11 = self.at(r0 + 1, c0 + 1);
        let top = v00 + (v01 - v00) * tx;
        let bot = v10 + (v11 - v10) * tx;
        let value = top + (bot - top) * ty;
        let d_row = bot - top;
        let d_col = (v01 - v00) * (1.0 - ty) + (v11 - v10) * ty;
        (value, d_row, d_col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: f64,
    pub sal: f64,
    pub l1: f64,
    pub oob: f64,
}

impl LossBreakdown {
    pub fn reg(&self) -> f64 {
        self.l1 + self.oob
    }
}

/// Pixel ↔ `[-1, 1]` mapping for an image of `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedFrame {
    pub height: f64,
    pub width: f64,
}

impl NormalizedFrame {
    pub fn new(size: (usize, usize)) -> Self {
        Self {
            height: size.0 as f64,
            width: size.1 as f64,
        }
    }

    pub fn to_normalized(&self) -> AffineTransform {
        AffineTransform::new([
            2.0 / self.width,
            0.0,
            -1.0,
            0.0,
            2.0 / self.height,
            -1.0,
        ])
        .expect("non-empty frame")
    }

    /// Pixel-frame equivalent of a normalized-frame perturbation:
    /// `N⁻¹·(I+Δ)·N`, rescaled so its `(3,3)` entry is 1.
    pub fn to_pixel(&self, local: &StrokeTransform) -> Result<StrokeTransform, GeometryError> {
        let n = self.to_normalized().matrix();
        let n_inv = self.to_normalized().inverse().matrix();
        StrokeTransform::from_matrix(&(n_inv * local.matrix() * n))
    }

    /// Inverse of [`NormalizedFrame::to_pixel`].
    pub fn from_pixel(&self, local: &StrokeTransform) -> Result<StrokeTransform, GeometryError> {
        let n = self.to_normalized().matrix();
        let n_inv = self.to_normalized().inverse().matrix();
        StrokeTransform::from_matrix(&(n * local.matrix() * n_inv))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: LossBreakdown,
    /// `∂L/∂Δ`, `8·N` entries in stroke-major order.
    pub grad: Vec<f64>,
}

/// Inputs to the refinement objective with cached softmaxed target slices.
pub struct RefineProblem<'a> {
    volume: &'a SimilarityVolume,
    saliency: GridField,
    skeleton: &'a Skeleton,
    /// Prototype pixels → target normalized coordinates.
    to_norm: AffineTransform,
    frame: NormalizedFrame,
    cfg: RefineConfig,
    slices: HashMap<usize, GridField>,
}

struct Projected {
    /// Normalized target coordinates.
    xn: f64,
    yn: f64,
    /// `∂xn/∂Δ` and `∂yn/∂Δ` for the stroke's 8 parameters.
    dx: [f64; PARAMS_PER_STROKE],
    dy: [f64; PARAMS_PER_STROKE],
}

impl<'a> RefineProblem<'a> {
    pub fn new(
        volume: &'a SimilarityVolume,
        saliency: &SaliencyMap,
        skeleton: &'a Skeleton,
        g: &AffineTransform,
        cfg: &RefineConfig,
    ) -> Result<Self, RefineError> {
        cfg.validate()?;
        if (saliency.height(), saliency.width()) != volume.target_grid() {
            return Err(RefineError::GridMismatch {
                saliency: (saliency.height(), saliency.width()),
                volume: volume.target_grid(),
            });
        }
        let frame = NormalizedFrame::new(volume.target_size());
        let sal = softmax_field(saliency.values(), cfg.softmax_temperature);
        Ok(Self {
            volume,
            saliency: GridField::new(saliency.height(), saliency.width(), sal),
            skeleton,
            to_norm: frame.to_normalized().compose(g),
            frame,
            cfg: cfg.clone(),
            slices: HashMap::new(),
        })
    }

    pub fn frame(&self) -> NormalizedFrame {
        self.frame
    }

    /// Prototype grid cell nearest to `p`, as a linear index.
    fn proto_cell(&self, p: Point) -> usize {
        let (gh, gw) = self.volume.proto_grid();
        let (r, c) = pixel_to_grid(p, self.volume.proto_cell());
        let r = (r.round().max(0.0) as usize).min(gh - 1);
        let c = (c.round().max(0.0) as usize).min(gw - 1);
        r * gw + c
    }

    fn slice(&mut self, cell: usize) -> &GridField {
        let volume = self.volume;
        let t = self.cfg.softmax_temperature;
        self.slices.entry(cell).or_insert_with(|| {
            let (h, w) = volume.target_grid();
            let raw: Vec<f64> = volume.proto_slice(cell).iter().map(|&v| f64::from(v)).collect();
            GridField::new(h, w, softmax_field(&raw, t))
        })
    }

    fn project(&self, local: &StrokeTransform, p: Point) -> Result<Projected, GeometryError> {
        let u = self.to_norm.apply(p);
        let d = &local.p;
        let x = (1.0 + d[0]) * u.x + d[1] * u.y + d[2];
        let y = d[3] * u.x + (1.0 + d[4]) * u.y + d[5];
        let z = d[6] * u.x + d[7] * u.y + 1.0;
        if !(z.abs() >= MIN_PROJECTIVE_Z) {
            return Err(GeometryError::DegenerateProjection(z));
        }
        let (xn, yn) = (x / z, y / z);
        let iz = 1.0 / z;
        Ok(Projected {
            xn,
            yn,
            dx: [
                u.x * iz,
                u.y * iz,
                iz,
                0.0,
                0.0,
                0.0,
                -xn * u.x * iz,
                -xn * u.y * iz,
            ],
            dy: [
                0.0,
                0.0,
                0.0,
                u.x * iz,
                u.y * iz,
                iz,
                -yn * u.x * iz,
                -yn * u.y * iz,
            ],
        })
    }

    /// Loss terms and analytic gradient at `locals` (normalized frame).
    ///
    /// `|·|` has sub-gradient 0 at 0; the out-of-bounds term routes its
    /// gradient to the first coordinate attaining the maximum.
    pub fn loss_and_gradient(
        &mut self,
        locals: &[StrokeTransform],
        samples: &[SkeletonSample],
    ) -> Result<LossGradient, RefineError> {
        let n = self.skeleton.stroke_count();
        if locals.len() != n {
            return Err(GeometryError::LocalCountMismatch {
                expected: n,
                got: locals.len(),
            }
            .into());
        }
        let cfg = self.cfg.clone();
        let mut grad = vec![0.0; n * PARAMS_PER_STROKE];
        let (gh, gw) = self.volume.target_grid();
        // d(grid col)/d(xn) and d(grid row)/d(yn).
        let (col_scale, row_scale) = (gw as f64 / 2.0, gh as f64 / 2.0);
        let m = samples.len().max(1) as f64;

        let mut sim = 0.0;
        let mut sal = 0.0;
        for s in samples {
            let pr = self.project(&locals[s.stroke], s.point)?;
            let col = (pr.xn + 1.0) * col_scale - 0.5;
            let row = (pr.yn + 1.0) * row_scale - 0.5;
            let cell = self.proto_cell(s.point);
            let (v_sim, dr_sim, dc_sim) = self.slice(cell).sample(row, col);
            let (v_sal, dr_sal, dc_sal) = self.saliency.sample(row, col);
            sim -= v_sim / m;
            sal -= v_sal / m;
            let g_col = -(cfg.lambda_sim * dc_sim + cfg.lambda_sal * dc_sal) / m * col_scale;
            let g_row = -(cfg.lambda_sim * dr_sim + cfg.lambda_sal * dr_sal) / m * row_scale;
            let gs = &mut grad[s.stroke * PARAMS_PER_STROKE..(s.stroke + 1) * PARAMS_PER_STROKE];
            for k in 0..PARAMS_PER_STROKE {
                gs[k] += g_col * pr.dx[k] + g_row * pr.dy[k];
            }
        }

        let mut l1 = 0.0;
        for (i, local) in locals.iter().enumerate() {
            for (k, v) in local.p.iter().enumerate() {
                l1 += v.abs() / n as f64;
                if *v != 0.0 {
                    grad[i * PARAMS_PER_STROKE + k] += cfg.lambda_reg * v.signum() / n as f64;
                }
            }
        }

        // Out-of-bounds: largest excursion of any keypoint coordinate.
        let (w, h) = (self.frame.width, self.frame.height);
        let mut oob = 0.0;
        let mut oob_arg: Option<(usize, f64, [f64; PARAMS_PER_STROKE])> = None;
        for (i, st) in self.skeleton.strokes().iter().enumerate() {
            for kp in st.keypoints() {
                let pr = self.project(&locals[i], kp)?;
                let px = (pr.xn + 1.0) * w / 2.0;
                let py = (pr.yn + 1.0) * h / 2.0;
                let candidates = [
                    (-px, -w / 2.0, &pr.dx),
                    (px - w, w / 2.0, &pr.dx),
                    (-py, -h / 2.0, &pr.dy),
                    (py - h, h / 2.0, &pr.dy),
                ];
                for (excess, scale, d) in candidates {
                    if excess > oob {
                        oob = excess;
                        oob_arg = Some((i, scale, *d));
                    }
                }
            }
        }
        if let Some((i, scale, d)) = oob_arg {
            for k in 0..PARAMS_PER_STROKE {
                grad[i * PARAMS_PER_STROKE + k] += cfg.lambda_reg * scale * d[k];
            }
        }

        let loss = LossBreakdown {
            total: cfg.lambda_sim * sim + cfg.lambda_sal * sal + cfg.lambda_reg * (l1 + oob),
            sim,
            sal,
            l1,
            oob,
        };
        Ok(LossGradient { loss, grad })
    }

    pub fn loss(
        &mut self,
        locals: &[StrokeTransform],
        samples: &[SkeletonSample],
    ) -> Result<LossBreakdown, RefineError> {
        Ok(self.loss_and_gradient(locals, samples)?.loss)
    }
}

/// One-shot objective evaluation; see [`RefineProblem::loss_and_gradient`].
pub fn loss_and_gradient(
    volume: &SimilarityVolume,
    saliency: &SaliencyMap,
    skeleton: &Skeleton,
    g: &AffineTransform,
    locals: &[StrokeTransform],
    samples: &[SkeletonSample],
    cfg: &RefineConfig,
) -> Result<LossGradient, RefineError> {
    RefineProblem::new(volume, saliency, skeleton, g, cfg)?.loss_and_gradient(locals, samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// Pixel-frame perturbations, usable with [`transform_skeleton`].
    pub locals: Vec<StrokeTransform>,
    /// The optimized parameters in the target's normalized frame.
    pub normalized_locals: Vec<StrokeTransform>,
    /// Loss before each update.
    pub loss_trace: Vec<LossBreakdown>,
    pub final_skeleton: Skeleton,
}

impl RefinementResult {
    pub fn write_trace_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,total,sim,sal,l1,oob")?;
        for (i, l) in self.loss_trace.iter().enumerate() {
            writeln!(w, "{i},{},{},{},{},{}", l.total, l.sim, l.sal, l.l1, l.oob)?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &RefineConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Descent direction for parameters sitting exactly at zero: the smallest
/// element of the L1 subdifferential, so a parameter leaves zero only when
/// the smooth gradient outweighs the penalty.
fn l1_pseudo_gradient(grad: &mut [f64], params: &[f64], l1_weight: f64) {
    for (g, &p) in grad.iter_mut().zip(params) {
        if p == 0.0 {
            *g = if *g > l1_weight {
                *g - l1_weight
            } else if *g < -l1_weight {
                *g + l1_weight
            } else {
                0.0
            };
        }
    }
}

/// Adam on all `8·N` perturbation parameters, starting from the identity.
/// Segment points are redrawn every iteration.
pub fn refine(
    volume: &SimilarityVolume,
    saliency: &SaliencyMap,
    skeleton: &Skeleton,
    g: &AffineTransform,
    cfg: &RefineConfig,
) -> Result<RefinementResult, RefineError> {
    let mut problem = RefineProblem::new(volume, saliency, skeleton, g, cfg)?;
    let n = skeleton.stroke_count();
    let mut params = vec![0.0; n * PARAMS_PER_STROKE];
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let l1_weight = cfg.lambda_reg / n as f64;

    for _ in 0..cfg.iterations {
        let samples = sample_skeleton_points(skeleton, cfg.points_per_segment, &mut rng);
        let locals = unflatten(&params);
        let LossGradient { loss, mut grad } = problem.loss_and_gradient(&locals, &samples)?;
        trace.push(loss);
        l1_pseudo_gradient(&mut grad, &params, l1_weight);
        adam.step(&mut params, &grad, cfg);
    }

    let normalized_locals = unflatten(&params);
    let frame = problem.frame();
    let locals = normalized_locals
        .iter()
        .map(|l| frame.to_pixel(l))
        .collect::<Result<Vec<_>, _>>()?;
    let final_skeleton = transform_skeleton(skeleton, g, Some(&locals))?;
    Ok(RefinementResult {
        locals,
        normalized_locals,
        loss_trace: trace,
        final_skeleton,
    })
}

fn unflatten(params: &[f64]) -> Vec<StrokeTransform> {
    params
        .chunks_exact(PARAMS_PER_STROKE)
        .map(|c| StrokeTransform {
            p: c.try_into().unwrap(),
        })
        .collect()
}
