//! Homogeneous 2-D geometry for stroke skeletons.
//!
//! Coordinates are continuous pixels with the origin at the top-left pixel
//! corner, x to the right and y downward.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest |det| accepted for an affine transform.
pub const MIN_AFFINE_DET: f64 = 1e-9;
/// Smallest |z'| accepted when dehomogenizing a projected point.
pub const MIN_PROJECTIVE_Z: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("projected point has vanishing homogeneous coordinate (z' = {0:e})")]
    DegenerateProjection(f64),
    #[error("affine transform is not invertible (det = {0:e})")]
    Singular(f64),
    #[error("non-finite transform parameter")]
    NonFinite,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("expected {expected} local transforms, got {got}")]
    LocalCountMismatch { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("skeleton io: {0}")]
    Io(#[from] std::io::Error),
    #[error("skeleton json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

/// Global transform `G` with the bottom row fixed to `[0, 0, 1]`.
///
/// Stored row-major as `[g11, g12, g13, g21, g22, g23]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct AffineTransform {
    g: [f64; 6],
}

impl AffineTransform {
    pub fn new(g: [f64; 6]) -> Result<Self, GeometryError> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let det = g[0] * g[4] - g[1] * g[3];
        if det.abs() < MIN_AFFINE_DET {
            return Err(GeometryError::Singular(det));
        }
        Ok(Self { g })
    }

    pub const fn identity() -> Self {
        Self {
            g: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        Self {
            g: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Result<Self, GeometryError> {
        Self::new([sx, 0.0, 0.0, 0.0, sy, 0.0])
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`,
    /// followed by a translation.
    pub fn similarity_about(
        center: Point,
        angle: f64,
        scale: f64,
        translation: (f64, f64),
    ) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = -scale * s;
        let d = scale * s;
        let e = scale * c;
        let tx = center.x + translation.0 - (a * center.x + b * center.y);
        let ty = center.y + translation.1 - (d * center.x + e * center.y);
        Self::new([a, b, tx, d, e, ty])
    }

    pub fn params(&self) -> [f64; 6] {
        self.g
    }

    pub fn det(&self) -> f64 {
        self.g[0] * self.g[4] - self.g[1] * self.g[3]
    }

    pub fn apply(&self, p: Point) -> Point {
        let g = &self.g;
        Point::new(
            g[0] * p.x + g[1] * p.y + g[2],
            g[3] * p.x + g[4] * p.y + g[5],
        )
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &AffineTransform) -> AffineTransform {
        let a = &self.g;
        let b = &first.g;
        AffineTransform {
            g: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn inverse(&self) -> AffineTransform {
        let g = &self.g;
        let det = self.det();
        let a = g[4] / det;
        let b = -g[1] / det;
        let d = -g[3] / det;
        let e = g[0] / det;
        AffineTransform {
            g: [
                a,
                b,
                -(a * g[2] + b * g[5]),
                d,
                e,
                -(d * g[2] + e * g[5]),
            ],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let g = &self.g;
        Matrix3::new(g[0], g[1], g[2], g[3], g[4], g[5], 0.0, 0.0, 1.0)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 6]> for AffineTransform {
    type Error = GeometryError;

    fn try_from(g: [f64; 6]) -> Result<Self, Self::Error> {
        Self::new(g)
    }
}

impl From<AffineTransform> for [f64; 6] {
    fn from(t: AffineTransform) -> Self {
        t.g
    }
}

/// Per-stroke perturbation `P = I + Δ`, with `Δ33` fixed to zero.
///
/// Parameters are `[p11, p12, p13, p21, p22, p23, p31, p32]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrokeTransform {
    pub p: [f64; 8],
}

impl StrokeTransform {
    pub const fn zero() -> Self {
        Self { p: [0.0; 8] }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|v| v.is_finite())
    }

    /// The full 3×3 matrix `I + Δ`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let p = &self.p;
        Matrix3::new(
            1.0 + p[0],
            p[1],
            p[2],
            p[3],
            1.0 + p[4],
            p[5],
            p[6],
            p[7],
            1.0,
        )
    }

    /// Rescales a projective matrix so that its `(3,3)` entry is 1 and reads
    /// off the perturbation parameters.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeometryError> {
        let w = m[(2, 2)];
        if w.abs() < MIN_PROJECTIVE_Z {
            return Err(GeometryError::DegenerateProjection(w));
        }
        let m = m / w;
        let out = Self {
            p: [
                m[(0, 0)] - 1.0,
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)] - 1.0,
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
            ],
        };
        if !out.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(out)
    }

    pub fn linf_norm(&self) -> f64 {
        self.p.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn apply_affine(t: &AffineTransform, p: Point) -> Point {
    t.apply(p)
}

/// Maps `pt` through `P · G` and dehomogenizes.
pub fn apply_projective(
    local: &StrokeTransform,
    g: &AffineTransform,
    pt: Point,
) -> Result<Point, GeometryError> {
    let v = g.apply(pt);
    let p = &local.p;
    let x = (1.0 + p[0]) * v.x + p[1] * v.y + p[2];
    let y = p[3] * v.x + (1.0 + p[4]) * v.y + p[5];
    let z = p[6] * v.x + p[7] * v.y + 1.0;
    if !(z.abs() >= MIN_PROJECTIVE_Z) {
        return Err(GeometryError::DegenerateProjection(z));
    }
    Ok(Point::new(x / z, y / z))
}

/// Least-squares affine fit minimizing `Σ‖G·srcᵢ − dstᵢ‖²`.
///
/// Points are centered and scaled before solving; the rank test runs on the
/// conditioned design matrix.
pub fn fit_affine_least_squares(
    src: &[Point],
    dst: &[Point],
) -> Result<AffineTransform, GeometryError> {
    assert_eq!(src.len(), dst.len(), "src/dst length mismatch");
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints { needed: 3, got: n });
    }

    let (src_norm, src_n) = normalizer(src);
    let (dst_norm, _) = normalizer(dst);
    if src_n.is_none() {
        return Err(GeometryError::RankDeficient);
    }
    let src_n = src_n.unwrap();

    let mut a = DMatrix::<f64>::zeros(n, 3);
    let mut bx = DVector::<f64>::zeros(n);
    let mut by = DVector::<f64>::zeros(n);
    for (i, (s, d)) in src_n.iter().zip(dst).enumerate() {
        a[(i, 0)] = s.x;
        a[(i, 1)] = s.y;
        a[(i, 2)] = 1.0;
        let d = dst_norm.apply(*d);
        bx[i] = d.x;
        by[i] = d.y;
    }

    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(GeometryError::RankDeficient);
    }
    let rx = svd.solve(&bx, 0.0).map_err(|_| GeometryError::RankDeficient)?;
    let ry = svd.solve(&by, 0.0).map_err(|_| GeometryError::RankDeficient)?;

    // Affine solved in normalized frames; undo both conditionings.
    let fitted = AffineTransform {
        g: [rx[0], rx[1], rx[2], ry[0], ry[1], ry[2]],
    };
    let total = dst_norm.inverse().compose(&fitted).compose(&src_norm);
    AffineTransform::new(total.g).map_err(|e| match e {
        GeometryError::Singular(_) => GeometryError::RankDeficient,
        other => other,
    })
}

/// Isotropic conditioning: centroid to origin, mean distance √2.
/// Returns the conditioning transform and the conditioned points, or `None`
/// for the points when they all coincide.
fn normalizer(pts: &[Point]) -> (AffineTransform, Option<Vec<Point>>) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return (AffineTransform::translation(-cx, -cy), None);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = AffineTransform {
        g: [s, 0.0, -s * cx, 0.0, s, -s * cy],
    };
    let out = pts.iter().map(|p| t.apply(*p)).collect();
    (t, Some(out))
}

/// Solves for the stroke transform `P` with `P·srcᵢ ≅ dstᵢ` from exactly four
/// correspondences (no three collinear).
pub fn stroke_transform_from_points(
    src: &[Point; 4],
    dst: &[Point; 4],
) -> Result<StrokeTransform, GeometryError> {
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = (dst[i].x, dst[i].y);
        let r = 2 * i;
        a.set_row(
            r,
            &nalgebra::SMatrix::<f64, 1, 8>::from_row_slice(&[
                x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y,
            ]),
        );
        a.set_row(
            r + 1,
            &nalgebra::SMatrix::<f64, 1, 8>::from_row_slice(&[
                0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y,
            ]),
        );
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b).ok_or(GeometryError::RankDeficient)?;
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    StrokeTransform::from_matrix(&m)
}

/// Index of a stroke keypoint. `HEAD_CENTROID` is a derived point usable as an
/// edge endpoint but not a stored keypoint.
pub const HEAD_A: usize = 0;
pub const HEAD_B: usize = 1;
pub const HEAD_C: usize = 2;
pub const TAIL: usize = 3;
pub const HEAD_CENTROID: usize = 4;
pub const KEYPOINTS_PER_STROKE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub head: [Point; 3],
    pub tail: Point,
}

impl Stroke {
    pub fn new(head_a: Point, head_b: Point, head_c: Point, tail: Point) -> Self {
        Self {
            head: [head_a, head_b, head_c],
            tail,
        }
    }

    pub fn keypoints(&self) -> [Point; 4] {
        [self.head[0], self.head[1], self.head[2], self.tail]
    }

    pub fn from_keypoints(kp: [Point; 4]) -> Self {
        Self::new(kp[0], kp[1], kp[2], kp[3])
    }

    pub fn head_centroid(&self) -> Point {
        let [a, b, c] = self.head;
        Point::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    /// Keypoint by index, including the derived head centroid.
    pub fn point(&self, index: usize) -> Point {
        match index {
            HEAD_A | HEAD_B | HEAD_C => self.head[index],
            TAIL => self.tail,
            HEAD_CENTROID => self.head_centroid(),
            _ => panic!("keypoint index {index} out of range"),
        }
    }

    pub fn head_area(&self) -> f64 {
        let [a, b, c] = self.head;
        0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Stroke {
        Stroke::new(f(self.head[0]), f(self.head[1]), f(self.head[2]), f(self.tail))
    }
}

/// A drawn segment between two stroke keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Edge {
    pub stroke_a: usize,
    pub point_a: usize,
    pub stroke_b: usize,
    pub point_b: usize,
}

impl From<[usize; 4]> for Edge {
    fn from(v: [usize; 4]) -> Self {
        Edge {
            stroke_a: v[0],
            point_a: v[1],
            stroke_b: v[2],
            point_b: v[3],
        }
    }
}

impl From<Edge> for [usize; 4] {
    fn from(e: Edge) -> Self {
        [e.stroke_a, e.point_a, e.stroke_b, e.point_b]
    }
}

/// Head triangle plus the centroid-to-tail segment for stroke `i`.
pub fn default_stroke_edges(i: usize) -> [Edge; 4] {
    [
        Edge::from([i, HEAD_A, i, HEAD_B]),
        Edge::from([i, HEAD_B, i, HEAD_C]),
        Edge::from([i, HEAD_C, i, HEAD_A]),
        Edge::from([i, HEAD_CENTROID, i, TAIL]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    sign_name: String,
    strokes: Vec<Stroke>,
    edges: Vec<Edge>,
}

impl Skeleton {
    /// Builds a prototype skeleton, checking stroke/edge structure and that
    /// every head triangle is non-degenerate.
    pub fn new(
        sign_name: impl Into<String>,
        strokes: Vec<Stroke>,
        edges: Option<Vec<Edge>>,
    ) -> Result<Self, GeometryError> {
        let edges =
            edges.unwrap_or_else(|| (0..strokes.len()).flat_map(default_stroke_edges).collect());
        let s = Self {
            sign_name: sign_name.into(),
            strokes,
            edges,
        };
        s.check_structure()?;
        for (i, st) in s.strokes.iter().enumerate() {
            if st.head_area() < 1e-6 {
                return Err(GeometryError::InvalidSkeleton(format!(
                    "stroke {i} has a collinear head"
                )));
            }
        }
        Ok(s)
    }

    fn check_structure(&self) -> Result<(), GeometryError> {
        let n = self.strokes.len();
        if n == 0 {
            return Err(GeometryError::InvalidSkeleton("no strokes".into()));
        }
        if self
            .strokes
            .iter()
            .any(|s| !s.keypoints().iter().all(Point::is_finite))
        {
            return Err(GeometryError::InvalidSkeleton("non-finite keypoint".into()));
        }
        let mut covered = vec![false; n];
        for e in &self.edges {
            if e.stroke_a >= n || e.stroke_b >= n {
                return Err(GeometryError::InvalidSkeleton(format!(
                    "edge {e:?} references a missing stroke"
                )));
            }
            if e.point_a > HEAD_CENTROID || e.point_b > HEAD_CENTROID {
                return Err(GeometryError::InvalidSkeleton(format!(
                    "edge {e:?} references a missing keypoint"
                )));
            }
            covered[e.stroke_a] = true;
            covered[e.stroke_b] = true;
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(GeometryError::InvalidSkeleton(format!(
                "stroke {i} has no edges"
            )));
        }
        Ok(())
    }

    pub fn sign_name(&self) -> &str {
        &self.sign_name
    }

    pub fn strokes(&self) -> &[Stroke] {
        &self.strokes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }

    /// All stored keypoints, four per stroke, in stroke order.
    pub fn keypoints(&self) -> Vec<Point> {
        self.strokes.iter().flat_map(|s| s.keypoints()).collect()
    }

    pub fn edge_endpoints(&self, e: &Edge) -> (Point, Point) {
        (
            self.strokes[e.stroke_a].point(e.point_a),
            self.strokes[e.stroke_b].point(e.point_b),
        )
    }

    /// Same edges and name, new stroke geometry. No head-degeneracy check.
    pub fn with_strokes(&self, strokes: Vec<Stroke>) -> Skeleton {
        assert_eq!(strokes.len(), self.strokes.len());
        Skeleton {
            sign_name: self.sign_name.clone(),
            strokes,
            edges: self.edges.clone(),
        }
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Skeleton {
        self.with_strokes(self.strokes.iter().map(|s| s.map(&f)).collect())
    }

    pub fn from_json_str(s: &str) -> Result<Self, GeometryError> {
        let file: SkeletonFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&SkeletonFile::from(self)).expect("skeleton serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// On-disk skeleton layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub sign: String,
    pub strokes: Vec<Stroke>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<Edge>>,
}

impl TryFrom<SkeletonFile> for Skeleton {
    type Error = GeometryError;

    fn try_from(f: SkeletonFile) -> Result<Self, Self::Error> {
        Skeleton::new(f.sign, f.strokes, f.edges)
    }
}

impl From<&Skeleton> for SkeletonFile {
    fn from(s: &Skeleton) -> Self {
        SkeletonFile {
            sign: s.sign_name.clone(),
            strokes: s.strokes.clone(),
            edges: Some(s.edges.clone()),
        }
    }
}

/// Maps every keypoint of stroke `i` through `P⁽ⁱ⁾·G`, or `G` alone when no
/// local transforms are given.
pub fn transform_skeleton(
    s: &Skeleton,
    g: &AffineTransform,
    locals: Option<&[StrokeTransform]>,
) -> Result<Skeleton, GeometryError> {
    match locals {
        None => Ok(s.map_points(|p| g.apply(p))),
        Some(locals) => {
            if locals.len() != s.stroke_count() {
                return Err(GeometryError::LocalCountMismatch {
                    expected: s.stroke_count(),
                    got: locals.len(),
                });
            }
            let strokes = s
                .strokes
                .iter()
                .zip(locals)
                .map(|(st, local)| {
                    let kp = st.keypoints();
                    let mut out = [Point::default(); 4];
                    for (o, p) in out.iter_mut().zip(kp) {
                        *o = apply_projective(local, g, p)?;
                    }
                    Ok(Stroke::from_keypoints(out))
                })
                .collect::<Result<Vec<_>, GeometryError>>()?;
            Ok(s.with_strokes(strokes))
        }
    }
}

/// Twice the signed area of triangle `(a, b, c)`.
pub(crate) fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull in counter-clockwise order (monotone chain). Collinear points
/// on the hull boundary are dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc.abs()
}

/// Inclusive point-in-convex-polygon test for a counter-clockwise polygon.
pub fn convex_contains(poly: &[Point], p: Point) -> bool {
    if poly.len() < 3 {
        return false;
    }
    (0..poly.len()).all(|i| cross(poly[i], poly[(i + 1) % poly.len()], p) >= 0.0)
}

/// Reorders a triangle or quad counter-clockwise (in the y-down frame this is
/// the positive-cross orientation used by [`convex_contains`]).
pub fn ccw(mut poly: Vec<Point>) -> Vec<Point> {
    if poly.len() >= 3 && signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

fn signed_area(poly: &[Point]) -> f64 {
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}
