//! Pinhole camera geometry: projection, backprojection, bilinear sampling and
//! inverse warping.
//!
//! Pixel `(row i, col j)` sits at the continuous coordinate `x = j, y = i`.
//! Cameras look down `+z`, with `x` to the right and `y` down.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projected depths at or below this are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self> {
        if !(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0) {
            return Err(Error::InvalidInput(format!(
                "field of view {horizontal_fov_deg} outside (0, 180)"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("zero-sized image".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// `K⁻¹ p̃`: the viewing ray through `p` scaled to unit depth.
    #[inline]
    pub fn ray(&self, p: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, point: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        )
    }

    /// Inclusive continuous bounds `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Rigid transform `x ↦ R x + t`.
///
/// The tangent space is ordered `(ω, v)`: axis-angle rotation first, then the
/// translational part, with `exp(ω, v) = (exp(ω), V(ω) v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

/// Axis-angle of a rotation matrix, accurate for small angles.
fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let sin = vee.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta < 1e-4 {
        vee * (1.0 + theta * theta / 6.0)
    } else if std::f64::consts::PI - theta < 1e-3 {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    } else {
        vee * (theta / sin)
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = PoseSE3 {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Exact identity, with no tolerance.
    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rotation is not in SO(3): |RᵀR - I|max = {ortho:e}, det = {det}"
            )));
        }
        Ok(())
    }

    pub fn exp(xi: &Vector6<f64>) -> Self {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = skew(&omega);
        let w2 = w * w;
        let (a, b) = if theta < 1e-6 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let v_mat = Matrix3::identity() + w * a + w2 * b;
        PoseSE3 {
            rotation: Rotation3::from_scaled_axis(omega).into_inner(),
            translation: v_mat * v,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let omega = rotation_log(&self.rotation);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = skew(&omega);
        let c = if theta < 1e-6 {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        let v = v_inv * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn scale_translation(&self, s: f64) -> Self {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

/// Row-major, channel-interleaved image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite samples".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, c: usize) -> &mut f64 {
        &mut self.data[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// One channel as a dense plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn from_plane(height: usize, width: usize, plane: Vec<f64>) -> Self {
        Image {
            height,
            width,
            channels: 1,
            data: plane,
        }
    }

    /// Channel mean at every pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }
}

/// Dense per-pixel scalar map without sign constraints (loss maps, gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(height: usize, width: usize) -> Self {
        ScalarField {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "depth field {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "depth entries must be positive and finite, found {bad}"
            )));
        }
        Ok(DepthField {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        assert!(value > 0.0 && value.is_finite(), "depth must be positive");
        DepthField {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn scaled(&self, s: f64) -> Self {
        DepthField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|d| d * s).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Vector3<f64>>,
}

impl NormalField {
    /// Validates unit length within 1e-6.
    pub fn new(height: usize, width: usize, data: Vec<Vector3<f64>>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "normal field {height}x{width} needs {} vectors, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|n| !((n.norm() - 1.0).abs() <= 1e-6)) {
            return Err(Error::InvalidInput(format!(
                "normal {bad:?} is not unit length"
            )));
        }
        Ok(NormalField {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, n: Vector3<f64>) -> Self {
        NormalField {
            height,
            width,
            data: vec![n.normalize(); height * width],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Vector3<f64> {
        self.data[i * self.width + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Flips every vector that does not face the camera (`n · ray < 0`).
    pub fn orient_towards_camera(&mut self, k: &Intrinsics) {
        for i in 0..self.height {
            for j in 0..self.width {
                let ray = k.ray(Vector2::new(j as f64, i as f64));
                let n = &mut self.data[i * self.width + j];
                if n.dot(&ray) > 0.0 {
                    *n = -*n;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }
}

/// `D(p) K⁻¹ p̃`.
pub fn backproject(p: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "backprojection needs positive depth, got {depth}"
        )));
    }
    Ok(k.ray(p) * depth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Continuous source-view pixel coordinate; may lie outside the image.
    pub coord: Vector2<f64>,
    /// Depth of the transformed point in the source camera.
    pub depth: f64,
    /// Transformed point in source camera coordinates.
    pub point: Vector3<f64>,
    pub in_front: bool,
    pub in_bounds: bool,
}

impl Projection {
    pub fn is_valid(&self) -> bool {
        self.in_front && self.in_bounds
    }
}

/// Transfers target pixel `p` with depth `depth` through `pose` into the
/// source camera.
#[inline]
pub fn project_point(p: Vector2<f64>, depth: f64, pose: &PoseSE3, k: &Intrinsics) -> Projection {
    let point = pose.transform_point(&(k.ray(p) * depth));
    let in_front = point.z > DEPTH_EPSILON;
    let coord = if in_front && pose.is_identity() {
        p
    } else if in_front {
        k.project(&point)
    } else {
        Vector2::new(f64::NAN, f64::NAN)
    };
    Projection {
        coord,
        depth: point.z,
        point,
        in_front,
        in_bounds: in_front && k.contains(coord),
    }
}

/// Projection of the integer target pixel `(row, col)` using its stored depth.
pub fn project_pixel(
    row: usize,
    col: usize,
    depth: &DepthField,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Result<Projection> {
    if row >= depth.height || col >= depth.width {
        return Err(Error::InvalidInput(format!(
            "pixel ({row}, {col}) outside {}x{} depth field",
            depth.height, depth.width
        )));
    }
    Ok(project_point(
        Vector2::new(col as f64, row as f64),
        depth.at(row, col),
        pose,
        k,
    ))
}

/// The four taps and fractional weights of a bilinear lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

impl BilinearTap {
    /// `None` when `q` falls outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn new(q: Vector2<f64>, width: usize, height: usize) -> Option<Self> {
        if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= (width - 1) as f64 && q.y <= (height - 1) as f64) {
            return None;
        }
        let (x0, x1) = lattice_pair(q.x, width);
        let (y0, y1) = lattice_pair(q.y, height);
        Some(BilinearTap {
            x0,
            y0,
            x1,
            y1,
            ax: q.x - x0 as f64,
            ay: q.y - y0 as f64,
        })
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        [
            (1.0 - self.ax) * (1.0 - self.ay),
            self.ax * (1.0 - self.ay),
            (1.0 - self.ax) * self.ay,
            self.ax * self.ay,
        ]
    }

    /// Flat indices of `(x0,y0), (x1,y0), (x0,y1), (x1,y1)` in a `width`-wide grid.
    #[inline]
    pub fn indices(&self, width: usize) -> [usize; 4] {
        [
            self.y0 * width + self.x0,
            self.y0 * width + self.x1,
            self.y1 * width + self.x0,
            self.y1 * width + self.x1,
        ]
    }

    /// Interpolated value of `f` over the four lattice taps.
    #[inline]
    pub fn interpolate(&self, v: [f64; 4]) -> f64 {
        let top = (1.0 - self.ax) * v[0] + self.ax * v[1];
        let bottom = (1.0 - self.ax) * v[2] + self.ax * v[3];
        (1.0 - self.ay) * top + self.ay * bottom
    }

    /// Partial derivatives of the interpolant with respect to `(x, y)`.
    #[inline]
    pub fn gradient(&self, v: [f64; 4]) -> Vector2<f64> {
        let dx = (1.0 - self.ay) * (v[1] - v[0]) + self.ay * (v[3] - v[2]);
        let dy = (1.0 - self.ax) * (v[2] - v[0]) + self.ax * (v[3] - v[1]);
        Vector2::new(dx, dy)
    }

    /// Distance in pixels from the sample point to the nearest cell edge.
    pub fn cell_margin(&self) -> f64 {
        let mx = if self.x0 == self.x1 { f64::INFINITY } else { self.ax.min(1.0 - self.ax) };
        let my = if self.y0 == self.y1 { f64::INFINITY } else { self.ay.min(1.0 - self.ay) };
        mx.min(my)
    }
}

#[inline]
fn lattice_pair(x: f64, n: usize) -> (usize, usize) {
    if n == 1 {
        return (0, 0);
    }
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x0 + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub in_bounds: bool,
}

/// Bilinear lookup of every channel of `img` at `q`; zeros plus a cleared
/// flag when `q` lies outside the image.
pub fn bilinear_sample(img: &Image, q: Vector2<f64>) -> Sample {
    match BilinearTap::new(q, img.width, img.height) {
        None => Sample {
            values: vec![0.0; img.channels],
            in_bounds: false,
        },
        Some(tap) => {
            let idx = tap.indices(img.width);
            let values = (0..img.channels)
                .map(|c| {
                    tap.interpolate(idx.map(|i| img.data[i * img.channels + c]))
                })
                .collect();
            Sample {
                values,
                in_bounds: true,
            }
        }
    }
}

/// Inverse warp of the source image into the target view.
pub fn warp_image(
    source: &Image,
    target_depth: &DepthField,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Result<(Image, Mask)> {
    check_shape("source image", source.shape(), k)?;
    check_shape("target depth", target_depth.shape(), k)?;
    let (h, w, ch) = (k.height, k.width, source.channels);
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut data = vec![0.0; w * ch];
            let mut valid = vec![false; w];
            for j in 0..w {
                let proj = project_point(
                    Vector2::new(j as f64, i as f64),
                    target_depth.at(i, j),
                    pose,
                    k,
                );
                if !proj.in_front {
                    continue;
                }
                let s = bilinear_sample(source, proj.coord);
                if s.in_bounds {
                    data[j * ch..(j + 1) * ch].copy_from_slice(&s.values);
                    valid[j] = true;
                }
            }
            (data, valid)
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * ch);
    let mut valid = Vec::with_capacity(h * w);
    for (d, v) in rows {
        data.extend(d);
        valid.extend(v);
    }
    Ok((
        Image {
            height: h,
            width: w,
            channels: ch,
            data,
        },
        Mask {
            height: h,
            width: w,
            data: valid,
        },
    ))
}

pub(crate) fn check_shape(what: &str, shape: (usize, usize), k: &Intrinsics) -> Result<()> {
    if shape != (k.height, k.width) {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {}x{}, intrinsics expect {}x{}",
            shape.0, shape.1, k.height, k.width
        )));
    }
    Ok(())
}

/// Normals estimated from depth by cross products of backprojected
/// neighbour differences: the diagonal pair `(tl - br) x (tr - bl)` and the
/// axis pair `(r - l) x (b - t)`, each normalised, averaged, and turned to
/// face the camera. Border pixels clamp their neighbours to the image.
pub fn normals_from_depth(depth: &DepthField, k: &Intrinsics) -> Result<NormalField> {
    check_shape("depth", depth.shape(), k)?;
    let (h, w) = (depth.height, depth.width);
    let point = |i: isize, j: isize| -> Vector3<f64> {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        k.ray(Vector2::new(jj as f64, ii as f64)) * depth.at(ii, jj)
    };
    let fallback = Vector3::new(0.0, 0.0, -1.0);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let diag = (point(i - 1, j - 1) - point(i + 1, j + 1))
                .cross(&(point(i - 1, j + 1) - point(i + 1, j - 1)));
            let axis = (point(i, j + 1) - point(i, j - 1)).cross(&(point(i + 1, j) - point(i - 1, j)));
            let ray = k.ray(Vector2::new(j as f64, i as f64));
            let mut acc = Vector3::zeros();
            for c in [diag, axis] {
                let norm = c.norm();
                if norm > 1e-300 && norm.is_finite() {
                    let mut u = c / norm;
                    if u.dot(&ray) > 0.0 {
                        u = -u;
                    }
                    acc += u;
                }
            }
            let norm = acc.norm();
            data.push(if norm > 1e-12 { acc / norm } else { fallback });
        }
    }
    Ok(NormalField {
        height: h,
        width: w,
        data,
    })
}
