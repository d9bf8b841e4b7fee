//! Twelve-parameter affine transforms about the scene center, resampling,
//! the 81-cell known-deformation grid and the corner RMSE error measure.
//!
//! Composition order (voxel coordinates to voxel coordinates):
//! `M = Translate(t) · Translate(c) · Rz · Ry · Rx · Shear · Scale · Translate(−c)`
//! so `M·x = L·(x − c) + c + t` with `L = R·H·S`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Volume;
use crate::linalg::{det3, mul3, Mat4};
use crate::scalar::{round_half_up, Real};
use crate::scene::{BoundingBox, Scene};

pub const NUM_PARAMS: usize = 12;

/// Translation in voxels, rotations in degrees, unitless scales and shears.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams<T> {
    pub tx: T,
    pub ty: T,
    pub tz: T,
    pub rx: T,
    pub ry: T,
    pub rz: T,
    pub sx: T,
    pub sy: T,
    pub sz: T,
    pub hxy: T,
    pub hxz: T,
    pub hyz: T,
}

impl<T: Real> Default for AffineParams<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> fmt::Display for AffineParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            "tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz",
        ];
        for (i, (n, v)) in names.iter().zip(self.to_array()).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{n}={v}")?;
        }
        Ok(())
    }
}

fn rot_x<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

fn rot_y<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

fn rot_z<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

// derivatives with respect to the angle in degrees
fn drot_x<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = T::PI() / T::of(180.0);
    let z = T::zero();
    [[z, z, z], [z, -s * k, -c * k], [z, c * k, -s * k]]
}

fn drot_y<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = T::PI() / T::of(180.0);
    let z = T::zero();
    [[-s * k, z, c * k], [z, z, z], [-c * k, z, -s * k]]
}

fn drot_z<T: Real>(deg: T) -> [[T; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = T::PI() / T::of(180.0);
    let z = T::zero();
    [[-s * k, -c * k, z], [c * k, -s * k, z], [z, z, z]]
}

fn diag<T: Real>(d: [T; 3]) -> [[T; 3]; 3] {
    let z = T::zero();
    [[d[0], z, z], [z, d[1], z], [z, z, d[2]]]
}

impl<T: Real> AffineParams<T> {
    pub fn identity() -> Self {
        let (z, o) = (T::zero(), T::one());
        AffineParams {
            tx: z,
            ty: z,
            tz: z,
            rx: z,
            ry: z,
            rz: z,
            sx: o,
            sy: o,
            sz: o,
            hxy: z,
            hxz: z,
            hyz: z,
        }
    }

    pub fn translation(t: [T; 3]) -> Self {
        AffineParams {
            tx: t[0],
            ty: t[1],
            tz: t[2],
            ..Self::identity()
        }
    }

    pub fn to_array(&self) -> [T; NUM_PARAMS] {
        [
            self.tx, self.ty, self.tz, self.rx, self.ry, self.rz, self.sx, self.sy, self.sz, self.hxy, self.hxz,
            self.hyz,
        ]
    }

    pub fn from_array(p: [T; NUM_PARAMS]) -> Self {
        AffineParams {
            tx: p[0],
            ty: p[1],
            tz: p[2],
            rx: p[3],
            ry: p[4],
            rz: p[5],
            sx: p[6],
            sy: p[7],
            sz: p[8],
            hxy: p[9],
            hxz: p[10],
            hyz: p[11],
        }
    }

    pub fn cast<U: Real>(&self) -> AffineParams<U> {
        AffineParams::from_array(self.to_array().map(|v| U::of(v.as_f64())))
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.sx > T::zero() && self.sy > T::zero() && self.sz > T::zero()
    }

    fn rotation(&self) -> [[T; 3]; 3] {
        mul3(&mul3(&rot_z(self.rz), &rot_y(self.ry)), &rot_x(self.rx))
    }

    fn shear(&self) -> [[T; 3]; 3] {
        let (z, o) = (T::zero(), T::one());
        [[o, self.hxy, self.hxz], [z, o, self.hyz], [z, z, o]]
    }

    fn scale(&self) -> [[T; 3]; 3] {
        diag([self.sx, self.sy, self.sz])
    }

    /// The linear part `R·H·S`.
    pub fn linear(&self) -> [[T; 3]; 3] {
        mul3(&mul3(&self.rotation(), &self.shear()), &self.scale())
    }

    fn assemble(linear: [[T; 3]; 3], t: [T; 3], center: [T; 3]) -> Mat4<T> {
        let mut m = Mat4::from_linear(linear);
        for i in 0..3 {
            let lc = linear[i][0] * center[0] + linear[i][1] * center[1] + linear[i][2] * center[2];
            m.m[i][3] = t[i] + center[i] - lc;
        }
        m
    }

    pub fn matrix(&self, center: [T; 3]) -> Mat4<T> {
        Self::assemble(self.linear(), [self.tx, self.ty, self.tz], center)
    }

    /// ∂M/∂p for each of the twelve parameters, in `to_array` order.
    pub fn matrix_derivatives(&self, center: [T; 3]) -> [Mat4<T>; NUM_PARAMS] {
        let (rx, ry, rz) = (rot_x(self.rx), rot_y(self.ry), rot_z(self.rz));
        let (h, s) = (self.shear(), self.scale());
        let r = self.rotation();
        let hs = mul3(&h, &s);
        let rh = mul3(&r, &h);
        let z = T::zero();
        let mut out = [Mat4::zero(); NUM_PARAMS];
        for (k, m) in out.iter_mut().enumerate().take(3) {
            m.m[k][3] = T::one();
        }
        let dl: [[[T; 3]; 3]; 9] = [
            mul3(&mul3(&mul3(&rz, &ry), &drot_x(self.rx)), &hs),
            mul3(&mul3(&mul3(&rz, &drot_y(self.ry)), &rx), &hs),
            mul3(&mul3(&mul3(&drot_z(self.rz), &ry), &rx), &hs),
            mul3(&rh, &diag([T::one(), z, z])),
            mul3(&rh, &diag([z, T::one(), z])),
            mul3(&rh, &diag([z, z, T::one()])),
            mul3(&r, &mul3(&[[z, T::one(), z], [z, z, z], [z, z, z]], &s)),
            mul3(&r, &mul3(&[[z, z, T::one()], [z, z, z], [z, z, z]], &s)),
            mul3(&r, &mul3(&[[z, z, z], [z, z, T::one()], [z, z, z]], &s)),
        ];
        for (k, d) in dl.into_iter().enumerate() {
            let mut m = Self::assemble(d, [z; 3], center);
            // assemble adds the center back; a derivative has no such term
            for i in 0..3 {
                m.m[i][3] -= center[i];
            }
            m.m[3][3] = z;
            out[3 + k] = m;
        }
        out
    }

    /// Recovers parameters from an affine matrix with positive determinant.
    pub fn from_matrix(m: &Mat4<T>, center: [T; 3]) -> Result<Self> {
        let l = m.linear();
        if !(det3(&l) > T::zero()) {
            return Err(Error::SingularMatrix);
        }
        // Gram-Schmidt on the columns: L = Q·U, U upper triangular, diag > 0
        let col = |j: usize| [l[0][j], l[1][j], l[2][j]];
        let dot = |a: [T; 3], b: [T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let mut q = [[T::zero(); 3]; 3];
        let mut u = [[T::zero(); 3]; 3];
        for j in 0..3 {
            let mut v = col(j);
            for (i, qi) in q.iter().enumerate().take(j) {
                let r = dot(*qi, col(j));
                u[i][j] = r;
                for a in 0..3 {
                    v[a] -= r * qi[a];
                }
            }
            let n = dot(v, v).sqrt();
            if !(n > T::zero()) {
                return Err(Error::SingularMatrix);
            }
            u[j][j] = n;
            q[j] = v.map(|x| x / n);
        }
        // q holds columns; rot[i][j] = q[j][i]
        let rot = [
            [q[0][0], q[1][0], q[2][0]],
            [q[0][1], q[1][1], q[2][1]],
            [q[0][2], q[1][2], q[2][2]],
        ];
        let deg = T::of(180.0) / T::PI();
        let ry = (-rot[2][0]).max(-T::one()).min(T::one()).asin();
        let rx = rot[2][1].atan2(rot[2][2]);
        let rz = rot[1][0].atan2(rot[0][0]);
        let (sx, sy, sz) = (u[0][0], u[1][1], u[2][2]);
        let linear = l;
        let tr = m.translation_part();
        let mut t = [T::zero(); 3];
        for i in 0..3 {
            let lc = linear[i][0] * center[0] + linear[i][1] * center[1] + linear[i][2] * center[2];
            t[i] = tr[i] - center[i] + lc;
        }
        Ok(AffineParams {
            tx: t[0],
            ty: t[1],
            tz: t[2],
            rx: rx * deg,
            ry: ry * deg,
            rz: rz * deg,
            sx,
            sy,
            sz,
            hxy: u[0][1] / sy,
            hxz: u[0][2] / sz,
            hyz: u[1][2] / sz,
        })
    }

    pub fn inverse(&self, center: [T; 3]) -> Result<Self> {
        let inv = self.matrix(center).inverse_affine().ok_or(Error::SingularMatrix)?;
        Self::from_matrix(&inv, center)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self, center: [T; 3]) -> Result<Self> {
        Self::from_matrix(&(self.matrix(center) * other.matrix(center)), center)
    }
}

/// Resamples `scene` under `params` about its center: output voxel ν takes
/// the trilinear value of the source at `M⁻¹·ν`. A voxel is foreground iff
/// its stencil puts weight on source foreground, and then holds at least 1,
/// so the output mask depends on geometry only.
pub fn resample(scene: &Scene, params: &AffineParams<f64>) -> Result<Scene> {
    let inv = params
        .matrix(scene.center())
        .inverse_affine()
        .ok_or(Error::SingularMatrix)?;
    let src = Volume::<f64>::from_scene(scene);
    let mask = Volume::<f64> {
        dims: scene.dims(),
        data: scene.data().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect(),
    };
    let [nx, ny, _] = scene.dims();
    let ceiling = scene.intensity_ceiling as f64;
    let data: Vec<u16> = (0..scene.len())
        .into_par_iter()
        .map(|idx| {
            let p = inv.apply([(idx % nx) as f64, ((idx / nx) % ny) as f64, (idx / (nx * ny)) as f64]);
            if mask.sample(p) <= COVERAGE_EPS {
                return 0;
            }
            round_half_up(src.sample(p)).clamp(1.0, ceiling) as u16
        })
        .collect();
    Ok(scene.with_data(data))
}

// stencil weight on foreground below which a voxel counts as empty
const COVERAGE_EPS: f64 = 1e-9;

/// Root-mean-square distance (mm) between where two transforms send the
/// eight corners of `bbox`.
pub fn rmse_corners<T: Real>(truth: &Mat4<T>, recovered: &Mat4<T>, bbox: &BoundingBox, voxel_size: [f64; 3]) -> T {
    let vs = voxel_size.map(T::of);
    let mut acc = T::zero();
    for c in bbox.corners() {
        let p = c.map(T::of);
        let a = truth.apply(p);
        let b = recovered.apply(p);
        for k in 0..3 {
            let d = (a[k] - b[k]) * vs[k];
            acc += d * d;
        }
    }
    (acc / T::of(8.0)).sqrt()
}

pub fn rmse_corners_params<T: Real>(
    truth: &AffineParams<T>,
    recovered: &AffineParams<T>,
    center: [T; 3],
    bbox: &BoundingBox,
    voxel_size: [f64; 3],
) -> T {
    rmse_corners(&truth.matrix(center), &recovered.matrix(center), bbox, voxel_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformLevel {
    Zero,
    Medium,
    Large,
}

impl DeformLevel {
    pub const ALL: [DeformLevel; 3] = [DeformLevel::Zero, DeformLevel::Medium, DeformLevel::Large];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformGroup {
    Small,
    Medium,
    Large,
}

impl DeformGroup {
    pub const ALL: [DeformGroup; 3] = [DeformGroup::Small, DeformGroup::Medium, DeformGroup::Large];

    pub fn name(self) -> &'static str {
        match self {
            DeformGroup::Small => "small",
            DeformGroup::Medium => "medium",
            DeformGroup::Large => "large",
        }
    }
}

pub const TRANSLATION_VOXELS: [f64; 3] = [0.0, 5.0, 20.0];
pub const ROTATION_DEGREES: [f64; 3] = [0.0, 2.0, 6.0];
pub const SCALE_FACTORS: [f64; 3] = [1.0, 1.05, 1.15];
pub const SHEAR_AMOUNTS: [f64; 3] = [0.0, 0.01, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationCell {
    /// `27·rotation + 9·translation + 3·scale + shear`, levels indexed 0..3.
    pub id: usize,
    pub rotation: DeformLevel,
    pub translation: DeformLevel,
    pub scale: DeformLevel,
    pub shear: DeformLevel,
    pub params: AffineParams<f64>,
    pub group: DeformGroup,
}

impl DeformationCell {
    pub fn new(rotation: DeformLevel, translation: DeformLevel, scale: DeformLevel, shear: DeformLevel) -> Self {
        let (r, t, s, h) = (rotation.index(), translation.index(), scale.index(), shear.index());
        let params = AffineParams {
            tx: TRANSLATION_VOXELS[t],
            ty: TRANSLATION_VOXELS[t],
            tz: TRANSLATION_VOXELS[t],
            rx: ROTATION_DEGREES[r],
            ry: ROTATION_DEGREES[r],
            rz: ROTATION_DEGREES[r],
            sx: SCALE_FACTORS[s],
            sy: SCALE_FACTORS[s],
            sz: SCALE_FACTORS[s],
            hxy: SHEAR_AMOUNTS[h],
            hxz: SHEAR_AMOUNTS[h],
            hyz: SHEAR_AMOUNTS[h],
        };
        let worst = rotation.max(translation).max(scale).max(shear);
        let group = match worst {
            DeformLevel::Zero => DeformGroup::Small,
            DeformLevel::Medium => DeformGroup::Medium,
            DeformLevel::Large => DeformGroup::Large,
        };
        DeformationCell {
            id: 27 * r + 9 * t + 3 * s + h,
            rotation,
            translation,
            scale,
            shear,
            params,
            group,
        }
    }

    pub fn by_id(id: usize) -> Option<Self> {
        (id < 81).then(|| {
            let l = DeformLevel::ALL;
            DeformationCell::new(l[id / 27], l[(id / 9) % 3], l[(id / 3) % 3], l[id % 3])
        })
    }

    /// Stable name such as `r1t2s0h1`.
    pub fn name(&self) -> String {
        format!(
            "r{}t{}s{}h{}",
            self.rotation.index(),
            self.translation.index(),
            self.scale.index(),
            self.shear.index()
        )
    }

    pub fn parse_name(name: &str) -> Option<Self> {
        let b = name.as_bytes();
        if b.len() != 8 || b[0] != b'r' || b[2] != b't' || b[4] != b's' || b[6] != b'h' {
            return None;
        }
        let d = |c: u8| (b'0'..=b'2').contains(&c).then(|| (c - b'0') as usize);
        let id = 27 * d(b[1])? + 9 * d(b[3])? + 3 * d(b[5])? + d(b[7])?;
        Self::by_id(id)
    }
}

/// All 3⁴ = 81 cells.
pub fn deformation_grid() -> Vec<DeformationCell> {
    (0..81).filter_map(DeformationCell::by_id).collect()
}

/// The 27-cell desk subset: scale and shear share one level.
pub fn desk_grid() -> Vec<DeformationCell> {
    deformation_grid().into_iter().filter(|c| c.scale == c.shear).collect()
}
