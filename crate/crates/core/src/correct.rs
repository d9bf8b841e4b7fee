//! Background non-uniformity correction: grow the largest homogeneous
//! 26-connected region, fit a second-order polynomial to its intensities,
//! divide it out, repeat until the region stops growing.

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::scalar::{round_half_up, Real};
use crate::scene::{foreground_histogram, Scene};

pub const NUM_COEFFS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneityCriterion {
    /// Largest admitted |f(u) − f(v)| between adjacent region members.
    pub theta: f64,
}

impl HomogeneityCriterion {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta >= 0.0) {
            return Err(Error::InvalidArgument(format!("theta must be >= 0, got {theta}")));
        }
        Ok(HomogeneityCriterion { theta })
    }

    /// `fraction` of the foreground median intensity (default 5%).
    pub fn relative_to_median(scene: &Scene, fraction: f64) -> Result<Self> {
        let median = foreground_histogram(scene)?.percentile(50.0)? as f64;
        HomogeneityCriterion::new(fraction * median)
    }
}

/// Voxel indices in ascending scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub indices: Vec<usize>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Largest 26-connected set of foreground voxels whose adjacent members
/// differ by at most `theta`. Ties go to the component holding the earliest
/// voxel in scan order.
pub fn largest_homogeneous_region(scene: &Scene, crit: HomogeneityCriterion) -> Result<Region> {
    let [nx, ny, nz] = scene.dims();
    let data = scene.data();
    let mut sets = DisjointSet::new(data.len());
    // the 13 "forward" neighbours; the other 13 are covered symmetrically
    let mut offsets = Vec::with_capacity(13);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dz, dy, dx) > (0, 0, 0) {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = scene.index(x, y, z);
                let v = data[i];
                if v == 0 {
                    continue;
                }
                any = true;
                for &(dx, dy, dz) in &offsets {
                    let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if qx < 0 || qy < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                        continue;
                    }
                    let j = scene.index(qx as usize, qy as usize, qz as usize);
                    let w = data[j];
                    if w != 0 && (v as f64 - w as f64).abs() <= crit.theta {
                        sets.union(i as u32, j as u32);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    let mut best: Option<(u32, u32)> = None;
    for (i, &v) in data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let root = sets.find(i as u32);
        let size = sets.size[root as usize];
        // scan order visits the smallest seed of each component first
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((root, size));
        }
    }
    let (root, _) = best.expect("foreground is non-empty");
    let indices = (0..data.len())
        .filter(|&i| data[i] != 0 && sets.find(i as u32) == root)
        .collect();
    Ok(Region { indices })
}

/// Full quadratic in voxel coordinates, stored against the basis
/// `1, x̂, ŷ, ẑ, x̂², ŷ², ẑ², x̂ŷ, x̂ẑ, ŷẑ` with `x̂ = (x − center) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasModel<T> {
    pub center: [T; 3],
    pub scale: [T; 3],
    pub coefficients: [T; NUM_COEFFS],
}

#[inline]
fn basis<T: Real>(p: [T; 3]) -> [T; NUM_COEFFS] {
    let [x, y, z] = p;
    [T::one(), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
}

impl<T: Real> BiasModel<T> {
    fn normalized(&self, p: [T; 3]) -> [T; 3] {
        [
            (p[0] - self.center[0]) / self.scale[0],
            (p[1] - self.center[1]) / self.scale[1],
            (p[2] - self.center[2]) / self.scale[2],
        ]
    }

    pub fn eval(&self, p: [T; 3]) -> T {
        basis(self.normalized(p))
            .iter()
            .zip(self.coefficients.iter())
            .map(|(&b, &c)| b * c)
            .sum()
    }

    /// Coefficients of the same polynomial against the raw monomials
    /// `1, x, y, z, x², y², z², xy, xz, yz`.
    pub fn raw_coefficients(&self) -> [T; NUM_COEFFS] {
        let c = &self.coefficients;
        // x̂ = a·x + b
        let a: [T; 3] = [0, 1, 2].map(|i| T::one() / self.scale[i]);
        let b: [T; 3] = [0, 1, 2].map(|i| -self.center[i] / self.scale[i]);
        let two = T::of(2.0);
        let mut r = [T::zero(); NUM_COEFFS];
        r[0] = c[0];
        for i in 0..3 {
            // linear terms
            r[1 + i] += c[1 + i] * a[i];
            r[0] += c[1 + i] * b[i];
            // squares
            r[4 + i] += c[4 + i] * a[i] * a[i];
            r[1 + i] += c[4 + i] * two * a[i] * b[i];
            r[0] += c[4 + i] * b[i] * b[i];
        }
        // cross terms: (7: xy), (8: xz), (9: yz)
        for (k, (i, j)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
            let ck = c[7 + k];
            r[7 + k] += ck * a[i] * a[j];
            r[1 + i] += ck * a[i] * b[j];
            r[1 + j] += ck * b[i] * a[j];
            r[0] += ck * b[i] * b[j];
        }
        r
    }
}

/// Least-squares quadratic fit to the region intensities, rescaled to mean 1
/// over the region.
pub fn fit_bias<T: Real>(scene: &Scene, region: &Region) -> Result<BiasModel<T>> {
    if region.len() < NUM_COEFFS {
        return Err(Error::InvalidArgument(format!(
            "bias fit needs at least {NUM_COEFFS} voxels, region has {}",
            region.len()
        )));
    }
    let dims = scene.dims();
    let center = dims.map(|d| T::of((d as f64 - 1.0) / 2.0));
    let scale = dims.map(|d| T::of((d as f64 / 2.0).max(1.0)));
    let mut model = BiasModel {
        center,
        scale,
        coefficients: [T::zero(); NUM_COEFFS],
    };
    let mut ata = vec![T::zero(); NUM_COEFFS * NUM_COEFFS];
    let mut atb = vec![T::zero(); NUM_COEFFS];
    for &idx in &region.indices {
        let c = scene.coords(idx);
        let phi = basis(model.normalized(c.map(T::of_usize)));
        let f = T::of(scene.data()[idx] as f64);
        for i in 0..NUM_COEFFS {
            atb[i] += phi[i] * f;
            for j in i..NUM_COEFFS {
                ata[i * NUM_COEFFS + j] += phi[i] * phi[j];
            }
        }
    }
    for i in 0..NUM_COEFFS {
        for j in 0..i {
            ata[i * NUM_COEFFS + j] = ata[j * NUM_COEFFS + i];
        }
    }
    let tol = T::epsilon().sqrt() * T::of(1e-2);
    let sol = cholesky_solve(&ata, &atb, NUM_COEFFS, tol)
        .ok_or_else(|| Error::DegenerateFit("rank-deficient design over region".into()))?;
    model.coefficients.copy_from_slice(&sol);
    let mean = region
        .indices
        .iter()
        .map(|&i| model.eval(scene.coords(i).map(T::of_usize)))
        .sum::<T>()
        / T::of_usize(region.len());
    if !(mean > T::zero()) || !mean.is_finite() {
        return Err(Error::DegenerateFit(format!("fitted mean {mean} is not positive")));
    }
    model.coefficients.iter_mut().for_each(|c| *c /= mean);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionReport {
    pub iterations: usize,
    pub region_sizes: Vec<usize>,
}

pub fn correct_scene(scene: &Scene, crit: HomogeneityCriterion, max_iters: usize, growth_tol: f64) -> Result<Scene> {
    correct_scene_traced(scene, crit, max_iters, growth_tol).map(|(s, _)| s)
}

pub fn correct_scene_traced(
    scene: &Scene,
    crit: HomogeneityCriterion,
    max_iters: usize,
    growth_tol: f64,
) -> Result<(Scene, CorrectionReport)> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if !(growth_tol >= 0.0) {
        return Err(Error::InvalidArgument("growth_tol must be >= 0".into()));
    }
    let ceiling = scene.intensity_ceiling as f64;
    let mut field = vec![1.0f64; scene.len()];
    let mut current = scene.clone();
    let mut report = CorrectionReport {
        iterations: 0,
        region_sizes: Vec::new(),
    };
    let mut previous: Option<usize> = None;
    while report.iterations < max_iters {
        let region = largest_homogeneous_region(&current, crit)?;
        report.region_sizes.push(region.len());
        if let Some(prev) = previous {
            if region.len() as f64 <= (1.0 + growth_tol) * prev as f64 {
                break;
            }
        }
        let model = fit_bias::<f64>(&current, &region)?;
        for (idx, &v) in scene.data().iter().enumerate() {
            if v == 0 {
                continue;
            }
            let b = model.eval(scene.coords(idx).map(|c| c as f64));
            if !(b > 0.0) {
                return Err(Error::DegenerateFit(format!(
                    "fitted field is non-positive at voxel {:?}",
                    scene.coords(idx)
                )));
            }
            field[idx] *= b;
        }
        let data = scene
            .data()
            .iter()
            .zip(&field)
            .map(|(&v, &b)| {
                if v == 0 {
                    0
                } else {
                    round_half_up(v as f64 / b).clamp(1.0, ceiling) as u16
                }
            })
            .collect();
        current = scene.with_data(data);
        previous = Some(region.len());
        report.iterations += 1;
    }
    Ok((current, report))
}
