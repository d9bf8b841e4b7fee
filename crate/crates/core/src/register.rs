//! Affine registration by minimizing the sum of squared intensity
//! differences, coarse to fine, with Levenberg-Marquardt steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Volume;
use crate::linalg::{cholesky_solve, Mat4};
use crate::scalar::Real;
use crate::scene::Scene;
use crate::transform::{AffineParams, NUM_PARAMS};

const DAMPING_CAP: f64 = 1e8;
const DAMPING_FLOOR: f64 = 1e-12;
const MIN_PYRAMID_EDGE: usize = 8;

/// Optional translation pre-alignment applied on top of `initial_params`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prealign {
    #[default]
    None,
    /// Shift so the source foreground centroid lands on the target's.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig<T> {
    pub pyramid_levels: usize,
    pub max_iters: usize,
    /// Relative SSD improvement below which a level stops.
    pub convergence_tol: T,
    pub damping: T,
    pub initial_params: AffineParams<T>,
    #[serde(default)]
    pub prealign: Prealign,
}

impl<T: Real> Default for RegistrationConfig<T> {
    fn default() -> Self {
        RegistrationConfig {
            pyramid_levels: 3,
            max_iters: 50,
            convergence_tol: T::of(1e-6),
            damping: T::of(1e-3),
            initial_params: AffineParams::identity(),
            prealign: Prealign::None,
        }
    }
}

impl<T: Real> RegistrationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::InvalidArgument("pyramid_levels must be at least 1".into()));
        }
        if !(self.convergence_tol > T::zero()) || !(self.damping > T::zero()) {
            return Err(Error::InvalidArgument("tolerance and damping must be positive".into()));
        }
        if !self.initial_params.is_valid() {
            return Err(Error::InvalidArgument("initial parameters are not a valid affine map".into()));
        }
        Ok(())
    }
}

/// One accepted (or initial) SSD value; level 0 is full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry<T> {
    pub level: usize,
    pub iter: usize,
    pub ssd: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult<T> {
    pub params: AffineParams<T>,
    pub final_ssd: T,
    pub iterations_used: usize,
    pub converged: bool,
    pub per_level_trace: Vec<TraceEntry<T>>,
}

/// SSD over `mask` between `target` and `source` pulled back through
/// `params` (about the target center). Samples falling outside the source
/// count as intensity 0.
pub fn ssd<T: Real>(source: &Scene, target: &Scene, params: &AffineParams<T>, mask: &[bool]) -> Result<T> {
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch(source.dims(), target.dims()));
    }
    if mask.len() != target.len() {
        return Err(Error::SizeMismatch {
            expected: target.len() as u64,
            actual: mask.len() as u64,
        });
    }
    let center = target.center().map(T::of);
    let level = Level::new(
        Volume::from_scene(source),
        &Volume::from_scene(target),
        center,
        Some(mask),
    );
    let inv = params
        .matrix(center)
        .inverse_affine()
        .ok_or(Error::SingularMatrix)?;
    Ok(level.cost(&inv))
}

/// Resolution level: source volume plus the masked target samples.
struct Level<T> {
    source: Volume<T>,
    points: Vec<[T; 3]>,
    values: Vec<T>,
    center: [T; 3],
}

impl<T: Real> Level<T> {
    fn new(source: Volume<T>, target: &Volume<T>, center: [T; 3], mask: Option<&[bool]>) -> Self {
        let [nx, ny, _] = target.dims;
        let mut points = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in target.data.iter().enumerate() {
            let keep = match mask {
                Some(m) => m[i],
                None => v > T::zero(),
            };
            if keep {
                points.push([T::of_usize(i % nx), T::of_usize((i / nx) % ny), T::of_usize(i / (nx * ny))]);
                values.push(v);
            }
        }
        Level {
            source,
            points,
            values,
            center,
        }
    }

    fn cost(&self, inv: &Mat4<T>) -> T {
        let mut acc = T::zero();
        for (p, &t) in self.points.iter().zip(&self.values) {
            let r = self.source.sample(inv.apply(*p)) - t;
            acc += r * r;
        }
        acc
    }

    /// Gauss-Newton normal equations `JᵀJ` (packed row-major, full) and `Jᵀr`.
    fn normal_equations(&self, params: &AffineParams<T>) -> Option<(Vec<T>, Vec<T>)> {
        let m = params.matrix(self.center);
        let inv = m.inverse_affine()?;
        let dm = params.matrix_derivatives(self.center);
        let il = inv.linear();
        let mut h = vec![T::zero(); NUM_PARAMS * NUM_PARAMS];
        let mut g = vec![T::zero(); NUM_PARAMS];
        let mut j = [T::zero(); NUM_PARAMS];
        for (p, &t) in self.points.iter().zip(&self.values) {
            let q = inv.apply(*p);
            let (v, grad) = self.source.sample_with_gradient(q);
            let r = v - t;
            // ∂q/∂p_k = −M⁻¹ (∂M/∂p_k) q, so ∂r/∂p_k = w · (∂M/∂p_k) q with w = −(M⁻¹)ᵀ∇
            let mut w = [T::zero(); 3];
            for (a, wa) in w.iter_mut().enumerate() {
                *wa = -(il[0][a] * grad[0] + il[1][a] * grad[1] + il[2][a] * grad[2]);
            }
            if w.iter().all(|x| *x == T::zero()) && r == T::zero() {
                continue;
            }
            for (k, d) in dm.iter().enumerate() {
                let mut acc = T::zero();
                for (a, wa) in w.iter().enumerate() {
                    let row = &d.m[a];
                    acc += *wa * (row[0] * q[0] + row[1] * q[1] + row[2] * q[2] + row[3]);
                }
                j[k] = acc;
            }
            for a in 0..NUM_PARAMS {
                g[a] += j[a] * r;
                let ja = j[a];
                if ja == T::zero() {
                    continue;
                }
                let row = &mut h[a * NUM_PARAMS..(a + 1) * NUM_PARAMS];
                for b in a..NUM_PARAMS {
                    row[b] += ja * j[b];
                }
            }
        }
        for a in 0..NUM_PARAMS {
            for b in 0..a {
                h[a * NUM_PARAMS + b] = h[b * NUM_PARAMS + a];
            }
        }
        Some((h, g))
    }
}

fn cost_at<T: Real>(level: &Level<T>, params: &AffineParams<T>) -> Option<T> {
    if !params.is_valid() {
        return None;
    }
    let inv = params.matrix(level.center).inverse_affine()?;
    let c = level.cost(&inv);
    c.is_finite().then_some(c)
}

fn foreground_centroid(scene: &Scene) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in scene.data().iter().enumerate() {
        if v > 0 {
            let c = scene.coords(i);
            for a in 0..3 {
                acc[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    acc.map(|v| v / n.max(1) as f64)
}

fn prealigned<T: Real>(source: &Scene, target: &Scene, config: &RegistrationConfig<T>) -> AffineParams<T> {
    let mut p = config.initial_params;
    if config.prealign == Prealign::Centroid {
        let center = target.center().map(T::of);
        let moved = p.matrix(center).apply(foreground_centroid(source).map(T::of));
        let goal = foreground_centroid(target).map(T::of);
        p.tx += goal[0] - moved[0];
        p.ty += goal[1] - moved[1];
        p.tz += goal[2] - moved[2];
    }
    p
}

fn scale_translation<T: Real>(p: &AffineParams<T>, factor: T) -> AffineParams<T> {
    AffineParams {
        tx: p.tx * factor,
        ty: p.ty * factor,
        tz: p.tz * factor,
        ..*p
    }
}

struct LevelOutcome<T> {
    params: AffineParams<T>,
    ssd: T,
    iterations: usize,
    converged: bool,
}

/// Parameter subsets optimized in turn at the coarsest level: translation,
/// then rigid, then the full affine. Freeing everything at once on a 16³
/// grid lets rotation and shear soak up a pure shift.
const COARSE_STAGES: [&[usize]; 3] = [&[0, 1, 2], &[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]];
const ALL_PARAMS: &[usize] = COARSE_STAGES[2];

/// Levenberg-Marquardt on the parameters listed in `active`; the rest stay
/// fixed. `first_iter` numbers the trace entries when a level runs in stages.
fn optimize_level<T: Real>(
    level: &Level<T>,
    index: usize,
    start: AffineParams<T>,
    active: &[usize],
    first_iter: usize,
    config: &RegistrationConfig<T>,
    trace: &mut Vec<TraceEntry<T>>,
) -> Result<LevelOutcome<T>> {
    let mut params = start;
    let mut current = cost_at(level, &params).ok_or(Error::Numerical(format!(
        "non-finite SSD at the start of pyramid level {index}"
    )))?;
    if first_iter == 0 {
        trace.push(TraceEntry {
            level: index,
            iter: 0,
            ssd: current,
        });
    }
    let n = active.len();
    let mut lambda = config.damping;
    let cap = T::of(DAMPING_CAP);
    let mut iterations = 0;
    let mut converged = current == T::zero();
    while !converged && iterations < config.max_iters {
        iterations += 1;
        let (full_h, full_g) = level
            .normal_equations(&params)
            .ok_or(Error::Numerical("singular transform during optimization".into()))?;
        if full_h.iter().chain(&full_g).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at pyramid level {index}")));
        }
        let mut h = vec![T::zero(); n * n];
        for (a, &ka) in active.iter().enumerate() {
            for (b, &kb) in active.iter().enumerate() {
                h[a * n + b] = full_h[ka * NUM_PARAMS + kb];
            }
        }
        let g: Vec<T> = active.iter().map(|&k| full_g[k]).collect();
        let diag_max = (0..n).map(|k| h[k * n + k]).fold(T::zero(), |a, b| a.max(b));
        if diag_max == T::zero() {
            converged = true;
            break;
        }
        let floor = diag_max * T::of(1e-12);
        let mut accepted = false;
        while lambda <= cap {
            let mut a = h.clone();
            for k in 0..n {
                a[k * n + k] += lambda * h[k * n + k].max(floor);
            }
            let rhs: Vec<T> = g.iter().map(|v| -*v).collect();
            let step = cholesky_solve(&a, &rhs, n, T::of(1e-14));
            let candidate = step.map(|d| {
                let mut p = params.to_array();
                for (&k, dk) in active.iter().zip(d) {
                    p[k] += dk;
                }
                AffineParams::from_array(p)
            });
            match candidate.and_then(|c| cost_at(level, &c).map(|s| (c, s))) {
                Some((c, s)) if s < current => {
                    let rel = (current - s) / current;
                    params = c;
                    current = s;
                    lambda = (lambda / T::of(10.0)).max(T::of(DAMPING_FLOOR));
                    trace.push(TraceEntry {
                        level: index,
                        iter: first_iter + iterations,
                        ssd: current,
                    });
                    accepted = true;
                    if rel < config.convergence_tol || current == T::zero() {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= T::of(10.0),
            }
        }
        if !accepted {
            // no damping level gives descent: a local minimum at this resolution
            converged = true;
        }
    }
    Ok(LevelOutcome {
        params,
        ssd: current,
        iterations,
        converged,
    })
}

/// Finds the transform `M` with `target(ν) ≈ source(M⁻¹·ν)` over the
/// target foreground.
pub fn register<T: Real>(
    source: &Scene,
    target: &Scene,
    config: &RegistrationConfig<T>,
) -> Result<RegistrationResult<T>> {
    config.validate()?;
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch(source.dims(), target.dims()));
    }
    if source.foreground_count() == 0 || target.foreground_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut sources = vec![Volume::<T>::from_scene(source)];
    let mut targets = vec![Volume::<T>::from_scene(target)];
    let mut centers = vec![target.center().map(T::of)];
    while sources.len() < config.pyramid_levels {
        let last = &targets[targets.len() - 1];
        if last.dims.iter().any(|&d| d / 2 < MIN_PYRAMID_EDGE) {
            break;
        }
        let s = sources[sources.len() - 1].downsample();
        let t = last.downsample();
        let c = centers[centers.len() - 1].map(|v| (v - T::of(0.5)) / T::of(2.0));
        sources.push(s);
        targets.push(t);
        centers.push(c);
    }
    let levels = sources.len();
    let two = T::of(2.0);
    let start = prealigned(source, target, config);
    let mut params = scale_translation(&start, T::one() / two.powi(levels as i32 - 1));
    let mut trace = Vec::new();
    let mut iterations_used = 0;
    let mut outcome = None;
    // translation-only estimate from the coarsest level, kept as a second
    // starting candidate in case the coarse affine fit wandered off
    let mut fallback: Option<AffineParams<T>> = None;
    for index in (0..levels).rev() {
        let level = Level::new(sources[index].clone(), &targets[index], centers[index], None);
        if level.points.is_empty() {
            if index > 0 {
                params = scale_translation(&params, two);
                fallback = fallback.map(|f| scale_translation(&f, two));
            }
            continue;
        }
        if let Some(f) = fallback {
            if let (Some(a), Some(b)) = (cost_at(&level, &params), cost_at(&level, &f)) {
                if b < a {
                    params = f;
                }
            }
        }
        let stages: &[&[usize]] = if index == levels - 1 && levels > 1 {
            &COARSE_STAGES
        } else {
            &[ALL_PARAMS]
        };
        let mut level_iters = 0;
        let mut out = None;
        for (k, active) in stages.iter().enumerate() {
            let o = optimize_level(&level, index, params, active, level_iters, config, &mut trace)?;
            level_iters += o.iterations;
            params = o.params;
            if k == 0 && stages.len() > 1 {
                fallback = Some(params);
            }
            out = Some(o);
        }
        let out = out.expect("at least one stage");
        iterations_used += level_iters;
        params = out.params;
        if index > 0 {
            params = scale_translation(&params, two);
            fallback = fallback.map(|f| scale_translation(&f, two));
        }
        outcome = Some(out);
    }
    let out = outcome.ok_or(Error::EmptyForeground)?;
    Ok(RegistrationResult {
        params: out.params,
        final_ssd: out.ssd,
        iterations_used,
        converged: out.converged,
        per_level_trace: trace,
    })
}
