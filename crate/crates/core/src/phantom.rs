//! Deterministic brain-like phantoms: nested ellipsoidal tissue classes with
//! protocol-specific means, a smooth quadratic multiplicative bias field and
//! i.i.d. Gaussian noise. The T2 and PD scenes of one pair share the label
//! map voxel for voxel.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::round_half_up;
use crate::scene::{Scene, DEFAULT_CEILING};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueClass {
    pub label: String,
    pub mean_t2: f64,
    pub mean_pd: f64,
    /// Ellipsoid center as a fraction of each dimension (0.5 is the middle).
    pub center: [f64; 3],
    /// Semi-axes as a fraction of each dimension.
    pub radii: [f64; 3],
}

impl TissueClass {
    fn contains(&self, p: [f64; 3], dims: [usize; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let n = dims[a] as f64;
            let c = self.center[a] * (n - 1.0);
            let r = self.radii[a] * n;
            let d = (p[a] - c) / r;
            acc += d * d;
        }
        acc <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Painted in order; later classes overwrite earlier ones.
    pub tissues: Vec<TissueClass>,
    pub noise_sigma: f64,
    /// Peak-to-peak multiplicative bias over the foreground: max/min = 1 + amplitude.
    pub bias_amplitude: f64,
    pub seed: u64,
    #[serde(default = "default_ceiling")]
    pub intensity_ceiling: u16,
}

fn default_ceiling() -> u16 {
    DEFAULT_CEILING
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    T2,
    Pd,
}

impl Protocol {
    pub fn tag(self) -> &'static str {
        match self {
            Protocol::T2 => "T2",
            Protocol::Pd => "PD",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Protocol::T2 => 0,
            Protocol::Pd => 1,
        }
    }
}

impl PhantomSpec {
    /// Scalp/skull shell, grey matter, white matter, ventricular CSF and two
    /// small bright lesions.
    pub fn brain(dims: [usize; 3], seed: u64) -> Self {
        let t = |label: &str, t2: f64, pd: f64, center: [f64; 3], radii: [f64; 3]| TissueClass {
            label: label.to_string(),
            mean_t2: t2,
            mean_pd: pd,
            center,
            radii,
        };
        PhantomSpec {
            dims,
            voxel_size: [1.0; 3],
            tissues: vec![
                t("skull", 350.0, 600.0, [0.5; 3], [0.30, 0.33, 0.28]),
                t("gm", 700.0, 900.0, [0.5; 3], [0.25, 0.28, 0.23]),
                t("wm", 500.0, 750.0, [0.5; 3], [0.18, 0.21, 0.16]),
                t("csf", 1300.0, 1000.0, [0.5, 0.5, 0.52], [0.06, 0.10, 0.05]),
                t("lesion", 1100.0, 1150.0, [0.40, 0.62, 0.55], [0.035, 0.035, 0.035]),
                t("lesion", 1100.0, 1150.0, [0.62, 0.42, 0.45], [0.03, 0.03, 0.03]),
            ],
            noise_sigma: 12.0,
            bias_amplitude: 0.1,
            seed,
            intensity_ceiling: DEFAULT_CEILING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument("phantom dims must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.bias_amplitude) {
            return Err(Error::InvalidArgument(format!(
                "bias amplitude {} outside [0, 0.5]",
                self.bias_amplitude
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
        }
        if self.tissues.is_empty() {
            return Err(Error::InvalidArgument("phantom needs at least one tissue class".into()));
        }
        for t in &self.tissues {
            if t.radii.iter().any(|&r| !(r > 0.0)) || !(t.mean_t2 > 0.0) || !(t.mean_pd > 0.0) {
                return Err(Error::InvalidArgument(format!("invalid tissue class {:?}", t.label)));
            }
        }
        for (name, means) in [
            ("T2", self.distinct_means(|t| t.mean_t2)),
            ("PD", self.distinct_means(|t| t.mean_pd)),
        ] {
            if !means {
                return Err(Error::InvalidArgument(format!(
                    "{name} tissue means are not strictly ordered"
                )));
            }
        }
        Ok(())
    }

    // classes sharing a label (several lesions) may share a mean
    fn distinct_means(&self, f: impl Fn(&TissueClass) -> f64) -> bool {
        let mut seen: Vec<(&str, f64)> = Vec::new();
        for t in &self.tissues {
            let m = f(t);
            for &(label, other) in &seen {
                if label != t.label && m == other {
                    return false;
                }
                if label == t.label && m != other {
                    return false;
                }
            }
            seen.push((&t.label, m));
        }
        true
    }

    /// Per-voxel class index: 0 is background, `k + 1` is `tissues[k]`.
    pub fn label_map(&self) -> Vec<u8> {
        let [nx, ny, nz] = self.dims;
        let mut labels = vec![0u8; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let idx = x + nx * (y + ny * z);
                    for (k, t) in self.tissues.iter().enumerate() {
                        if t.contains(p, self.dims) {
                            labels[idx] = (k + 1) as u8;
                        }
                    }
                }
            }
        }
        labels
    }

    /// Multiplicative bias per voxel (1 on background), normalized to mean 1
    /// over the foreground with max/min over the foreground = 1 + amplitude.
    pub fn bias_field(&self, labels: &[u8]) -> Vec<f64> {
        let n = labels.len();
        if self.bias_amplitude == 0.0 {
            return vec![1.0; n];
        }
        let poly = BiasShape::from_seed(self.seed);
        let [nx, ny, _] = self.dims;
        let half = self.dims.map(|d| (d as f64 / 2.0).max(0.5));
        let center = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let raw: Vec<f64> = (0..n)
            .map(|idx| {
                let p = [
                    ((idx % nx) as f64 - center[0]) / half[0],
                    (((idx / nx) % ny) as f64 - center[1]) / half[1],
                    ((idx / (nx * ny)) as f64 - center[2]) / half[2],
                ];
                poly.eval(p)
            })
            .collect();
        let fg = || raw.iter().zip(labels).filter(|(_, &l)| l > 0).map(|(&u, _)| u);
        let lo = fg().fold(f64::INFINITY, f64::min);
        let hi = fg().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let shaped = |u: f64| 1.0 + self.bias_amplitude * (u - lo) / span;
        let count = labels.iter().filter(|&&l| l > 0).count().max(1) as f64;
        let mean = fg().map(shaped).sum::<f64>() / count;
        raw.iter()
            .zip(labels)
            .map(|(&u, &l)| if l > 0 { shaped(u) / mean } else { 1.0 })
            .collect()
    }
}

/// Quadratic `g·p + pᵀHp` with a trace-free (hence indefinite) Hessian, so
/// the extremes over an ellipsoid sit on its boundary.
struct BiasShape {
    g: [f64; 3],
    h: [[f64; 3]; 3],
}

impl BiasShape {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5_f1e1_d000_0000);
        let mut uni = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        let mut g = [uni(), uni(), uni()];
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        g.iter_mut().for_each(|v| *v /= norm);
        let (a, b, c, d, e) = (uni(), uni(), uni(), uni(), uni());
        let h = [
            [0.5 * a, 0.25 * c, 0.25 * d],
            [0.25 * c, 0.5 * b, 0.25 * e],
            [0.25 * d, 0.25 * e, -0.5 * (a + b)],
        ];
        BiasShape { g, h }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let mut v = self.g[0] * p[0] + self.g[1] * p[1] + self.g[2] * p[2];
        for i in 0..3 {
            for j in 0..3 {
                v += p[i] * self.h[i][j] * p[j];
            }
        }
        v
    }
}

/// Standard normal draw addressed by (seed, stream, voxel index).
fn gaussian_at(seed: u64, stream: u64, idx: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(idx as u128 * 4);
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn render(spec: &PhantomSpec, labels: &[u8], bias: &[f64], protocol: Protocol) -> Result<Scene> {
    let ceiling = spec.intensity_ceiling as f64;
    let data: Vec<u16> = labels
        .iter()
        .enumerate()
        .map(|(idx, &l)| {
            if l == 0 {
                return 0;
            }
            let t = &spec.tissues[l as usize - 1];
            let mean = match protocol {
                Protocol::T2 => t.mean_t2,
                Protocol::Pd => t.mean_pd,
            };
            let mut v = mean * bias[idx];
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * gaussian_at(spec.seed, protocol.stream(), idx);
            }
            // foreground stays foreground
            round_half_up(v).clamp(1.0, ceiling) as u16
        })
        .collect();
    let mut scene = Scene::new(spec.dims, spec.voxel_size, data)?.with_protocol(protocol.tag());
    scene.intensity_ceiling = spec.intensity_ceiling;
    Ok(scene)
}

pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<(Scene, Scene)> {
    spec.validate()?;
    let labels = spec.label_map();
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::EmptyForeground);
    }
    let bias = spec.bias_field(&labels);
    Ok((
        render(spec, &labels, &bias, Protocol::T2)?,
        render(spec, &labels, &bias, Protocol::Pd)?,
    ))
}

/// Cohort variation applied on top of a base spec for one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortVariation {
    /// Relative jitter of ellipsoid radii and centers.
    pub geometry_jitter: f64,
    /// Per-subject, per-protocol acquisition gain range applied to tissue means.
    pub gain_range: [f64; 2],
}

impl Default for CohortVariation {
    fn default() -> Self {
        CohortVariation {
            geometry_jitter: 0.05,
            gain_range: [0.8, 1.25],
        }
    }
}

impl CohortVariation {
    pub fn subject_spec(&self, base: &PhantomSpec, subject_seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
        let mut uni = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut spec = base.clone();
        spec.seed = subject_seed;
        let j = self.geometry_jitter;
        for t in &mut spec.tissues {
            for a in 0..3 {
                t.radii[a] *= 1.0 + j * (2.0 * uni() - 1.0);
                t.center[a] += 0.5 * j * t.radii[a] * (2.0 * uni() - 1.0);
            }
        }
        let [lo, hi] = self.gain_range;
        let gain_t2 = lo + (hi - lo) * uni();
        let gain_pd = lo + (hi - lo) * uni();
        for t in &mut spec.tissues {
            t.mean_t2 *= gain_t2;
            t.mean_pd *= gain_pd;
        }
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_spec() -> PhantomSpec {
        let mut s = PhantomSpec::brain([24, 24, 24], 7);
        s.noise_sigma = 0.0;
        s.bias_amplitude = 0.0;
        s
    }

    #[test]
    fn ideal_phantom_hits_tissue_means_exactly() {
        let spec = clean_spec();
        let labels = spec.label_map();
        let (t2, pd) = generate_phantom_pair(&spec).unwrap();
        for (idx, &l) in labels.iter().enumerate() {
            if l == 0 {
                assert_eq!(t2.data()[idx], 0);
                continue;
            }
            let t = &spec.tissues[l as usize - 1];
            assert_eq!(t2.data()[idx] as f64, t.mean_t2);
            assert_eq!(pd.data()[idx] as f64, t.mean_pd);
        }
        let present: std::collections::BTreeSet<u16> = t2.data().iter().copied().filter(|&v| v > 0).collect();
        let labels_present: std::collections::BTreeSet<&str> = labels
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| spec.tissues[l as usize - 1].label.as_str())
            .collect();
        assert_eq!(present.len(), labels_present.len());
    }

    #[test]
    fn deterministic_and_masks_match() {
        let spec = PhantomSpec::brain([20, 22, 18], 99);
        let a = generate_phantom_pair(&spec).unwrap();
        let b = generate_phantom_pair(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.foreground_mask(), a.1.foreground_mask());
        assert_eq!(a.0.protocol, "T2");
        assert_eq!(a.1.protocol, "PD");
        let other = PhantomSpec { seed: 100, ..spec };
        assert_ne!(generate_phantom_pair(&other).unwrap().0, a.0);
    }

    #[test]
    fn bias_ratio_matches_amplitude() {
        let mut spec = PhantomSpec::brain([40, 40, 40], 3);
        spec.noise_sigma = 0.0;
        spec.bias_amplitude = 0.2;
        let labels = spec.label_map();
        let (t2, _) = generate_phantom_pair(&spec).unwrap();
        // outer shell region: label 1
        let ratios: Vec<f64> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| t2.data()[i] as f64 / spec.tissues[0].mean_t2)
            .collect();
        let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
        let r = hi / lo;
        assert!((r - 1.2).abs() / 1.2 < 0.05, "ratio {r}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = clean_spec();
        s.bias_amplitude = 0.6;
        assert!(generate_phantom_pair(&s).is_err());
        let mut s = clean_spec();
        s.noise_sigma = -1.0;
        assert!(generate_phantom_pair(&s).is_err());
        let mut s = clean_spec();
        s.tissues[1].mean_t2 = s.tissues[0].mean_t2;
        assert!(generate_phantom_pair(&s).is_err());
        let mut s = clean_spec();
        for t in &mut s.tissues {
            t.radii = [0.001; 3];
            t.center = [0.01; 3];
        }
        assert!(matches!(generate_phantom_pair(&s), Err(Error::EmptyForeground)));
    }

    #[test]
    fn noise_is_roughly_standard_normal() {
        let xs: Vec<f64> = (0..20000).map(|i| gaussian_at(5, 0, i)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
