//! Histogram-landmark intensity standardization (two-segment piecewise
//! linear map onto a standard scale) and its inverse, used to inject
//! controlled non-standardness into already standardized scenes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::round_half_up;
use crate::scene::{foreground_histogram, Histogram, Scene};

pub const DEFAULT_PC1: f64 = 0.0;
pub const DEFAULT_PC2: f64 = 99.8;
pub const DEFAULT_S1: u16 = 1;
pub const DEFAULT_S2: u16 = 4095;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub p1: u16,
    pub p2: u16,
    pub mu: u16,
}

impl LandmarkSet {
    fn from_histogram(hist: &Histogram, pc1: f64, pc2: f64) -> Result<Self> {
        if !(pc1 < pc2) {
            return Err(Error::InvalidArgument(format!("pc1 ({pc1}) must be below pc2 ({pc2})")));
        }
        let p1 = hist.percentile(pc1)?;
        let p2 = hist.percentile(pc2)?;
        if p1 == p2 {
            return Err(Error::DegenerateLandmarks(p1));
        }
        let mu = hist.percentile(50.0)?.clamp(p1, p2);
        Ok(LandmarkSet { p1, p2, mu })
    }
}

pub fn extract_landmarks(scene: &Scene, pc1: f64, pc2: f64) -> Result<LandmarkSet> {
    LandmarkSet::from_histogram(&foreground_histogram(scene)?, pc1, pc2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationModel {
    pub s1: u16,
    pub s2: u16,
    pub mu_s: u16,
    pub pc1: f64,
    pub pc2: f64,
    pub body_region: String,
    pub protocol: String,
    /// Min and max of the two segment slopes seen when standardizing the
    /// training scenes.
    pub training_slope_range: [f64; 2],
}

impl StandardizationModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Slopes of the lower and upper segments for a scene with `lm`.
    pub fn segment_slopes(&self, lm: &LandmarkSet) -> (Option<f64>, Option<f64>) {
        let lower = (lm.mu > lm.p1).then(|| (self.mu_s as f64 - self.s1 as f64) / (lm.mu as f64 - lm.p1 as f64));
        let upper = (lm.p2 > lm.mu).then(|| (self.s2 as f64 - self.mu_s as f64) / (lm.p2 as f64 - lm.mu as f64));
        (lower, upper)
    }

    /// Real-valued piecewise-linear map for one intensity, before rounding.
    pub fn map_real(&self, lm: &LandmarkSet, f: u16) -> f64 {
        let (s1, s2, mu_s) = (self.s1 as f64, self.s2 as f64, self.mu_s as f64);
        let (p1, p2, mu) = (lm.p1 as f64, lm.p2 as f64, lm.mu as f64);
        let f = f as f64;
        if f <= p1 {
            s1
        } else if f >= p2 {
            s2
        } else if f <= mu {
            s1 + (f - p1) * (mu_s - s1) / (mu - p1)
        } else {
            mu_s + (f - mu) * (s2 - mu_s) / (p2 - mu)
        }
    }
}

/// Learns the mean standard-scale median over a training cohort sharing one
/// body region and protocol.
pub fn train_model(scenes: &[Scene], pc1: f64, pc2: f64, s1: u16, s2: u16) -> Result<StandardizationModel> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidArgument("training needs at least one scene".into()))?;
    for s in scenes {
        if s.protocol != first.protocol {
            return Err(Error::ProtocolMismatch {
                expected: first.protocol.clone(),
                found: s.protocol.clone(),
            });
        }
        if s.body_region != first.body_region {
            return Err(Error::InvalidArgument(format!(
                "mixed body regions {:?} and {:?}",
                first.body_region, s.body_region
            )));
        }
    }
    let landmarks = scenes
        .iter()
        .map(|s| extract_landmarks(s, pc1, pc2))
        .collect::<Result<Vec<_>>>()?;
    train_from_landmarks(&landmarks, pc1, pc2, s1, s2, &first.body_region, &first.protocol)
}

pub fn train_from_landmarks(
    landmarks: &[LandmarkSet],
    pc1: f64,
    pc2: f64,
    s1: u16,
    s2: u16,
    body_region: &str,
    protocol: &str,
) -> Result<StandardizationModel> {
    if !(s1 < s2) {
        return Err(Error::InvalidArgument(format!("standard scale [{s1}, {s2}] is empty")));
    }
    if landmarks.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scene".into()));
    }
    let mut sum = 0.0;
    for lm in landmarks {
        if lm.p1 == lm.p2 {
            return Err(Error::DegenerateLandmarks(lm.p1));
        }
        sum += s1 as f64 + (lm.mu as f64 - lm.p1 as f64) * (s2 as f64 - s1 as f64) / (lm.p2 as f64 - lm.p1 as f64);
    }
    let mu_s = round_half_up(sum / landmarks.len() as f64) as u16;
    let mut model = StandardizationModel {
        s1,
        s2,
        mu_s: mu_s.clamp(s1.saturating_add(1), s2.saturating_sub(1)),
        pc1,
        pc2,
        body_region: body_region.to_string(),
        protocol: protocol.to_string(),
        training_slope_range: [f64::INFINITY, f64::NEG_INFINITY],
    };
    for lm in landmarks {
        let (lower, upper) = model.segment_slopes(lm);
        for m in [lower, upper].into_iter().flatten() {
            model.training_slope_range[0] = model.training_slope_range[0].min(m);
            model.training_slope_range[1] = model.training_slope_range[1].max(m);
        }
    }
    Ok(model)
}

pub fn standardize_scene(scene: &Scene, model: &StandardizationModel) -> Result<Scene> {
    if scene.protocol != model.protocol {
        return Err(Error::ProtocolMismatch {
            expected: model.protocol.clone(),
            found: scene.protocol.clone(),
        });
    }
    let lm = extract_landmarks(scene, model.pc1, model.pc2)?;
    let lo = scene.data().iter().copied().filter(|&v| v > 0).min().unwrap_or(1);
    let hi = scene.data().iter().copied().max().unwrap_or(0);
    let mut lut = vec![0u16; hi as usize + 1];
    for f in lo..=hi {
        lut[f as usize] = round_half_up(model.map_real(&lm, f)) as u16;
    }
    let data = scene.data().iter().map(|&v| lut[v as usize]).collect();
    let mut out = scene.with_data(data);
    out.intensity_ceiling = model.s2;
    Ok(out)
}

/// Severity classes of the injected non-standardness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    None,
    Small,
    Medium,
    Large,
}

/// `clean` (0) or `psibar1` … `psibar7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LevelId(pub u8);

impl LevelId {
    pub const CLEAN: LevelId = LevelId(0);

    pub fn is_clean(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for LevelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            write!(f, "clean")
        } else {
            write!(f, "psibar{}", self.0)
        }
    }
}

impl FromStr for LevelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "clean" {
            return Ok(LevelId::CLEAN);
        }
        let digits = t.strip_prefix("psibar").unwrap_or(&t);
        match digits.parse::<u8>() {
            Ok(k @ 0..=7) => Ok(LevelId(k)),
            _ => Err(Error::InvalidArgument(format!("unknown non-standardness level {s:?}"))),
        }
    }
}

impl Serialize for LevelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LevelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonStandardnessLevel {
    pub id: LevelId,
    /// Shared sampling range of both slopes.
    pub slope_range: [f64; 2],
    pub scale_class: ScaleClass,
}

impl NonStandardnessLevel {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.slope_range;
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "level {} has invalid slope range {:?}",
                self.id, self.slope_range
            )));
        }
        Ok(())
    }
}

pub fn default_levels() -> Vec<NonStandardnessLevel> {
    let level = |k: u8, lo: f64, hi: f64, class: ScaleClass| NonStandardnessLevel {
        id: LevelId(k),
        slope_range: [lo, hi],
        scale_class: class,
    };
    vec![
        level(0, 1.0, 1.0, ScaleClass::None),
        level(1, 0.9, 1.5, ScaleClass::Small),
        level(2, 0.6, 0.9, ScaleClass::Small),
        level(3, 1.5, 2.0, ScaleClass::Medium),
        level(4, 2.0, 2.4, ScaleClass::Medium),
        level(5, 2.4, 2.7, ScaleClass::Large),
        level(6, 2.7, 3.0, ScaleClass::Large),
        level(7, 3.0, 3.3, ScaleClass::Large),
    ]
}

pub fn level_by_id(id: LevelId) -> Option<NonStandardnessLevel> {
    default_levels().into_iter().find(|l| l.id == id)
}

/// Inverse of a two-segment standardization map. Below the knee:
/// `low + ⌈(f − low)/m1⌋`; above it: `⌈(f − median)/m2 + knee⌋`, where
/// `knee` is the image of `median` so the map is continuous. With `low = 0`
/// this is exactly the textbook inverse mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseMap {
    pub low: f64,
    pub median: f64,
    pub m1: f64,
    pub m2: f64,
    pub knee: f64,
}

impl InverseMap {
    pub fn new(low: f64, median: f64, m1: f64, m2: f64) -> Result<Self> {
        if !(m1 > 0.0) || !(m2 > 0.0) {
            return Err(Error::InvalidArgument(format!("slopes must be positive, got {m1}, {m2}")));
        }
        let knee = round_half_up((median - low) / m1 + low);
        Ok(InverseMap {
            low,
            median,
            m1,
            m2,
            knee,
        })
    }

    pub fn apply(&self, f: u16) -> u16 {
        if f == 0 {
            return 0;
        }
        let f = f as f64;
        let g = if f <= self.median {
            round_half_up((f - self.low) / self.m1 + self.low)
        } else {
            round_half_up((f - self.median) / self.m2 + self.knee)
        };
        g.clamp(1.0, u16::MAX as f64) as u16
    }
}

/// Slopes drawn for one injection and the slopes actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionDraw {
    pub m1: f64,
    pub m2: f64,
    pub m1_applied: f64,
    pub m2_applied: f64,
}

/// Nudges a slope so the segment `[a, b]` lands on a whole number of output
/// levels, keeping it inside `range` when a neighbouring whole number allows.
fn snap_slope(span: f64, m: f64, range: [f64; 2]) -> f64 {
    if span <= 0.0 {
        return m;
    }
    let n0 = (span / m).round().max(1.0);
    let mut best = span / n0;
    let mut best_err = f64::INFINITY;
    for n in [n0 - 1.0, n0, n0 + 1.0] {
        if n < 1.0 {
            continue;
        }
        let cand = span / n;
        if cand < range[0] || cand > range[1] {
            continue;
        }
        let err = (cand - m).abs();
        if err < best_err {
            best = cand;
            best_err = err;
        }
    }
    best
}

pub fn inject_nonstandardness(scene: &Scene, level: &NonStandardnessLevel, seed: u64) -> Result<Scene> {
    inject_with_draw(scene, level, seed).map(|(s, _)| s)
}

/// Injects non-standardness into a standardized scene. The anchors are the
/// scene's own landmarks (its minimum, median and 99.8th percentile, i.e.
/// s1, μs and s2 for a standardized scene).
pub fn inject_with_draw(scene: &Scene, level: &NonStandardnessLevel, seed: u64) -> Result<(Scene, InjectionDraw)> {
    level.validate()?;
    if level.id.is_clean() {
        let draw = InjectionDraw {
            m1: 1.0,
            m2: 1.0,
            m1_applied: 1.0,
            m2_applied: 1.0,
        };
        return Ok((scene.clone(), draw));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = level.slope_range;
    let m1 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let m2 = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let lm = extract_landmarks(scene, DEFAULT_PC1, DEFAULT_PC2)?;
    let (low, median, high) = (lm.p1 as f64, lm.mu as f64, lm.p2 as f64);
    let m1_applied = snap_slope(median - low, m1, level.slope_range);
    let m2_applied = snap_slope(high - median, m2, level.slope_range);
    let map = InverseMap::new(low, median, m1_applied, m2_applied)?;
    let data = scene.data().iter().map(|&v| map.apply(v)).collect();
    let mut out = scene.with_data(data);
    out.intensity_ceiling = u16::MAX;
    Ok((
        out,
        InjectionDraw {
            m1,
            m2,
            m1_applied,
            m2_applied,
        },
    ))
}
