//! Volumetric scene: a voxel grid with a non-negative integer intensity per
//! voxel. Intensity 0 means "no measured data"; everything above it is
//! foreground.
//!
//! On disk a scene is a JSON header `<name>.scnh` next to a raw payload
//! `<name>.scnr` of little-endian `u16` values, x fastest, z slowest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CEILING: u16 = 4095;
pub const HEADER_EXT: &str = "scnh";
pub const RAW_EXT: &str = "scnr";

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<u16>,
    pub body_region: String,
    pub protocol: String,
    pub intensity_ceiling: u16,
}

impl Scene {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<u16>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "intensity array has {} voxels, dims imply {n}",
                data.len()
            )));
        }
        Ok(Scene {
            dims,
            voxel_size,
            data,
            body_region: "head".to_string(),
            protocol: String::new(),
            intensity_ceiling: DEFAULT_CEILING,
        })
    }

    pub fn zeros(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Scene::new(dims, voxel_size, vec![0; n])
    }

    pub fn with_protocol(mut self, protocol: impl Into<String>) -> Self {
        self.protocol = protocol.into();
        self
    }

    pub fn with_body_region(mut self, region: impl Into<String>) -> Self {
        self.body_region = region.into();
        self
    }

    /// Same geometry and metadata, new intensities.
    pub fn with_data(&self, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), self.data.len(), "replacement data must match dims");
        Scene {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data,
            body_region: self.body_region.clone(),
            protocol: self.protocol.clone(),
            intensity_ceiling: self.intensity_ceiling,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.index(x, y, z)]
    }

    /// Geometric center in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    counts: BTreeMap<u16, u64>,
    total: u64,
}

impl Histogram {
    pub fn from_counts(counts: BTreeMap<u16, u64>) -> Result<Self> {
        let counts: BTreeMap<u16, u64> = counts.into_iter().filter(|&(v, c)| v > 0 && c > 0).collect();
        let total = counts.values().sum();
        if total == 0 {
            return Err(Error::EmptyForeground);
        }
        Ok(Histogram { counts, total })
    }

    pub fn counts(&self) -> &BTreeMap<u16, u64> {
        &self.counts
    }

    pub fn total_foreground(&self) -> u64 {
        self.total
    }

    pub fn min_intensity(&self) -> u16 {
        *self.counts.keys().next().expect("histogram is non-empty")
    }

    pub fn max_intensity(&self) -> u16 {
        *self.counts.keys().next_back().expect("histogram is non-empty")
    }

    /// Nearest-rank percentile: the smallest intensity whose cumulative count
    /// reaches `ceil(pc/100 · total)`; `pc = 0` yields the minimum.
    pub fn percentile(&self, pc: f64) -> Result<u16> {
        if !(0.0..=100.0).contains(&pc) {
            return Err(Error::InvalidArgument(format!("percentile {pc} outside [0, 100]")));
        }
        let exact = pc * self.total as f64 / 100.0;
        // absorb binary representation error, e.g. 99.8 · 1000 / 100
        let rank = ((exact - 1e-9 * exact.max(1.0)).ceil() as u64).clamp(1, self.total);
        let mut cum = 0;
        for (&v, &c) in &self.counts {
            cum += c;
            if cum >= rank {
                return Ok(v);
            }
        }
        Ok(self.max_intensity())
    }
}

pub fn foreground_histogram(scene: &Scene) -> Result<Histogram> {
    let mut dense = vec![0u64; u16::MAX as usize + 1];
    for &v in scene.data() {
        dense[v as usize] += 1;
    }
    let counts = dense
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &c)| c > 0)
        .map(|(v, &c)| (v as u16, c))
        .collect();
    Histogram::from_counts(counts)
}

pub fn percentile_intensity(hist: &Histogram, pc: f64) -> Result<u16> {
    hist.percentile(pc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_corner: [usize; 3],
    pub max_corner: [usize; 3],
}

impl BoundingBox {
    /// The eight corners as real voxel coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (k, corner) in out.iter_mut().enumerate() {
            for axis in 0..3 {
                let hi = (k >> axis) & 1 == 1;
                corner[axis] = if hi { self.max_corner[axis] } else { self.min_corner[axis] } as f64;
            }
        }
        out
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min_corner[a] <= p[a] && p[a] <= self.max_corner[a])
    }
}

pub fn foreground_bounding_box(scene: &Scene) -> Result<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &v) in scene.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let c = scene.coords(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    Ok(BoundingBox {
        min_corner: lo,
        max_corner: hi,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [i64; 3],
    voxel_size_mm: [f64; 3],
    dtype: String,
    byte_order: String,
    #[serde(default = "default_region")]
    body_region: String,
    #[serde(default)]
    protocol: String,
    #[serde(default = "default_ceiling")]
    intensity_ceiling: u16,
}

fn default_region() -> String {
    "head".to_string()
}

fn default_ceiling() -> u16 {
    DEFAULT_CEILING
}

/// Path of the raw payload belonging to a header path.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension(RAW_EXT)
}

/// Normalizes `foo`, `foo.scnh` or `foo.scnr` to the header path.
pub fn header_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(HEADER_EXT) => path.to_path_buf(),
        Some(RAW_EXT) => path.with_extension(HEADER_EXT),
        _ => {
            let mut s = path.as_os_str().to_owned();
            s.push(".");
            s.push(HEADER_EXT);
            PathBuf::from(s)
        }
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let hpath = header_path(path.as_ref());
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&hpath, e.to_string()))?;
    if header.dtype != "u16" {
        return Err(Error::format(&hpath, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.byte_order != "le" {
        return Err(Error::format(&hpath, format!("unsupported byte order {:?}", header.byte_order)));
    }
    if header.dims.iter().any(|&d| d <= 0) {
        return Err(Error::format(&hpath, format!("non-positive dims {:?}", header.dims)));
    }
    let dims = header.dims.map(|d| d as usize);
    let rpath = raw_path(&hpath);
    let bytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let expected = (dims[0] * dims[1] * dims[2] * 2) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let mut scene = Scene::new(dims, header.voxel_size_mm, data).map_err(|e| Error::format(&hpath, e.to_string()))?;
    scene.body_region = header.body_region;
    scene.protocol = header.protocol;
    scene.intensity_ceiling = header.intensity_ceiling;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let hpath = header_path(path.as_ref());
    let header = Header {
        dims: scene.dims.map(|d| d as i64),
        voxel_size_mm: scene.voxel_size,
        dtype: "u16".to_string(),
        byte_order: "le".to_string(),
        body_region: scene.body_region.clone(),
        protocol: scene.protocol.clone(),
        intensity_ceiling: scene.intensity_ceiling,
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    if let Some(parent) = hpath.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(scene.data.len() * 2);
    for v in &scene.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let rpath = raw_path(&hpath);
    fs::write(&rpath, bytes).map_err(|e| Error::io(&rpath, e))?;
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
    Ok(())
}
