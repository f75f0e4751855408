//! Volumetric data model and the on-disk container.
//!
//! A container is a pair of files sharing a stem: `<name>.json` holds the
//! header (`dims`, `spacing_mm`, `dtype`, `order`) and `<name>.raw` holds the
//! samples, little-endian, x varying fastest, then y, then z.
//!
//! Orientation is fixed LPS with the origin at voxel (0,0,0): +x points to the
//! patient's left, +y posterior, +z superior.

use std::fs;
use std::io::Write;
use std::ops::{Add, Sub};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// Voxel counts and physical spacing shared by a volume and its masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, offset: usize) -> (usize, usize, usize) {
        let nx = self.dims[0];
        let ny = self.dims[1];
        (offset % nx, (offset / nx) % ny, offset / (nx * ny))
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        idx.i >= 0
            && idx.j >= 0
            && idx.k >= 0
            && (idx.i as usize) < self.dims[0]
            && (idx.j as usize) < self.dims[1]
            && (idx.k as usize) < self.dims[2]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// World position of a voxel center.
    pub fn index_to_world(&self, idx: VoxelIndex) -> WorldPoint {
        WorldPoint {
            x: idx.i as f64 * self.spacing[0],
            y: idx.j as f64 * self.spacing[1],
            z: idx.k as f64 * self.spacing[2],
        }
    }

    /// Nearest voxel to a world point; errors when it falls outside the grid.
    pub fn world_to_index(&self, p: WorldPoint) -> Result<VoxelIndex> {
        let idx = VoxelIndex {
            i: (p.x / self.spacing[0]).round() as i64,
            j: (p.y / self.spacing[1]).round() as i64,
            k: (p.z / self.spacing[2]).round() as i64,
        };
        if self.contains(idx) {
            Ok(idx)
        } else {
            Err(Error::invalid(format!(
                "world point ({:.3}, {:.3}, {:.3}) maps to {idx:?}, outside {:?}",
                p.x, p.y, p.z, self.dims
            )))
        }
    }

    pub fn check_compatible(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: i64,
    pub j: i64,
    pub k: i64,
}

impl VoxelIndex {
    pub fn new(i: i64, j: i64, k: i64) -> Self {
        VoxelIndex { i, j, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        (*self - *other).norm()
    }
}

impl Add for WorldPoint {
    type Output = WorldPoint;
    fn add(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for WorldPoint {
    type Output = WorldPoint;
    fn sub(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    grid: Grid,
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(grid: Grid, voxels: Vec<i16>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: voxels.len(),
            });
        }
        if let Some(v) = voxels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            return Err(Error::invalid(format!(
                "HU value {v} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(CtVolume { grid, voxels })
    }

    /// Volume filled with a single HU value.
    pub fn filled(grid: Grid, hu: i16) -> Result<Self> {
        CtVolume::new(grid, vec![hu; grid.len()])
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> i16 {
        self.voxels[self.grid.offset(i, j, k)]
    }

    pub fn slice(&self, k: usize) -> &[i16] {
        let n = self.grid.slice_len();
        &self.voxels[k * n..(k + 1) * n]
    }

    pub fn hu_checksum(&self) -> i64 {
        self.voxels.iter().map(|&v| v as i64).sum()
    }
}

/// One byte per voxel; grid-aligned with a source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Grid,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(grid: Grid) -> Self {
        BinaryMask {
            grid,
            bits: vec![false; grid.len()],
        }
    }

    pub fn from_bits(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: bits.len(),
            });
        }
        Ok(BinaryMask { grid, bits })
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let o = self.grid.offset(i, j, k);
        self.bits[o] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_clear(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn slice(&self, k: usize) -> &[bool] {
        let n = self.grid.slice_len();
        &self.bits[k * n..(k + 1) * n]
    }

    /// True when every set voxel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.grid == other.grid && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Inclusive bounding box `[min, max]` per axis of set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        bounding_box_of(&self.grid, |o| self.bits[o])
    }
}

pub(crate) fn bounding_box_of(
    grid: &Grid,
    set: impl Fn(usize) -> bool,
) -> Option<([usize; 3], [usize; 3])> {
    let [nx, ny, nz] = grid.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for k in 0..nz {
        for j in 0..ny {
            let row = (j + ny * k) * nx;
            for i in 0..nx {
                if set(row + i) {
                    any = true;
                    lo[0] = lo[0].min(i);
                    hi[0] = hi[0].max(i);
                    lo[1] = lo[1].min(j);
                    hi[1] = hi[1].max(j);
                    lo[2] = lo[2].min(k);
                    hi[2] = hi[2].max(k);
                }
            }
        }
    }
    any.then_some((lo, hi))
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I16,
    U8,
}

impl Dtype {
    fn sample_bytes(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
}

/// `(header path, raw path)` for a container path given as `<stem>`,
/// `<stem>.json` or `<stem>.raw`.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

/// Write `bytes` to `path` via a temporary sibling and rename, so readers
/// never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_container(path: &Path, grid: &Grid, dtype: Dtype, raw: &[u8]) -> Result<()> {
    debug_assert_eq!(raw.len(), grid.len() * dtype.sample_bytes());
    let (json_path, raw_path) = container_paths(path);
    let header = ContainerHeader {
        dims: grid.dims,
        spacing_mm: grid.spacing,
        dtype: match dtype {
            Dtype::I16 => "i16",
            Dtype::U8 => "u8",
        }
        .to_string(),
        order: "x-fastest".to_string(),
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    write_atomic(&raw_path, raw)?;
    write_atomic(&json_path, text.as_bytes())
}

pub(crate) fn read_container(path: &Path) -> Result<(Grid, Dtype, Vec<u8>)> {
    let (json_path, raw_path) = container_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: ContainerHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.order != "x-fastest" {
        return Err(Error::format(
            &json_path,
            format!("unsupported order {:?}", header.order),
        ));
    }
    let dtype = match header.dtype.as_str() {
        "i16" => Dtype::I16,
        "u8" => Dtype::U8,
        other => {
            return Err(Error::format(
                &json_path,
                format!("unsupported dtype {other:?}"),
            ))
        }
    };
    let grid = Grid::new(header.dims, header.spacing_mm)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = grid.len() * dtype.sample_bytes();
    if raw.len() != expected {
        return Err(Error::format(
            &raw_path,
            format!(
                "size mismatch: header declares {} samples ({expected} bytes), raw holds {} bytes",
                grid.len(),
                raw.len()
            ),
        ));
    }
    Ok((grid, dtype, raw))
}

pub fn save_volume(vol: &CtVolume, path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(vol.voxels.len() * 2);
    for v in &vol.voxels {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, &vol.grid, Dtype::I16, &raw)
}

pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let (grid, dtype, raw) = read_container(path)?;
    if dtype != Dtype::I16 {
        return Err(Error::format(path, "expected dtype i16 for a CT volume"));
    }
    let voxels = raw
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    CtVolume::new(grid, voxels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.bits.iter().map(|&b| b as u8).collect();
    write_container(path, &mask.grid, Dtype::U8, &raw)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (grid, dtype, raw) = read_container(path)?;
    if dtype != Dtype::U8 {
        return Err(Error::format(path, "expected dtype u8 for a mask"));
    }
    BinaryMask::from_bits(grid, raw.into_iter().map(|b| b != 0).collect())
}
