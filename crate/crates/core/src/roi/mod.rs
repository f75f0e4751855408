//! Joint localization: pelvis slab, initial voxel mask, coccyx location,
//! forest-based refinement and half-slice rectangle extraction.

pub mod unet;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::image::Image;
use crate::morphology::{connected_components, hull_width, point_in_polygon, slice_convex_hull, Polygon2D};
use crate::volume::{self, BinaryMask, CtVolume, Dtype, Grid, VoxelIndex, WorldPoint};

pub use unet::{load_unet, save_unet, UNet, UNetClassifier, UNetConfig, UNetPatch};

/// HU window mapped onto [0, 1] for every learned model input.
pub const HU_WINDOW: [f64; 2] = [-200.0, 1300.0];

#[inline]
pub fn normalize_hu(v: i16) -> f32 {
    normalize_hu_f(v as f64)
}

#[inline]
pub fn normalize_hu_f(v: f64) -> f32 {
    let [lo, hi] = HU_WINDOW;
    ((v.clamp(lo, hi) - lo) / (hi - lo)) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiParams {
    /// A slice starts the pelvis when its hull is this many times wider than
    /// the previous non-empty slice.
    pub width_jump_ratio: f64,
    pub margin_mm: f64,
    pub probability_cutoff: f32,
    /// Fraction of most-posterior skeleton voxels averaged into a coccyx
    /// candidate.
    pub posterior_fraction: f64,
    pub min_component_mm3: f64,
    pub rect_width_mm: f64,
    pub rect_height_mm: f64,
    pub rect_rows: usize,
    pub rect_cols: usize,
    /// In-plane margin around the slab skeleton for voxel-classifier inference.
    pub window_margin_mm: f64,
    pub use_hu_feature: bool,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams {
            width_jump_ratio: 1.3,
            margin_mm: 30.0,
            probability_cutoff: 0.5,
            posterior_fraction: 0.01,
            min_component_mm3: 2.0,
            rect_width_mm: 50.0,
            rect_height_mm: 25.0,
            rect_rows: 100,
            rect_cols: 200,
            window_margin_mm: 8.0,
            use_hu_feature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PelvisRoi {
    pub z_top: usize,
    pub z_bottom: usize,
    pub reference_hull: Polygon2D,
}

impl PelvisRoi {
    pub fn contains_slice(&self, z: usize) -> bool {
        (self.z_bottom..=self.z_top).contains(&z)
    }
}

pub fn compute_pelvis_roi(skeleton: &BinaryMask, params: &RoiParams) -> Result<PelvisRoi> {
    let grid = skeleton.grid();
    let nz = grid.dims[2];
    let non_empty: Vec<usize> = (0..nz).filter(|&z| skeleton.slice(z).iter().any(|&b| b)).collect();
    if non_empty.is_empty() {
        return Err(Error::PelvisNotFound);
    }
    let mut prev_width = None;
    let mut z_top = None;
    for &z in &non_empty {
        let w = hull_width(&slice_convex_hull(skeleton, z)?);
        if let Some(p) = prev_width {
            if w > params.width_jump_ratio * p {
                z_top = Some(z);
                break;
            }
        }
        prev_width = Some(w);
    }
    let z_top = z_top.ok_or(Error::PelvisNotFound)?;
    let ref_z = if z_top + 1 < nz { z_top + 1 } else { z_top };
    let reference_hull = slice_convex_hull(skeleton, ref_z)?;
    let z_end = bone_end_below(skeleton, z_top, &reference_hull);
    let margin = (params.margin_mm / grid.spacing[2]).ceil() as usize;
    Ok(PelvisRoi {
        z_top,
        z_bottom: z_end.saturating_sub(margin),
        reference_hull,
    })
}

/// First slice below `z_top` with no set voxel inside `hull` (0 when bone
/// continues to the bottom of the grid).
pub fn bone_end_below(mask: &BinaryMask, z_top: usize, hull: &Polygon2D) -> usize {
    let g = mask.grid();
    let [nx, ny, _] = g.dims;
    (0..z_top)
        .rev()
        .find(|&z| {
            let s = mask.slice(z);
            !(0..ny).any(|j| {
                (0..nx).any(|i| s[j * nx + i] && point_in_polygon(hull, [i as f64 * g.spacing[0], j as f64 * g.spacing[1]]))
            })
        })
        .unwrap_or(0)
}

/// A (previous, current, next) slice triplet cut to an in-plane window whose
/// top-left voxel is (x0, y0).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTriplet {
    pub z: usize,
    pub x0: usize,
    pub y0: usize,
    pub rows: usize,
    pub cols: usize,
    pub prev: Vec<i16>,
    pub cur: Vec<i16>,
    pub next: Vec<i16>,
}

/// Per-pixel SIJ probability for a slice triplet. Implementations must be
/// deterministic and return `rows × cols` values in [0, 1].
pub trait VoxelClassifier: Sync {
    fn predict(&self, triplet: &SliceTriplet) -> Result<Vec<f32>>;
}

/// Inclusive in-plane voxel window `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Window {
    pub fn full(grid: &Grid) -> Self {
        Window {
            x0: 0,
            x1: grid.dims[0] - 1,
            y0: 0,
            y1: grid.dims[1] - 1,
        }
    }
}

/// In-plane bounding box of skeleton voxels inside the slab, grown by
/// `margin_mm` and clamped to the grid.
pub fn skeleton_window(skeleton: &BinaryMask, roi: &PelvisRoi, margin_mm: f64) -> Window {
    let g = skeleton.grid();
    let [nx, ny, _] = g.dims;
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for z in roi.z_bottom..=roi.z_top {
        let s = skeleton.slice(z);
        for j in 0..ny {
            for i in 0..nx {
                if s[j * nx + i] {
                    x0 = x0.min(i);
                    x1 = x1.max(i);
                    y0 = y0.min(j);
                    y1 = y1.max(j);
                }
            }
        }
    }
    if x0 == usize::MAX {
        return Window::full(g);
    }
    let mx = (margin_mm / g.spacing[0]).ceil() as usize;
    let my = (margin_mm / g.spacing[1]).ceil() as usize;
    Window {
        x0: x0.saturating_sub(mx),
        x1: (x1 + mx).min(nx - 1),
        y0: y0.saturating_sub(my),
        y1: (y1 + my).min(ny - 1),
    }
}

fn cut(vol: &CtVolume, z: usize, w: &Window) -> Vec<i16> {
    let nx = vol.grid().dims[0];
    let s = vol.slice(z);
    let mut out = Vec::with_capacity((w.x1 - w.x0 + 1) * (w.y1 - w.y0 + 1));
    for j in w.y0..=w.y1 {
        out.extend_from_slice(&s[j * nx + w.x0..=j * nx + w.x1]);
    }
    out
}

pub fn slice_triplet(vol: &CtVolume, z: usize, w: &Window) -> SliceTriplet {
    let nz = vol.grid().dims[2];
    SliceTriplet {
        z,
        x0: w.x0,
        y0: w.y0,
        rows: w.y1 - w.y0 + 1,
        cols: w.x1 - w.x0 + 1,
        prev: cut(vol, z.saturating_sub(1), w),
        cur: cut(vol, z, w),
        next: cut(vol, (z + 1).min(nz - 1), w),
    }
}

pub fn initial_sij_mask(
    vol: &CtVolume,
    roi: &PelvisRoi,
    clf: &dyn VoxelClassifier,
    params: &RoiParams,
) -> Result<BinaryMask> {
    initial_sij_mask_in_window(vol, roi, clf, &Window::full(vol.grid()), params)
}

/// Like [`initial_sij_mask`] but the classifier only sees `window`; voxels
/// outside it stay clear.
pub fn initial_sij_mask_in_window(
    vol: &CtVolume,
    roi: &PelvisRoi,
    clf: &dyn VoxelClassifier,
    window: &Window,
    params: &RoiParams,
) -> Result<BinaryMask> {
    let grid = *vol.grid();
    if roi.z_top >= grid.dims[2] || roi.z_bottom > roi.z_top {
        return Err(Error::invalid("pelvis ROI outside the volume"));
    }
    let probs: Vec<(usize, Vec<f32>)> = (roi.z_bottom..=roi.z_top)
        .into_par_iter()
        .map(|z| {
            let t = slice_triplet(vol, z, window);
            let p = clf.predict(&t)?;
            if p.len() != t.rows * t.cols {
                return Err(Error::DimensionMismatch { expected: t.rows * t.cols, got: p.len() });
            }
            Ok((z, p))
        })
        .collect::<Result<_>>()?;
    let mut mask = BinaryMask::empty(grid);
    let cols = window.x1 - window.x0 + 1;
    for (z, p) in probs {
        for (idx, &v) in p.iter().enumerate() {
            if v >= params.probability_cutoff {
                mask.set(window.x0 + idx % cols, window.y0 + idx / cols, z, true);
            }
        }
    }
    Ok(mask)
}

/// (unit direction from the coccyx to the voxel center, distance in mm).
pub fn voxel_features(p: VoxelIndex, coccyx: WorldPoint, grid: &Grid) -> [f64; 4] {
    let d = grid.index_to_world(p) - coccyx;
    let n = d.norm();
    if n == 0.0 {
        return [0.0; 4];
    }
    [d.x / n, d.y / n, d.z / n, n]
}

fn feature_row(vol: &CtVolume, offset: usize, coccyx: WorldPoint, with_hu: bool) -> Vec<f64> {
    let g = vol.grid();
    let (i, j, k) = g.coords(offset);
    let mut f = voxel_features(VoxelIndex::new(i as i64, j as i64, k as i64), coccyx, g).to_vec();
    if with_hu {
        f.push(vol.voxels()[offset] as f64);
    }
    f
}

/// Refinement-forest feature rows for the given voxel offsets.
pub fn feature_rows(vol: &CtVolume, offsets: &[usize], coccyx: WorldPoint, with_hu: bool) -> Vec<Vec<f64>> {
    offsets.iter().map(|&o| feature_row(vol, o, coccyx, with_hu)).collect()
}

fn set_offsets(mask: &BinaryMask) -> Vec<usize> {
    mask.bits()
        .iter()
        .enumerate()
        .filter_map(|(o, &b)| b.then_some(o))
        .collect()
}

/// Centroid of the most-posterior (largest y) set voxels. All voxels in the
/// row that reaches the requested fraction are included.
pub fn posterior_centroid(mask: &BinaryMask, z_range: (usize, usize), fraction: f64) -> Option<WorldPoint> {
    let g = mask.grid();
    let [nx, ny, _] = g.dims;
    let mut per_row = vec![0usize; ny];
    for z in z_range.0..=z_range.1 {
        let s = mask.slice(z);
        for (j, row) in s.chunks(nx).enumerate() {
            per_row[j] += row.iter().filter(|&&b| b).count();
        }
    }
    let total: usize = per_row.iter().sum();
    if total == 0 {
        return None;
    }
    let wanted = ((total as f64 * fraction).ceil() as usize).max(1);
    let mut acc = 0;
    let mut cutoff = 0;
    for j in (0..ny).rev() {
        acc += per_row[j];
        if acc >= wanted {
            cutoff = j;
            break;
        }
    }
    let (mut sx, mut sy, mut sz, mut n) = (0.0, 0.0, 0.0, 0usize);
    for z in z_range.0..=z_range.1 {
        let s = mask.slice(z);
        for j in cutoff..ny {
            for i in 0..nx {
                if s[j * nx + i] {
                    sx += i as f64;
                    sy += j as f64;
                    sz += z as f64;
                    n += 1;
                }
            }
        }
    }
    let n = n as f64;
    Some(WorldPoint::new(
        sx / n * g.spacing[0],
        sy / n * g.spacing[1],
        sz / n * g.spacing[2],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoccyxSource {
    Slab,
    Skeleton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoccyxLocation {
    pub point: WorldPoint,
    pub source: CoccyxSource,
    pub slab_candidate: Option<WorldPoint>,
    pub skeleton_candidate: Option<WorldPoint>,
    /// Initial-mask voxels classified positive, per candidate.
    pub intersections: [usize; 2],
}

/// Callers check the forest's feature count first.
fn positives(vol: &CtVolume, offsets: &[usize], coccyx: WorldPoint, rf: &Forest, with_hu: bool) -> Result<Vec<bool>> {
    Ok(offsets
        .par_iter()
        .map(|&o| rf.predict_unchecked(&feature_row(vol, o, coccyx, with_hu)) == 1)
        .collect())
}

fn check_refinement_forest(rf: &Forest, params: &RoiParams) -> Result<()> {
    let want = if params.use_hu_feature { 5 } else { 4 };
    if rf.n_features != want {
        return Err(Error::DimensionMismatch { expected: want, got: rf.n_features });
    }
    if rf.n_classes < 2 {
        return Err(Error::invalid("refinement forest must have two classes"));
    }
    Ok(())
}

pub fn locate_coccyx(
    vol: &CtVolume,
    skeleton: &BinaryMask,
    roi: &PelvisRoi,
    initial: &BinaryMask,
    rf: &Forest,
    params: &RoiParams,
) -> Result<CoccyxLocation> {
    check_refinement_forest(rf, params)?;
    vol.grid().check_compatible(skeleton.grid())?;
    vol.grid().check_compatible(initial.grid())?;
    let nz = skeleton.grid().dims[2];
    let slab = posterior_centroid(skeleton, (roi.z_bottom, roi.z_top), params.posterior_fraction);
    let whole = posterior_centroid(skeleton, (0, nz - 1), params.posterior_fraction);
    let offsets = set_offsets(initial);
    let mut counts = [0usize; 2];
    for (slot, cand) in [slab, whole].iter().enumerate() {
        if let Some(c) = cand {
            counts[slot] = positives(vol, &offsets, *c, rf, params.use_hu_feature)?
                .iter()
                .filter(|&&p| p)
                .count();
        }
    }
    if counts == [0, 0] {
        return Err(Error::CoccyxAmbiguous);
    }
    let (point, source) = if counts[0] >= counts[1] {
        (slab.expect("positive count implies a candidate"), CoccyxSource::Slab)
    } else {
        (whole.expect("positive count implies a candidate"), CoccyxSource::Skeleton)
    };
    Ok(CoccyxLocation {
        point,
        source,
        slab_candidate: slab,
        skeleton_candidate: whole,
        intersections: counts,
    })
}

pub fn refine_sij_mask(
    vol: &CtVolume,
    initial: &BinaryMask,
    coccyx: WorldPoint,
    rf: &Forest,
    params: &RoiParams,
) -> Result<BinaryMask> {
    check_refinement_forest(rf, params)?;
    vol.grid().check_compatible(initial.grid())?;
    let grid = *initial.grid();
    let offsets = set_offsets(initial);
    let keep = positives(vol, &offsets, coccyx, rf, params.use_hu_feature)?;
    let mut mask = BinaryMask::empty(grid);
    for (&o, &k) in offsets.iter().zip(&keep) {
        if k {
            mask.bits_mut()[o] = true;
        }
    }
    let labels = connected_components(&mask);
    let vv = grid.voxel_volume_mm3();
    let drop: Vec<bool> = labels.sizes.iter().map(|&s| (s as f64) * vv < params.min_component_mm3).collect();
    for (b, &l) in mask.bits_mut().iter_mut().zip(&labels.labels) {
        if l > 0 && drop[l as usize - 1] {
            *b = false;
        }
    }
    if mask.is_clear() {
        return Err(Error::SijNotFound);
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

/// One half-slice joint rectangle resampled to a fixed pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RectSample {
    pub case: String,
    pub side: Side,
    pub z: usize,
    /// Rectangle center in world mm (x, y).
    pub center: [f64; 2],
    pub pixels: Image,
    pub grade: Option<u8>,
}

/// Patient-left is +x: voxels right of the mid plane belong to the left joint.
/// Voxels exactly on the mid plane belong to neither.
pub fn side_of(grid: &Grid, i: usize) -> Option<Side> {
    let x = i as f64 * grid.spacing[0];
    let mid = (grid.dims[0] as f64 - 1.0) / 2.0 * grid.spacing[0];
    if x > mid {
        Some(Side::Left)
    } else if x < mid {
        Some(Side::Right)
    } else {
        None
    }
}

/// Per (slice, side) centroid in world mm of set voxels, in slice order then
/// left before right.
pub fn side_centroids(mask: &BinaryMask) -> Vec<(usize, Side, [f64; 2])> {
    let g = mask.grid();
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        let s = mask.slice(z);
        let mut acc = [[0.0f64; 3]; 2];
        for j in 0..ny {
            for i in 0..nx {
                if s[j * nx + i] {
                    if let Some(side) = side_of(g, i) {
                        let a = &mut acc[side as usize];
                        a[0] += i as f64;
                        a[1] += j as f64;
                        a[2] += 1.0;
                    }
                }
            }
        }
        for side in Side::BOTH {
            let a = acc[side as usize];
            if a[2] > 0.0 {
                out.push((z, side, [a[0] / a[2] * g.spacing[0], a[1] / a[2] * g.spacing[1]]));
            }
        }
    }
    out
}

/// Resamples the rectangle centered at `center` on slice `z`.
pub fn rect_pixels(vol: &CtVolume, z: usize, center: [f64; 2], side: Side, params: &RoiParams) -> Image {
    let g = vol.grid();
    let [nx, ny, _] = g.dims;
    let slice = vol.slice(z);
    let (rows, cols) = (params.rect_rows, params.rect_cols);
    let px = params.rect_width_mm / cols as f64;
    let py = params.rect_height_mm / rows as f64;
    let read = |i: isize, j: isize| -> f64 {
        let i = i.clamp(0, nx as isize - 1) as usize;
        let j = j.clamp(0, ny as isize - 1) as usize;
        slice[j * nx + i] as f64
    };
    let mut img = Image::filled(rows, cols, 0.0);
    for r in 0..rows {
        let y = (center[1] + (r as f64 - (rows as f64 - 1.0) / 2.0) * py) / g.spacing[1];
        let (y0, fy) = (y.floor(), y - y.floor());
        for c in 0..cols {
            let x = (center[0] + (c as f64 - (cols as f64 - 1.0) / 2.0) * px) / g.spacing[0];
            let (x0, fx) = (x.floor(), x - x.floor());
            let (i0, j0) = (x0 as isize, y0 as isize);
            let top = read(i0, j0) * (1.0 - fx) + read(i0 + 1, j0) * fx;
            let bottom = read(i0, j0 + 1) * (1.0 - fx) + read(i0 + 1, j0 + 1) * fx;
            img.data[r * cols + c] = normalize_hu_f(top * (1.0 - fy) + bottom * fy);
        }
    }
    match side {
        Side::Left => img.flip_horizontal(),
        Side::Right => img,
    }
}

pub fn extract_half_slice_rects(
    vol: &CtVolume,
    refined: &BinaryMask,
    case: &str,
    params: &RoiParams,
) -> Result<Vec<RectSample>> {
    vol.grid().check_compatible(refined.grid())?;
    let centroids = side_centroids(refined);
    if centroids.is_empty() {
        return Err(Error::SijNotFound);
    }
    Ok(centroids
        .into_par_iter()
        .map(|(z, side, center)| RectSample {
            case: case.to_string(),
            side,
            z,
            center,
            pixels: rect_pixels(vol, z, center, side, params),
            grade: None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RectMeta {
    case: String,
    side: Side,
    z: usize,
    center: [f64; 2],
    grade: Option<u8>,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let (_, raw) = volume::container_paths(path);
    raw.with_extension("rects.json")
}

/// Writes rectangles as a u8 container `[cols, rows, n]` plus a JSON sidecar.
pub fn save_rect_batch(rects: &[RectSample], path: &Path) -> Result<()> {
    let first = rects.first().ok_or_else(|| Error::invalid("empty rectangle batch"))?;
    let (rows, cols) = (first.pixels.rows, first.pixels.cols);
    let grid = Grid::new([cols, rows, rects.len()], [1.0, 1.0, 1.0])?;
    let mut raw = Vec::with_capacity(grid.len());
    for r in rects {
        if (r.pixels.rows, r.pixels.cols) != (rows, cols) {
            return Err(Error::invalid("rectangles in a batch must share a size"));
        }
        raw.extend(r.pixels.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let meta: Vec<RectMeta> = rects
        .iter()
        .map(|r| RectMeta {
            case: r.case.clone(),
            side: r.side,
            z: r.z,
            center: r.center,
            grade: r.grade,
        })
        .collect();
    volume::write_container(path, &grid, Dtype::U8, &raw)?;
    volume::write_atomic(&sidecar(path), &serde_json::to_vec_pretty(&meta).expect("metadata serializes"))
}

pub fn load_rect_batch(path: &Path) -> Result<Vec<RectSample>> {
    let (grid, dtype, raw) = volume::read_container(path)?;
    if dtype != Dtype::U8 {
        return Err(Error::format(path, "rectangle batches are u8"));
    }
    let side_path = sidecar(path);
    let text = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let meta: Vec<RectMeta> = serde_json::from_slice(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let [cols, rows, n] = grid.dims;
    if meta.len() != n {
        return Err(Error::format(&side_path, "sidecar length differs from batch size"));
    }
    Ok(meta
        .into_iter()
        .zip(raw.chunks(rows * cols))
        .map(|(m, px)| RectSample {
            case: m.case,
            side: m.side,
            z: m.z,
            center: m.center,
            pixels: Image::new(rows, cols, px.iter().map(|&v| v as f32 / 255.0).collect()),
            grade: m.grade,
        })
        .collect())
}
