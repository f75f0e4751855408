//! Synthetic pelvis phantoms with ground-truth joint labels, slice grades and
//! case grades.
//!
//! Layout (lateral distance u = |x − cx|, posterior offset v = y − cy, mm):
//! the sacrum fills the medial region up to the joint line u = J(v), each
//! ilium is a slab of fixed thickness lateral to it, the joint gap between
//! them narrows with grade. Bone starts at `bone_start`; joint slices run
//! from `joint_start` to the flare slice, where both iliac wings widen the
//! pelvis abruptly. A posterior coccyx rod sits behind the lower sacrum.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{rule_case_grade, CaseGrade};
use crate::error::{Error, Result};
use crate::roi::{Side, SliceTriplet, VoxelClassifier};
use crate::rng;
use crate::volume::{BinaryMask, CtVolume, Grid, HU_MAX, HU_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Joint line offset from the mid plane at the anterior joint end.
    pub joint_offset_mm: f64,
    /// du/dv of the joint line.
    pub joint_slope: f64,
    /// Joint extent along v (posterior offset from the pelvis center).
    pub joint_v_range: [f64; 2],
    /// Pelvis center y (mm from the first row).
    pub center_y_mm: f64,
    pub ilium_thickness_mm: f64,
    pub wing_half_width_mm: f64,
    pub bone_start: usize,
    pub joint_start: usize,
    pub flare_slice: usize,
    pub wing_slices: usize,
    /// Lumbar column above the wings up to the top of the volume.
    pub spine: bool,
    pub left_grades: Vec<u8>,
    pub right_grades: Vec<u8>,
    pub gap_mm: [f64; 5],
    pub rim_hu: [f64; 5],
    pub rim_mm: f64,
    pub notch_depth_mm: f64,
    pub bridge_hu: f64,
    pub bridge_half_width_mm: f64,
    pub bone_hu_mean: f64,
    pub bone_hu_sigma: f64,
    pub soft_hu: f64,
    pub soft_hu_sigma: f64,
    pub noise_sigma: f64,
    pub body_semi_axes_mm: [f64; 2],
    pub coccyx_v_mm: f64,
    pub coccyx_radius_mm: f64,
    /// Coccyx spans `bone_start` up to (exclusive) this slice.
    pub coccyx_top: usize,
    /// Half width of the labeled band around the joint line.
    pub label_half_width_mm: f64,
    /// Mirror the right half onto the left (noise included).
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let k = 18;
        PhantomSpec {
            dims: [220, 170, 48],
            spacing: [0.8, 0.8, 2.0],
            joint_offset_mm: 18.0,
            joint_slope: 0.25,
            joint_v_range: [8.0, 38.0],
            center_y_mm: 50.0,
            ilium_thickness_mm: 22.0,
            wing_half_width_mm: 74.0,
            bone_start: 17,
            joint_start: 19,
            flare_slice: 19 + k,
            wing_slices: 5,
            spine: false,
            left_grades: vec![0; k],
            right_grades: vec![0; k],
            gap_mm: [3.0, 2.5, 2.0, 1.0, 0.0],
            rim_hu: [0.0, 0.0, 400.0, 250.0, 0.0],
            rim_mm: 3.0,
            notch_depth_mm: 1.2,
            bridge_hu: 1000.0,
            bridge_half_width_mm: 1.5,
            bone_hu_mean: 700.0,
            bone_hu_sigma: 80.0,
            soft_hu: 40.0,
            soft_hu_sigma: 15.0,
            noise_sigma: 20.0,
            body_semi_axes_mm: [85.0, 60.0],
            coccyx_v_mm: 48.0,
            coccyx_radius_mm: 4.0,
            coccyx_top: 19 + k / 2,
            label_half_width_mm: 4.0,
            symmetric: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn joint_slices(&self) -> usize {
        self.flare_slice.saturating_sub(self.joint_start)
    }

    fn center_x(&self) -> f64 {
        (self.dims[0] as f64 - 1.0) / 2.0 * self.spacing[0]
    }

    fn joint_u(&self, v: f64) -> f64 {
        let [v0, v1] = self.joint_v_range;
        self.joint_offset_mm + self.joint_slope * (v.clamp(v0, v1) - v0)
    }

    /// Lateral extent of the pelvis below the flare.
    pub fn pelvis_half_width(&self) -> f64 {
        self.joint_u(self.joint_v_range[1]) + self.ilium_thickness_mm
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        let k = self.joint_slices();
        let nz = self.dims[2];
        if !(self.bone_start <= self.joint_start && self.joint_start < self.flare_slice) {
            return Err(Error::invalid("phantom needs bone_start ≤ joint_start < flare_slice"));
        }
        if self.flare_slice + self.wing_slices.max(2) > nz {
            return Err(Error::invalid("flare and wings exceed the volume height"));
        }
        if self.left_grades.len() != k || self.right_grades.len() != k {
            return Err(Error::invalid(format!("grade vectors must have {k} entries (joint slices)")));
        }
        if self.left_grades.iter().chain(&self.right_grades).any(|&g| g > 4) {
            return Err(Error::invalid("slice grades must be in 0..=4"));
        }
        if self.gap_mm.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("joint gap must not widen with grade"));
        }
        let [a, b] = self.body_semi_axes_mm;
        let cx = self.center_x();
        let cy = self.center_y_mm;
        let body_cy = cy + 18.0;
        let fov = [self.dims[0] as f64 * self.spacing[0], self.dims[1] as f64 * self.spacing[1]];
        if cx - a < 0.0 || cx + a > fov[0] || body_cy - b < 0.0 || body_cy + b > fov[1] {
            return Err(Error::invalid("body outline exceeds the field of view"));
        }
        let reach = self.wing_half_width_mm.max(self.pelvis_half_width());
        if reach >= a || self.coccyx_v_mm + self.coccyx_radius_mm + 18.0 >= b + 18.0 {
            return Err(Error::invalid("bones exceed the body outline"));
        }
        if self.wing_half_width_mm <= 1.3 * self.pelvis_half_width() {
            return Err(Error::invalid("wings must be more than 30% wider than the pelvis below"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Soft,
    Bone,
}

/// Noise-free description of one sample point.
#[derive(Debug, Clone, Copy)]
struct Sample {
    tissue: Tissue,
    /// HU added on top of the voxel's bone value (rim sclerosis).
    bonus: f64,
    /// Replaces the bone value (bridging).
    fixed: Option<f64>,
    gap: bool,
}

const AIR: Sample = Sample {
    tissue: Tissue::Air,
    bonus: 0.0,
    fixed: None,
    gap: false,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zone {
    None,
    Lower,
    Joint,
    Wing,
    Spine,
}

struct SliceCtx<'a> {
    spec: &'a PhantomSpec,
    zone: Zone,
    coccyx: bool,
    /// Per side (left, right): grade and eroded v-intervals with the eroded
    /// bone (true = ilium side).
    grade: [u8; 2],
    notches: [Vec<(f64, f64, bool)>; 2],
}

impl SliceCtx<'_> {
    fn sample(&self, x: f64, y: f64) -> Sample {
        let s = self.spec;
        let cx = s.center_x();
        let cy = s.center_y_mm;
        let [a, b] = s.body_semi_axes_mm;
        let (dx, dy) = (x - cx, y - (cy + 18.0));
        if (dx / a).powi(2) + (dy / b).powi(2) > 1.0 {
            return AIR;
        }
        let soft = Sample { tissue: Tissue::Soft, ..AIR };
        let bone = Sample { tissue: Tissue::Bone, ..AIR };
        let u = (x - cx).abs();
        let v = y - cy;
        if self.coccyx && u.hypot(v - s.coccyx_v_mm) <= s.coccyx_radius_mm {
            return bone;
        }
        let [v0, v1] = s.joint_v_range;
        let ju = s.joint_u(v);
        match self.zone {
            Zone::None => soft,
            Zone::Spine => {
                if u.hypot(v - 10.0) <= 18.0 {
                    bone
                } else {
                    soft
                }
            }
            Zone::Wing => {
                if u <= s.wing_half_width_mm && (v0 - 14.0..=v1 + 4.0).contains(&v) {
                    bone
                } else {
                    soft
                }
            }
            Zone::Lower => {
                let sacrum = (v0..=v1 + 4.0).contains(&v) && u < ju - 6.0;
                let ilium = (v0 - 14.0..=v1).contains(&v) && u > ju + 6.0 && u < ju + s.ilium_thickness_mm;
                if sacrum || ilium {
                    bone
                } else {
                    soft
                }
            }
            Zone::Joint => {
                let side = if x > cx { 0 } else { 1 };
                let g = self.grade[side] as usize;
                let in_joint = (v0..=v1).contains(&v);
                let d = if in_joint {
                    (u - ju) / (1.0 + s.joint_slope * s.joint_slope).sqrt()
                } else {
                    u - ju
                };
                let sacrum_v = (v0..=v1 + 4.0).contains(&v);
                let ilium_v = (v0 - 14.0..=v1).contains(&v);
                let ilium_outer = u < ju + s.ilium_thickness_mm;
                if g == 4 {
                    if in_joint && d.abs() <= s.bridge_half_width_mm {
                        return Sample { fixed: Some(s.bridge_hu), ..bone };
                    }
                    let is_bone = (sacrum_v && d <= 0.0) || (ilium_v && d > 0.0 && ilium_outer);
                    return if is_bone { bone } else { soft };
                }
                let h = s.gap_mm[g] / 2.0;
                let (mut lo, mut hi) = (-h, h);
                if in_joint {
                    for &(n0, n1, ilium_side) in &self.notches[side] {
                        if (n0..=n1).contains(&v) {
                            if ilium_side {
                                hi += s.notch_depth_mm;
                            } else {
                                lo -= s.notch_depth_mm;
                            }
                        }
                    }
                }
                let is_sacrum = sacrum_v && d < lo;
                let is_ilium = ilium_v && d > hi && ilium_outer;
                if is_sacrum || is_ilium {
                    let near = if is_sacrum { lo - d } else { d - hi };
                    let bonus = if in_joint && near <= s.rim_mm { s.rim_hu[g] } else { 0.0 };
                    return Sample { bonus, ..bone };
                }
                let gap = in_joint && sacrum_v && ilium_v && d >= lo && d <= hi;
                Sample { gap, ..soft }
            }
        }
    }

    fn label(&self, x: f64, y: f64) -> bool {
        if self.zone != Zone::Joint {
            return false;
        }
        let s = self.spec;
        let u = (x - s.center_x()).abs();
        let v = y - s.center_y_mm;
        let [v0, v1] = s.joint_v_range;
        if !(v0..=v1).contains(&v) {
            return false;
        }
        let d = (u - s.joint_u(v)) / (1.0 + s.joint_slope * s.joint_slope).sqrt();
        d.abs() <= s.label_half_width_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomDiagnostics {
    pub hu_checksum: i64,
    /// Voxels with at least three of four in-plane sub-samples in bone.
    pub true_bone_voxels: usize,
    /// (threshold HU, voxels at or above it).
    pub voxels_above: Vec<(f64, usize)>,
    /// x-extent of true bone voxel centers on the slice below the flare.
    pub pelvis_width_mm: f64,
    pub flare_width_mm: f64,
    pub flare_slice: usize,
    pub bone_end_slice: Option<usize>,
    pub coccyx_center_mm: [f64; 3],
    pub joint_slices: [usize; 2],
    pub label_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: CtVolume,
    pub labels: BinaryMask,
    /// Voxels with at least three of four sub-samples in bone.
    pub bone: BinaryMask,
    pub left_grades: Vec<u8>,
    pub right_grades: Vec<u8>,
    pub left_case: CaseGrade,
    pub right_case: CaseGrade,
    pub diagnostics: PhantomDiagnostics,
    /// Per joint slice and side: mean gap width (mm) from the noise-free
    /// sub-samples.
    pub gap_widths: Vec<(Side, usize, u8, f64)>,
}

impl PhantomCase {
    pub fn grades(&self, side: Side) -> &[u8] {
        match side {
            Side::Left => &self.left_grades,
            Side::Right => &self.right_grades,
        }
    }

    pub fn case_grade(&self, side: Side) -> CaseGrade {
        match side {
            Side::Left => self.left_case,
            Side::Right => self.right_case,
        }
    }

    /// Slice grade at slice `z` for `side`, if `z` is a joint slice.
    pub fn slice_grade(&self, side: Side, z: usize) -> Option<u8> {
        let s = &self.spec;
        (s.joint_start..s.flare_slice)
            .contains(&z)
            .then(|| self.grades(side)[z - s.joint_start])
    }
}

fn notches(spec: &PhantomSpec, r: &mut ChaCha8Rng) -> Vec<(f64, f64, bool)> {
    let [v0, v1] = spec.joint_v_range;
    let len = (v1 - v0) / 6.0;
    (0..2)
        .map(|_| {
            let start = r.random_range(v0..v1 - len);
            (start, start + len, r.random_bool(0.5))
        })
        .collect()
}

const SUB: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    generate_phantom_with_id(spec, "phantom")
}

pub fn generate_phantom_with_id(spec: &PhantomSpec, id: &str) -> Result<PhantomCase> {
    spec.validate()?;
    let grid = Grid::new(spec.dims, spec.spacing)?;
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, _] = spec.spacing;
    let plane = nx * ny;
    let mut voxels = vec![0i16; grid.len()];
    let mut labels = vec![false; grid.len()];
    let mut bone = vec![false; grid.len()];
    let mut gap_counts = vec![[0usize; 2]; nz];
    let left_grades = spec.left_grades.clone();
    let right_grades = if spec.symmetric { left_grades.clone() } else { spec.right_grades.clone() };
    voxels
        .par_chunks_mut(plane)
        .zip(labels.par_chunks_mut(plane))
        .zip(bone.par_chunks_mut(plane))
        .zip(gap_counts.par_iter_mut())
        .enumerate()
        .for_each(|(z, (((vox, lab), bon), gaps))| {
            let zone = if z < spec.bone_start {
                Zone::None
            } else if z < spec.joint_start {
                Zone::Lower
            } else if z < spec.flare_slice {
                Zone::Joint
            } else if z < spec.flare_slice + spec.wing_slices {
                Zone::Wing
            } else if spec.spine {
                Zone::Spine
            } else {
                Zone::None
            };
            let (grade, notch) = if zone == Zone::Joint {
                let i = z - spec.joint_start;
                let mut nr = rng::stream(spec.seed, &[rng::key_of("notch"), z as u64]);
                let left = notches(spec, &mut nr);
                let right = if spec.symmetric { left.clone() } else { notches(spec, &mut nr) };
                ([left_grades[i], right_grades[i]], [left, right])
            } else {
                ([0, 0], [Vec::new(), Vec::new()])
            };
            let ctx = SliceCtx {
                spec,
                zone,
                coccyx: z >= spec.bone_start && z < spec.coccyx_top,
                grade,
                notches: notch,
            };
            let mut r = rng::stream(spec.seed, &[rng::key_of("voxels"), z as u64]);
            let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
            let half = if spec.symmetric { nx.div_ceil(2) } else { nx };
            for j in 0..ny {
                for i in 0..half {
                    let x = i as f64 * sx;
                    let y = j as f64 * sy;
                    let bone_hu = spec.bone_hu_mean + spec.bone_hu_sigma * normal();
                    let soft_hu = spec.soft_hu + spec.soft_hu_sigma * normal();
                    let mut acc = 0.0;
                    let mut n_bone = 0;
                    for (ox, oy) in SUB {
                        let smp = ctx.sample(x + ox * sx, y + oy * sy);
                        acc += match smp.tissue {
                            Tissue::Air => -1000.0,
                            Tissue::Soft => soft_hu,
                            Tissue::Bone => smp.fixed.unwrap_or(bone_hu + smp.bonus),
                        };
                        if smp.tissue == Tissue::Bone {
                            n_bone += 1;
                        }
                        if smp.gap {
                            gaps[usize::from(x <= spec.center_x())] += 1;
                        }
                    }
                    let hu = acc / 4.0 + spec.noise_sigma * normal();
                    let o = j * nx + i;
                    vox[o] = hu.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16;
                    bon[o] = n_bone >= 3;
                    lab[o] = ctx.label(x, y);
                }
            }
            if spec.symmetric {
                for j in 0..ny {
                    for i in half..nx {
                        let (o, m) = (j * nx + i, j * nx + (nx - 1 - i));
                        vox[o] = vox[m];
                        bon[o] = bon[m];
                        lab[o] = lab[m];
                    }
                }
                gaps[0] = gaps[1];
            }
        });
    let volume = CtVolume::new(grid, voxels)?;
    let labels = BinaryMask::from_bits(grid, labels)?;
    let bone = BinaryMask::from_bits(grid, bone)?;

    let joint_len = (spec.joint_v_range[1] - spec.joint_v_range[0]) * (1.0 + spec.joint_slope.powi(2)).sqrt();
    let sub_area = sx * sy / 4.0;
    let mut gap_widths = Vec::new();
    for z in spec.joint_start..spec.flare_slice {
        let i = z - spec.joint_start;
        for (slot, side) in Side::BOTH.into_iter().enumerate() {
            let g = if side == Side::Left { left_grades[i] } else { right_grades[i] };
            gap_widths.push((side, z, g, gap_counts[z][slot] as f64 * sub_area / joint_len));
        }
    }

    let left_case = rule_case_grade(&left_grades)?;
    let right_case = rule_case_grade(&right_grades)?;
    let diagnostics = diagnose(spec, &volume, &labels, &bone);
    Ok(PhantomCase {
        id: id.to_string(),
        spec: spec.clone(),
        volume,
        labels,
        bone,
        left_grades,
        right_grades,
        left_case,
        right_case,
        diagnostics,
        gap_widths,
    })
}

fn x_extent(mask: &BinaryMask, z: usize) -> f64 {
    let g = mask.grid();
    let nx = g.dims[0];
    let s = mask.slice(z);
    let xs = s.iter().enumerate().filter(|(_, &b)| b).map(|(o, _)| o % nx);
    match xs.clone().min().zip(xs.max()) {
        Some((lo, hi)) => (hi - lo) as f64 * g.spacing[0],
        None => 0.0,
    }
}

fn diagnose(spec: &PhantomSpec, vol: &CtVolume, labels: &BinaryMask, bone: &BinaryMask) -> PhantomDiagnostics {
    let g = vol.grid();
    let voxels_above = [150.0, 500.0]
        .iter()
        .map(|&t| (t, vol.voxels().iter().filter(|&&v| v as f64 >= t).count()))
        .collect();
    let bone_end_slice = spec.bone_start.checked_sub(1);
    let (mut cx, mut cy, mut cz, mut n) = (0.0, 0.0, 0.0, 0.0);
    let center = spec.center_x();
    for z in spec.bone_start..spec.coccyx_top {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let x = i as f64 * g.spacing[0];
                let y = j as f64 * g.spacing[1];
                if (x - center).hypot(y - spec.center_y_mm - spec.coccyx_v_mm) <= spec.coccyx_radius_mm {
                    cx += x;
                    cy += y;
                    cz += z as f64 * g.spacing[2];
                    n += 1.0;
                }
            }
        }
    }
    PhantomDiagnostics {
        hu_checksum: vol.hu_checksum(),
        true_bone_voxels: bone.count(),
        voxels_above,
        pelvis_width_mm: x_extent(bone, spec.flare_slice - 1),
        flare_width_mm: x_extent(bone, spec.flare_slice),
        flare_slice: spec.flare_slice,
        bone_end_slice,
        coccyx_center_mm: if n > 0.0 { [cx / n, cy / n, cz / n] } else { [0.0; 3] },
        joint_slices: [spec.joint_start, spec.flare_slice - 1],
        label_voxels: labels.count(),
    }
}

/// Draws a slice-grade vector of length `k` whose rule grade is `target`.
pub fn sample_grade_vector(target: CaseGrade, k: usize, r: &mut impl Rng) -> Result<Vec<u8>> {
    if k < 3 {
        return Err(Error::invalid("grade vectors need at least three slices"));
    }
    for _ in 0..10_000 {
        let mut v: Vec<u8> = (0..k).map(|_| if r.random_bool(0.55) { 0 } else { 1 }).collect();
        match target {
            CaseGrade::Healthy => {
                // Occasional singleton grade-2 slices and at most one isolated 3/4.
                for g in v.iter_mut() {
                    if r.random_bool(0.06) {
                        *g = 2;
                    }
                }
                if r.random_bool(0.15) {
                    let i = r.random_range(0..k);
                    v[i] = if r.random_bool(0.5) { 3 } else { 4 };
                }
            }
            CaseGrade::Suspicious => {
                let frac = r.random_range(0.4..=0.6);
                let want = ((frac * k as f64).round() as usize).max(1);
                let clusters = if want >= 6 && r.random_bool(0.5) { 2 } else { 1 };
                let mut left = want;
                for c in 0..clusters {
                    let len = if c + 1 == clusters { left } else { left / 2 };
                    left -= len;
                    let start = r.random_range(0..=k - len);
                    v[start..start + len].iter_mut().for_each(|g| *g = 2);
                }
                if r.random_bool(0.15) {
                    let i = r.random_range(0..k);
                    v[i] = 3;
                }
            }
            CaseGrade::Sick => {
                for g in v.iter_mut() {
                    if r.random_bool(0.15) {
                        *g = 2;
                    }
                }
                let len = r.random_range(3..=6.min(k));
                let start = r.random_range(0..=k - len);
                let high = r.random_bool(0.3);
                v[start..start + len]
                    .iter_mut()
                    .for_each(|g| *g = if high && r.random_bool(0.5) { 4 } else { 3 });
            }
        }
        if rule_case_grade(&v)? == target {
            return Ok(v);
        }
    }
    Err(Error::invalid("could not draw a grade vector for the requested case grade"))
}

/// Class counts for `n` cases under `mix` by largest remainder; ties go to the
/// lower class.
pub fn mix_counts(n: usize, mix: [f64; 3]) -> Result<[usize; 3]> {
    if mix.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("grade mix must be three proportions summing to 1"));
    }
    let raw: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[c] += 1;
        missing -= 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n: usize,
    pub mix: [f64; 3],
    pub seed: u64,
    /// Geometry every case is jittered around.
    pub base: PhantomSpec,
    pub joint_slices: [usize; 2],
    pub jitter: bool,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n: 60,
            mix: [1.0 / 3.0; 3],
            seed: 0,
            base: PhantomSpec::default(),
            joint_slices: [14, 22],
            jitter: true,
        }
    }
}

/// Per-case spec: jittered geometry and sampled grade vectors for the
/// requested left/right case grades.
pub fn case_spec(c: &CohortSpec, index: usize, left: CaseGrade, right: CaseGrade) -> Result<PhantomSpec> {
    let mut r = rng::stream(c.seed, &[rng::key_of("cohort-case"), index as u64]);
    let mut s = c.base.clone();
    s.seed = rng::derive_seed(c.seed, &[rng::key_of("case-seed"), index as u64]);
    let k = r.random_range(c.joint_slices[0]..=c.joint_slices[1]);
    if c.jitter {
        s.joint_offset_mm += r.random_range(-2.0..=2.0);
        s.joint_slope += r.random_range(-0.05..=0.05);
        s.ilium_thickness_mm += r.random_range(-2.0..=2.0);
        s.wing_half_width_mm += r.random_range(-4.0..=4.0);
        s.center_y_mm += r.random_range(-3.0..=3.0);
        s.bone_start += r.random_range(0..=2);
    }
    s.joint_start = s.bone_start + 2;
    s.flare_slice = s.joint_start + k;
    s.coccyx_top = s.joint_start + k / 2;
    s.left_grades = sample_grade_vector(left, k, &mut r)?;
    s.right_grades = sample_grade_vector(right, k, &mut r)?;
    Ok(s)
}

/// Balanced per-joint assignment of case grades (left and right shuffled
/// independently).
pub fn cohort_assignments(c: &CohortSpec) -> Result<Vec<(CaseGrade, CaseGrade)>> {
    if c.n == 0 {
        return Err(Error::invalid("cohort needs at least one case"));
    }
    let counts = mix_counts(c.n, c.mix)?;
    let pool: Vec<CaseGrade> = CaseGrade::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&g, n)| std::iter::repeat_n(g, n))
        .collect();
    let mut left = pool.clone();
    let mut right = pool;
    left.shuffle(&mut rng::stream(c.seed, &[rng::key_of("assign-left")]));
    right.shuffle(&mut rng::stream(c.seed, &[rng::key_of("assign-right")]));
    Ok(left.into_iter().zip(right).collect())
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

pub fn generate_cohort(c: &CohortSpec) -> Result<Vec<PhantomCase>> {
    let assignments = cohort_assignments(c)?;
    assignments
        .iter()
        .enumerate()
        .map(|(i, &(l, r))| generate_phantom_with_id(&case_spec(c, i, l, r)?, &case_id(i)))
        .collect()
}

/// Voxel classifier that replays a label mask.
pub struct LabelReplay<'a> {
    pub labels: &'a BinaryMask,
}

impl VoxelClassifier for LabelReplay<'_> {
    fn predict(&self, t: &SliceTriplet) -> Result<Vec<f32>> {
        let s = self.labels.slice(t.z);
        let nx = self.labels.grid().dims[0];
        let mut out = Vec::with_capacity(t.rows * t.cols);
        for j in 0..t.rows {
            for i in 0..t.cols {
                out.push(if s[(t.y0 + j) * nx + t.x0 + i] { 1.0 } else { 0.0 });
            }
        }
        Ok(out)
    }
}

/// Large phantom for timing: 512×512 in-plane, bone centered, spine above.
pub fn performance_spec(slices: usize, seed: u64) -> PhantomSpec {
    let base = PhantomSpec::default();
    let k = 18;
    let bone_start = 60;
    let joint_start = bone_start + 2;
    let mut grades = vec![0u8; k];
    grades[5..10].iter_mut().for_each(|g| *g = 3);
    PhantomSpec {
        dims: [512, 512, slices],
        center_y_mm: 512.0 * 0.8 / 2.0 - 18.0,
        body_semi_axes_mm: [150.0, 110.0],
        bone_start,
        joint_start,
        flare_slice: joint_start + k,
        coccyx_top: joint_start + k / 2,
        spine: true,
        left_grades: grades.clone(),
        right_grades: vec![0; k],
        seed,
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> PhantomSpec {
        PhantomSpec::default()
    }

    #[test]
    fn healthy_spec_is_healthy() {
        let c = generate_phantom(&small()).unwrap();
        assert_eq!(c.left_case, CaseGrade::Healthy);
        assert_eq!(c.right_case, CaseGrade::Healthy);
        assert!(c.diagnostics.label_voxels > 0);
        assert_eq!(c.diagnostics.hu_checksum, c.volume.hu_checksum());
    }

    #[test]
    fn grade_three_run_is_sick() {
        let mut s = small();
        s.left_grades[4..9].iter_mut().for_each(|g| *g = 3);
        let c = generate_phantom(&s).unwrap();
        assert_eq!(c.left_case, CaseGrade::Sick);
        assert_eq!(c.right_case, CaseGrade::Healthy);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&small()).unwrap();
        let b = generate_phantom(&small()).unwrap();
        assert_eq!(a.volume, b.volume);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut s = small();
        s.dims[2] = 30;
        assert!(generate_phantom(&s).is_err());
        let mut s = small();
        s.left_grades.pop();
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn flare_exceeds_pelvis_width() {
        let c = generate_phantom(&small()).unwrap();
        let d = &c.diagnostics;
        assert!(d.flare_width_mm > 1.3 * d.pelvis_width_mm, "{d:?}");
    }

    #[test]
    fn sampled_vectors_follow_the_rule() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for target in CaseGrade::ALL {
            for k in [14, 18, 22] {
                let v = sample_grade_vector(target, k, &mut r).unwrap();
                assert_eq!(rule_case_grade(&v).unwrap(), target);
            }
        }
    }

    #[test]
    fn mix_counts_balance() {
        assert_eq!(mix_counts(60, [1.0 / 3.0; 3]).unwrap(), [20, 20, 20]);
        assert_eq!(mix_counts(1, [1.0 / 3.0; 3]).unwrap(), [1, 0, 0]);
        assert_eq!(mix_counts(1, [0.2, 0.5, 0.3]).unwrap(), [0, 1, 0]);
        assert!(mix_counts(5, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn skeleton_and_pelvis_roi_match_construction() {
        use crate::morphology::adaptive_skeleton_segment;
        use crate::roi::{compute_pelvis_roi, RoiParams};
        let mut s = small();
        s.left_grades[2..6].iter_mut().for_each(|g| *g = 4);
        s.right_grades[3..12].iter_mut().for_each(|g| *g = 2);
        let c = generate_phantom(&s).unwrap();
        let seg = adaptive_skeleton_segment(&c.volume);
        let hit = c.bone.intersection_count(&seg.mask);
        let recall = hit as f64 / c.bone.count() as f64;
        assert!(recall >= 0.99, "recall {recall} at {}", seg.lower_hu);
        let roi = compute_pelvis_roi(&seg.mask, &RoiParams::default()).unwrap();
        assert_eq!(roi.z_top, s.flare_slice);
        let end = c.diagnostics.bone_end_slice.unwrap();
        assert_eq!(roi.z_bottom, end.saturating_sub(15));
    }

    #[test]
    fn gap_narrows_with_grade() {
        let mut s = small();
        for (i, g) in s.left_grades.iter_mut().enumerate() {
            *g = (i % 5) as u8;
        }
        let c = generate_phantom(&s).unwrap();
        let mut mean = [0.0f64; 5];
        let mut n = [0.0f64; 5];
        for &(_, _, g, w) in &c.gap_widths {
            mean[g as usize] += w;
            n[g as usize] += 1.0;
        }
        let m: Vec<f64> = mean.iter().zip(&n).map(|(a, b)| a / b).collect();
        assert!(m.windows(2).all(|w| w[1] < w[0]), "{m:?}");
    }

    #[test]
    fn symmetric_phantom_mirrors() {
        let mut s = small();
        s.symmetric = true;
        let c = generate_phantom(&s).unwrap();
        let [nx, ny, nz] = s.dims;
        for z in (0..nz).step_by(7) {
            for j in (0..ny).step_by(5) {
                for i in 0..nx {
                    assert_eq!(c.volume.get(i, j, z), c.volume.get(nx - 1 - i, j, z));
                }
            }
        }
    }
}
