//! Volumetric primitives: thresholding, 26-connected labeling, axis-wise
//! closing, per-slice convex hulls, and the adaptive skeleton segmentation
//! built from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{bounding_box_of, BinaryMask, CtVolume, Grid};

/// Voxels with `lo <= HU <= hi`.
pub fn threshold_mask(vol: &CtVolume, lo: f64, hi: f64) -> Result<BinaryMask> {
    if lo > hi {
        return Err(Error::invalid(format!("threshold lo {lo} > hi {hi}")));
    }
    let bits = vol
        .voxels()
        .iter()
        .map(|&v| {
            let v = v as f64;
            lo <= v && v <= hi
        })
        .collect();
    BinaryMask::from_bits(*vol.grid(), bits)
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// Component labeling aligned to a grid. Label 0 is background; labels are
/// numbered in first-encounter order of an x-fastest scan.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub grid: Grid,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[l - 1]` is the voxel count of label `l`.
    pub sizes: Vec<usize>,
}

impl LabelGrid {
    pub fn size_of(&self, label: u32) -> usize {
        self.sizes[label as usize - 1]
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    #[inline]
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    #[inline]
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return ra;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Provisional 26-connected labeling of the box `[lo, hi]` (inclusive).
/// `set` takes a global grid offset. Returns per-box-voxel provisional labels
/// and the union-find forest over them.
fn label_box(
    grid: &Grid,
    lo: [usize; 3],
    hi: [usize; 3],
    set: impl Fn(usize) -> bool,
) -> (Vec<u32>, UnionFind) {
    let bx = hi[0] - lo[0] + 1;
    let by = hi[1] - lo[1] + 1;
    let bz = hi[2] - lo[2] + 1;
    let mut labels = vec![0u32; bx * by * bz];
    let mut uf = UnionFind::new();
    let bxy = bx * by;
    for z in 0..bz {
        for y in 0..by {
            let g_row = grid.offset(lo[0], lo[1] + y, lo[2] + z);
            let b_row = (y + by * z) * bx;
            for x in 0..bx {
                if !set(g_row + x) {
                    continue;
                }
                let mut current = 0u32;
                let mut visit = |l: u32, uf: &mut UnionFind| {
                    if l != 0 {
                        current = if current == 0 { l } else { uf.union(current, l) };
                    }
                };
                let x_lo = x.saturating_sub(1);
                let x_hi = (x + 1).min(bx - 1);
                if z > 0 {
                    let y_lo = y.saturating_sub(1);
                    let y_hi = (y + 1).min(by - 1);
                    for yy in y_lo..=y_hi {
                        let base = (z - 1) * bxy + yy * bx;
                        for xx in x_lo..=x_hi {
                            visit(labels[base + xx], &mut uf);
                        }
                    }
                }
                if y > 0 {
                    let base = z * bxy + (y - 1) * bx;
                    for xx in x_lo..=x_hi {
                        visit(labels[base + xx], &mut uf);
                    }
                }
                if x > 0 {
                    visit(labels[b_row + x - 1], &mut uf);
                }
                labels[b_row + x] = if current == 0 { uf.make() } else { current };
            }
        }
    }
    (labels, uf)
}

/// Number of 26-connected components of `set` inside the inclusive box.
pub(crate) fn count_components_in_box(
    grid: &Grid,
    lo: [usize; 3],
    hi: [usize; 3],
    set: impl Fn(usize) -> bool,
) -> usize {
    let (_, mut uf) = label_box(grid, lo, hi, set);
    (1..uf.parent.len() as u32).filter(|&l| uf.find(l) == l).count()
}

/// 26-connected component labeling.
pub fn connected_components(mask: &BinaryMask) -> LabelGrid {
    let grid = *mask.grid();
    let mut labels = vec![0u32; grid.len()];
    let Some((lo, hi)) = mask.bounding_box() else {
        return LabelGrid {
            grid,
            labels,
            count: 0,
            sizes: Vec::new(),
        };
    };
    let bits = mask.bits();
    let (box_labels, mut uf) = label_box(&grid, lo, hi, |o| bits[o]);
    let bx = hi[0] - lo[0] + 1;
    let by = hi[1] - lo[1] + 1;
    let mut final_of_root = vec![0u32; uf.parent.len()];
    let mut sizes = Vec::new();
    for (b, &l) in box_labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let root = uf.find(l) as usize;
        if final_of_root[root] == 0 {
            sizes.push(0);
            final_of_root[root] = sizes.len() as u32;
        }
        let f = final_of_root[root];
        sizes[f as usize - 1] += 1;
        let x = b % bx;
        let y = (b / bx) % by;
        let z = b / (bx * by);
        labels[grid.offset(lo[0] + x, lo[1] + y, lo[2] + z)] = f;
    }
    LabelGrid {
        grid,
        labels,
        count: sizes.len(),
        sizes,
    }
}

// ---------------------------------------------------------------------------
// Closing
// ---------------------------------------------------------------------------

/// Sequential 1-D closings along x, then y, then z with a centered line
/// element of `diameter` voxels.
///
/// The closing is evaluated on the zero-extended line, so it fills every run
/// of clear voxels of length `<= diameter - 1` that is bounded by set voxels
/// on both sides, and nothing else.
pub fn close_mask(mask: &BinaryMask, diameter: usize) -> Result<BinaryMask> {
    if diameter == 0 || diameter.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "closing diameter must be odd and >= 1, got {diameter}"
        )));
    }
    let mut out = mask.clone();
    if diameter == 1 {
        return Ok(out);
    }
    let Some((lo, hi)) = mask.bounding_box() else {
        return Ok(out);
    };
    let max_gap = diameter - 1;
    for axis in 0..3 {
        close_axis(&mut out, axis, max_gap, lo, hi);
    }
    Ok(out)
}

/// 1-D closing of every line along `axis` inside the box. Fills behind the
/// sweep front only, so gap detection always sees the pre-pass state.
fn close_axis(mask: &mut BinaryMask, axis: usize, max_gap: usize, lo: [usize; 3], hi: [usize; 3]) {
    let grid = *mask.grid();
    let [nx, ny, _] = grid.dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    // The two axes orthogonal to `axis` index the lines; `last` holds the
    // position (along `axis`) of the most recent set voxel on each line.
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let wa = hi[a] - lo[a] + 1;
    let wb = hi[b] - lo[b] + 1;
    let mut last = vec![usize::MAX; wa * wb];
    let bits = mask.bits_mut();
    // Sweep the axis in the outer loop so that the line state streams.
    for t in lo[axis]..=hi[axis] {
        for vb in 0..wb {
            for va in 0..wa {
                let mut c = [0usize; 3];
                c[axis] = t;
                c[a] = lo[a] + va;
                c[b] = lo[b] + vb;
                let o = grid.offset(c[0], c[1], c[2]);
                if !bits[o] {
                    continue;
                }
                let slot = &mut last[va + wa * vb];
                if *slot != usize::MAX {
                    let gap = t - *slot - 1;
                    if gap > 0 && gap <= max_gap {
                        for s in 1..=gap {
                            bits[o - s * stride] = true;
                        }
                    }
                }
                *slot = t;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Adaptive skeleton segmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SkeletonParams {
    pub lower_min_hu: f64,
    pub lower_max_hu: f64,
    pub n_candidates: usize,
    pub upper_hu: f64,
    pub closing_diameter: usize,
}

impl Default for SkeletonParams {
    fn default() -> Self {
        SkeletonParams {
            lower_min_hu: 150.0,
            lower_max_hu: 500.0,
            n_candidates: 22,
            upper_hu: 1300.0,
            closing_diameter: 7,
        }
    }
}

impl SkeletonParams {
    /// Evenly spaced lower thresholds, both endpoints included.
    pub fn candidates(&self) -> Vec<f64> {
        let n = self.n_candidates;
        if n == 1 {
            return vec![self.lower_min_hu];
        }
        let step = (self.lower_max_hu - self.lower_min_hu) / (n - 1) as f64;
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    self.lower_max_hu
                } else {
                    self.lower_min_hu + step * i as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SkeletonSegmentation {
    pub lower_hu: f64,
    pub mask: BinaryMask,
    /// `(candidate, component count)` for every evaluated candidate.
    pub candidate_counts: Vec<(f64, usize)>,
}

pub fn adaptive_skeleton_segment(vol: &CtVolume) -> SkeletonSegmentation {
    adaptive_skeleton_segment_with(vol, &SkeletonParams::default())
        .expect("default skeleton parameters are valid")
}

/// Picks the candidate lower threshold with the fewest components of the raw
/// thresholded mask (ties to the smallest candidate), then closes the mask.
pub fn adaptive_skeleton_segment_with(
    vol: &CtVolume,
    params: &SkeletonParams,
) -> Result<SkeletonSegmentation> {
    if params.n_candidates == 0 || params.lower_min_hu > params.lower_max_hu {
        return Err(Error::invalid("empty candidate threshold range"));
    }
    if params.lower_max_hu > params.upper_hu {
        return Err(Error::invalid("candidate thresholds exceed the upper HU"));
    }
    let candidates = params.candidates();
    let grid = *vol.grid();
    let voxels = vol.voxels();
    let upper = params.upper_hu;
    let floor = params.lower_min_hu;
    let bbox = bounding_box_of(&grid, |o| {
        let v = voxels[o] as f64;
        floor <= v && v <= upper
    });
    let counts: Vec<usize> = candidates
        .par_iter()
        .map(|&c| match bbox {
            None => 0,
            Some((lo, hi)) => count_components_in_box(&grid, lo, hi, |o| {
                let v = voxels[o] as f64;
                c <= v && v <= upper
            }),
        })
        .collect();
    let best = counts
        .iter()
        .enumerate()
        .min_by_key(|&(i, &n)| (n, i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lower = candidates[best];
    let raw = threshold_mask(vol, lower, upper)?;
    let mask = close_mask(&raw, params.closing_diameter)?;
    Ok(SkeletonSegmentation {
        lower_hu: lower,
        mask,
        candidate_counts: candidates.into_iter().zip(counts).collect(),
    })
}

// ---------------------------------------------------------------------------
// Planar geometry
// ---------------------------------------------------------------------------

/// Convex polygon in one axial plane (mm), counter-clockwise. Fewer than three
/// vertices means a degenerate hull that carries its points as-is.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polygon2D {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3
    }
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear boundary points are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Polygon2D {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Polygon2D { vertices: pts };
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    Polygon2D { vertices: hull }
}

/// Convex hull of the world (x, y) centers of set voxels in slice `z`.
pub fn slice_convex_hull(mask: &BinaryMask, z: usize) -> Result<Polygon2D> {
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims;
    if z >= nz {
        return Err(Error::invalid(format!("slice {z} out of range 0..{nz}")));
    }
    let bits = mask.slice(z);
    let (sx, sy) = (grid.spacing[0], grid.spacing[1]);
    let mut pts = Vec::new();
    // Only the row extremes can be hull vertices.
    for j in 0..ny {
        let row = &bits[j * nx..(j + 1) * nx];
        if let Some(first) = row.iter().position(|&b| b) {
            let last = row.iter().rposition(|&b| b).unwrap();
            pts.push([first as f64 * sx, j as f64 * sy]);
            if last != first {
                pts.push([last as f64 * sx, j as f64 * sy]);
            }
        }
    }
    if pts.len() < 3 {
        // Fewer than three voxels: carry the points through.
        let count = bits.iter().filter(|&&b| b).count();
        if count < 3 {
            return Ok(Polygon2D { vertices: pts });
        }
    }
    Ok(convex_hull(&pts))
}

/// Left-right (x) extent of a polygon.
pub fn hull_width(poly: &Polygon2D) -> f64 {
    let mut it = poly.vertices.iter().map(|v| v[0]);
    match it.next() {
        None => 0.0,
        Some(first) => {
            let (lo, hi) = it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
            hi - lo
        }
    }
}

const GEOM_EPS: f64 = 1e-9;

/// Inside-or-on-boundary test for a convex CCW polygon. Degenerate polygons
/// only contain their own points (one vertex) or segment (two vertices).
pub fn point_in_polygon(poly: &Polygon2D, p: [f64; 2]) -> bool {
    let v = &poly.vertices;
    match v.len() {
        0 => false,
        1 => (v[0][0] - p[0]).abs() <= GEOM_EPS && (v[0][1] - p[1]).abs() <= GEOM_EPS,
        2 => {
            let (a, b) = (v[0], v[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if cross(a, b, p).abs() > GEOM_EPS * len.max(1.0) {
                return false;
            }
            let dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]);
            dot >= -GEOM_EPS && dot <= len * len + GEOM_EPS
        }
        n => (0..n).all(|i| {
            let a = v[i];
            let b = v[(i + 1) % n];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cross(a, b, p) >= -GEOM_EPS * len.max(1.0)
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::CtVolume;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [1.0; 3]).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let g = grid([4, 4, 4]);
        let air = CtVolume::filled(g, -1000).unwrap();
        assert!(threshold_mask(&air, 150.0, 1300.0).unwrap().is_clear());
        let vals: Vec<i16> = (0..64).map(|i| i as i16 * 10 - 300).collect();
        let v = CtVolume::new(g, vals).unwrap();
        assert_eq!(threshold_mask(&v, -300.0, 330.0).unwrap().count(), 64);
        assert!(threshold_mask(&v, 1.0, 0.0).is_err());
        // Bounds are inclusive.
        assert_eq!(threshold_mask(&v, 0.0, 0.0).unwrap().count(), 1);
    }

    #[test]
    fn components_examples() {
        let g = grid([6, 6, 6]);
        let empty = BinaryMask::empty(g);
        assert_eq!(connected_components(&empty).count, 0);
        let mut m = BinaryMask::empty(g);
        m.set(0, 0, 0, true);
        m.set(5, 5, 5, true);
        let lg = connected_components(&m);
        assert_eq!(lg.count, 2);
        assert_eq!(lg.sizes, vec![1, 1]);
        // Corner-diagonal neighbors are connected.
        m.set(1, 1, 1, true);
        m.set(4, 4, 4, true);
        assert_eq!(connected_components(&m).count, 2);
        m.set(2, 2, 2, true);
        m.set(3, 3, 3, true);
        assert_eq!(connected_components(&m).count, 1);
    }

    #[test]
    fn labels_follow_scan_order() {
        let g = grid([5, 1, 1]);
        let m = BinaryMask::from_bits(g, vec![true, false, true, true, false]).unwrap();
        let lg = connected_components(&m);
        assert_eq!(lg.labels, vec![1, 0, 2, 2, 0]);
        assert_eq!(lg.sizes, vec![1, 2]);
    }

    #[test]
    fn closing_examples() {
        let g = grid([9, 3, 3]);
        let mut m = BinaryMask::empty(g);
        for i in [1, 2, 3, 5, 6] {
            m.set(i, 1, 1, true);
        }
        assert_eq!(close_mask(&m, 1).unwrap(), m);
        let c = close_mask(&m, 3).unwrap();
        assert!(c.get(4, 1, 1));
        assert_eq!(c.count(), 6);
        assert!(close_mask(&m, 4).is_err());
        assert!(close_mask(&m, 0).is_err());
    }

    #[test]
    fn closing_gap_limit() {
        let g = grid([12, 1, 1]);
        let mut m = BinaryMask::empty(g);
        m.set(0, 0, 0, true);
        m.set(7, 0, 0, true); // gap of 6
        m.set(11, 0, 0, true); // gap of 3
        let c = close_mask(&m, 7).unwrap();
        assert_eq!(c.count(), 12);
        let c = close_mask(&m, 5).unwrap();
        assert_eq!(c.count(), 3 + 3);
        // Border gaps are never filled.
        let mut m = BinaryMask::empty(g);
        m.set(2, 0, 0, true);
        assert_eq!(close_mask(&m, 7).unwrap(), m);
    }

    #[test]
    fn skeleton_on_air_ties_to_lowest() {
        let v = CtVolume::filled(grid([5, 5, 5]), -1000).unwrap();
        let s = adaptive_skeleton_segment(&v);
        assert_eq!(s.lower_hu, 150.0);
        assert!(s.mask.is_clear());
        assert_eq!(s.candidate_counts.len(), 22);
    }

    #[test]
    fn candidate_spacing() {
        let c = SkeletonParams::default().candidates();
        assert_eq!(c.len(), 22);
        assert_eq!(c[0], 150.0);
        assert_eq!(c[21], 500.0);
        assert!((c[1] - (150.0 + 350.0 / 21.0)).abs() < 1e-12);
    }

    #[test]
    fn hull_examples() {
        let g = grid([10, 10, 1]);
        let mut m = BinaryMask::empty(g);
        m.set(1, 1, 0, true);
        m.set(6, 1, 0, true);
        m.set(2, 5, 0, true);
        let h = slice_convex_hull(&m, 0).unwrap();
        assert_eq!(h.vertices.len(), 3);
        assert!(cross(h.vertices[0], h.vertices[1], h.vertices[2]) > 0.0);
        assert!(slice_convex_hull(&m, 1).is_err());

        let g = Grid::new([12, 12, 1], [0.5, 0.8, 1.0]).unwrap();
        let mut m = BinaryMask::empty(g);
        for i in 2..9 {
            for j in 3..7 {
                m.set(i, j, 0, true);
            }
        }
        let h = slice_convex_hull(&m, 0).unwrap();
        assert_eq!(h.vertices.len(), 4);
        assert!((hull_width(&h) - 6.0 * 0.5).abs() < 1e-12);
        let ys: Vec<f64> = h.vertices.iter().map(|v| v[1]).collect();
        let ext = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!((ext - 3.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn hull_degenerate_inputs() {
        let g = grid([10, 10, 1]);
        let mut m = BinaryMask::empty(g);
        assert!(slice_convex_hull(&m, 0).unwrap().vertices.is_empty());
        m.set(3, 3, 0, true);
        let h = slice_convex_hull(&m, 0).unwrap();
        assert_eq!(h.vertices, vec![[3.0, 3.0]]);
        assert_eq!(hull_width(&h), 0.0);
        assert!(point_in_polygon(&h, [3.0, 3.0]));
        assert!(!point_in_polygon(&h, [3.0, 3.5]));
    }

    #[test]
    fn width_and_membership() {
        assert_eq!(hull_width(&Polygon2D::default()), 0.0);
        let seg = Polygon2D {
            vertices: vec![[0.0, 0.0], [37.5, 0.0]],
        };
        assert_eq!(hull_width(&seg), 37.5);
        assert!(point_in_polygon(&seg, [10.0, 0.0]));
        assert!(!point_in_polygon(&seg, [40.0, 0.0]));
        let tri = convex_hull(&[[0.0, 0.0], [6.0, 0.0], [0.0, 3.0]]);
        assert!(point_in_polygon(&tri, [2.0, 1.0]));
        assert!(point_in_polygon(&tri, [3.0, 0.0]));
        assert!(!point_in_polygon(&tri, [7.0, 0.0]));
        assert!(!point_in_polygon(&tri, [-1.0, -1.0]));
    }
}
