use sijgrade::case::{rule_case_grade, CaseGrade};
use sijgrade::forest::{train_forest, ForestParams};
use sijgrade::morphology::adaptive_skeleton_segment;
use sijgrade::phantom::{cohort_assignments, generate_cohort, generate_phantom, CohortSpec, LabelReplay, PhantomSpec};
use sijgrade::roi::{
    compute_pelvis_roi, extract_half_slice_rects, feature_rows, initial_sij_mask, refine_sij_mask, RoiParams, Side,
};
use sijgrade::volume::{BinaryMask, WorldPoint};

#[test]
fn sixty_case_cohort_is_balanced_per_joint() {
    let a = cohort_assignments(&CohortSpec::default()).unwrap();
    assert_eq!(a.len(), 60);
    for side in 0..2 {
        let mut counts = [0usize; 3];
        for pair in &a {
            counts[if side == 0 { pair.0 } else { pair.1 }.index()] += 1;
        }
        assert_eq!(counts, [20, 20, 20]);
    }
}

#[test]
fn cohort_cases_are_consistent_and_seeded() {
    let spec = CohortSpec { n: 3, seed: 1, ..Default::default() };
    let a = generate_cohort(&spec).unwrap();
    let b = generate_cohort(&CohortSpec { seed: 2, ..spec.clone() }).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_ne!(x.diagnostics.hu_checksum, y.diagnostics.hu_checksum);
    }
    for c in &a {
        for side in Side::BOTH {
            let grades: Vec<u8> = c.grades(side).to_vec();
            assert_eq!(rule_case_grade(&grades).unwrap(), c.case_grade(side), "{} {side:?}", c.id);
        }
    }
    let again = generate_cohort(&spec).unwrap();
    assert!(a.iter().zip(&again).all(|(x, y)| x.volume == y.volume && x.labels == y.labels));
}

#[test]
fn label_replay_reproduces_labels_inside_the_slab() {
    let case = generate_phantom(&PhantomSpec::default()).unwrap();
    let params = RoiParams::default();
    let skeleton = adaptive_skeleton_segment(&case.volume).mask;
    let roi = compute_pelvis_roi(&skeleton, &params).unwrap();
    let mask = initial_sij_mask(&case.volume, &roi, &LabelReplay { labels: &case.labels }, &params).unwrap();
    let [nx, ny, nz] = case.volume.grid().dims;
    let mut expected = BinaryMask::empty(*case.volume.grid());
    for z in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if case.labels.get(i, j, z) && roi.contains_slice(z) {
                    expected.set(i, j, z, true);
                }
            }
        }
    }
    assert_eq!(mask, expected);
    assert!(mask.count() > 0);

    // Any refinement forest can only remove voxels.
    let offsets: Vec<usize> = (0..case.labels.bits().len()).step_by(97).collect();
    let coccyx = WorldPoint::new(88.0, 90.0, 40.0);
    let x = feature_rows(&case.volume, &offsets, coccyx, false);
    let y: Vec<usize> = offsets.iter().map(|&o| usize::from(case.labels.bits()[o])).collect();
    let rf = train_forest(&x, &y, &ForestParams { n_trees: 3, max_depth: 6, seed: 1, ..ForestParams::default() }).unwrap();
    let refined = refine_sij_mask(&case.volume, &mask, coccyx, &rf, &params).unwrap();
    assert!(refined.is_subset_of(&mask));
}

#[test]
fn symmetric_phantom_gives_mirrored_rectangles() {
    let mut spec = PhantomSpec { symmetric: true, ..PhantomSpec::default() };
    let grades: Vec<u8> = (0..spec.left_grades.len()).map(|i| (i % 5) as u8).collect();
    spec.left_grades = grades.clone();
    spec.right_grades = grades;
    let case = generate_phantom(&spec).unwrap();
    let g = *case.volume.grid();
    let rects = extract_half_slice_rects(&case.volume, &case.labels, "sym", &RoiParams::default()).unwrap();
    let mid2 = (g.dims[0] - 1) as f64 * g.spacing[0];
    let mut pairs = 0;
    for l in rects.iter().filter(|r| r.side == Side::Left) {
        let r = rects.iter().find(|r| r.side == Side::Right && r.z == l.z).expect("right partner");
        assert!((l.center[0] + r.center[0] - mid2).abs() < 1e-6);
        assert!((l.center[1] - r.center[1]).abs() < 1e-6);
        let worst = l.pixels.data.iter().zip(&r.pixels.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "slice {}: {worst}", l.z);
        pairs += 1;
    }
    assert_eq!(pairs, spec.joint_slices());
    assert!(rects.iter().all(|r| r.pixels.data.len() == 20_000 && r.pixels.data.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn all_zero_phantom_is_healthy() {
    let case = generate_phantom(&PhantomSpec::default()).unwrap();
    assert!(case.grades(Side::Left).iter().all(|&g| g == 0));
    assert_eq!(case.case_grade(Side::Left), CaseGrade::Healthy);
    assert_eq!(case.case_grade(Side::Right), CaseGrade::Healthy);
}
