use std::collections::HashSet;

use proptest::prelude::*;
use voxfill::geometry::io::read_ply;
use voxfill::geometry::{cell_of, voxelize, PointCloud};
use voxfill::partiality::*;

fn key(p: &[f64; 3]) -> [u64; 3] {
    p.map(f64::to_bits)
}

fn is_subset(part: &PointCloud, whole: &PointCloud) -> bool {
    let set: HashSet<[u64; 3]> = whole.points().iter().map(key).collect();
    part.points().iter().all(|p| set.contains(&key(p)))
}

fn lattice(lo: f64, hi: f64, steps: usize) -> Vec<[f64; 3]> {
    let at = |i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
    let mut pts = Vec::new();
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                pts.push([at(i), at(j), at(k)]);
            }
        }
    }
    pts
}

#[test]
fn single_isolated_point_is_always_visible() {
    let pc = PointCloud::new(vec![[0.3, 0.6, 0.7]]).unwrap();
    for view in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [-0.3, 0.5, -0.8], [0.0, 0.0, -1.0]] {
        assert_eq!(single_scan(&pc, view, 32).unwrap().len(), 1);
    }
}

#[test]
fn far_point_behind_gap_is_occluded() {
    // cells 4 and 12 along z at N=16
    let pc = PointCloud::new(vec![[0.5, 0.5, 0.28], [0.5, 0.5, 0.78]]).unwrap();
    let seen = single_scan(&pc, [0.0, 0.0, 1.0], 16).unwrap();
    assert_eq!(seen.points(), &[[0.5, 0.5, 0.28]]);
    let seen_back = single_scan(&pc, [0.0, 0.0, -1.0], 16).unwrap();
    assert_eq!(seen_back.points(), &[[0.5, 0.5, 0.78]]);
    // one voxel apart is within the depth tolerance
    let near = PointCloud::new(vec![[0.5, 0.5, 0.28], [0.5, 0.5, 0.34]]).unwrap();
    assert_eq!(single_scan(&near, [0.0, 0.0, 1.0], 16).unwrap().len(), 2);
}

#[test]
fn solid_cube_scan_matches_nested_loop_oracle() {
    let n = 16;
    let pc = PointCloud::new(lattice(0.21, 0.79, 30)).unwrap();
    let grid = voxelize(&pc, n).unwrap();
    let mut kept_cells = HashSet::new();
    for i in 0..n {
        for j in 0..n {
            let mut first = None;
            for k in 0..n {
                if grid.get(i, j, k) > 0.5 {
                    first = Some(k);
                    break;
                }
            }
            if let Some(f) = first {
                for k in f..n.min(f + 2) {
                    if grid.get(i, j, k) > 0.5 {
                        kept_cells.insert((i, j, k));
                    }
                }
            }
        }
    }
    let expected: Vec<[f64; 3]> = pc
        .points()
        .iter()
        .copied()
        .filter(|p| kept_cells.contains(&(cell_of(p[0], n), cell_of(p[1], n), cell_of(p[2], n))))
        .collect();
    let got = single_scan(&pc, [0.0, 0.0, 1.0], n).unwrap();
    assert_eq!(got.points(), expected.as_slice());
    assert!(got.len() < pc.len());
}

#[test]
fn crop_output_is_subset_and_deterministic() {
    let gt = gen_shape(&ShapeSpec::random(Family::Chair, 4), 2048).unwrap();
    let (a, box_a) = random_crop(&gt, 0.3, 9).unwrap();
    let (b, box_b) = random_crop(&gt, 0.3, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(box_a, box_b);
    assert!(is_subset(&a, &gt));
    assert!(a.points().iter().all(|p| !box_a.contains(p)));

    let sparse = PointCloud::new(vec![[0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.05, 0.95, 0.5]]).unwrap();
    let (s, _) = random_crop(&sparse, 0.1, 1).unwrap();
    assert!(is_subset(&s, &sparse));
}

#[test]
fn uniform_cube_half_crop_removes_about_half() {
    let pc = PointCloud::new(lattice(0.0, 1.0, 21)).unwrap();
    let mut total = 0.0;
    for seed in 0..100 {
        let (kept, _) = random_crop(&pc, 0.5, seed).unwrap();
        total += 1.0 - kept.len() as f64 / pc.len() as f64;
    }
    let mean = total / 100.0;
    assert!((0.3..=0.7).contains(&mean), "mean removed fraction {mean}");
}

#[test]
fn semantic_part_filters_and_partitions() {
    let single = PointCloud::with_labels(vec![[0.1; 3], [0.2; 3], [0.3; 3]], vec![0, 0, 0]).unwrap();
    assert_eq!(semantic_part(&single, 0).unwrap().0, single);

    let table = gen_shape(&ShapeSpec::random(Family::Table, 8), 4096).unwrap();
    let (top, kept) = semantic_part(&table, 0).unwrap();
    assert_eq!(kept, 0);
    assert!(top.labels().unwrap().iter().all(|&l| l == 0));
    let legs: usize = table.labels().unwrap().iter().filter(|&&l| l != 0).count();
    assert_eq!(top.len() + legs, table.len());

    // Exact label filter on every part partitions the cloud.
    let chair = gen_shape(&ShapeSpec::random(Family::Chair, 2), 4096).unwrap();
    let labels = chair.labels().unwrap();
    let mut union = Vec::new();
    for part in 0..6u32 {
        let filtered = chair.filter_indices(|i| labels[i] == part).unwrap();
        union.extend(filtered.points().iter().map(key));
    }
    union.sort();
    let mut all: Vec<[u64; 3]> = chair.points().iter().map(key).collect();
    all.sort();
    assert_eq!(union, all);
}

#[test]
fn small_part_falls_back_to_larger_one() {
    let table = gen_shape(&ShapeSpec::random(Family::Table, 8), 4096).unwrap();
    let (pc, kept) = semantic_part(&table, 2).unwrap();
    assert_eq!(kept, 0);
    assert!(pc.len() as f64 >= 0.2 * table.len() as f64);
    assert!(matches!(semantic_part(&table, 9), Err(PartialityError::MissingPart(9))));
    let unlabeled = PointCloud::new(vec![[0.5; 3]]).unwrap();
    assert!(matches!(semantic_part(&unlabeled, 0), Err(PartialityError::NoLabels)));
}

#[test]
fn benchmark_default_has_180_partials_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchConfig::default();
    let m = build_benchmark(&cfg, dir.path()).unwrap();
    assert_eq!(m.partials.len(), 180);
    assert_eq!(m.objects.len(), 30);
    let first = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, m);

    for obj in &m.objects {
        let gt = read_ply(&dir.path().join(&obj.gt_path)).unwrap();
        assert_eq!(gt.len(), obj.points);
        let mine: Vec<&ManifestPartial> = m.partials.iter().filter(|p| p.object == obj.id).collect();
        for pattern in Pattern::ALL {
            assert_eq!(mine.iter().filter(|p| p.pattern == pattern).count(), 2);
        }
        for entry in mine {
            let partial = read_ply(&dir.path().join(&entry.path)).unwrap();
            assert_eq!(partial.len(), entry.points);
            assert!(is_subset(&partial, &gt), "{}", entry.id);
            let r = partial.len() as f64 / gt.len() as f64;
            assert!((0.2..=0.9).contains(&r), "{} keeps {r}", entry.id);
        }
    }

    let again = tempfile::tempdir().unwrap();
    build_benchmark(&cfg, again.path()).unwrap();
    assert_eq!(std::fs::read(again.path().join("manifest.json")).unwrap(), first);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn scan_is_permutation_invariant(seed in 0u64..1000, vx in -1.0f64..1.0, vy in -1.0f64..1.0, vz in 0.1f64..1.0) {
        let gt = gen_shape(&ShapeSpec::random(Family::ALL[(seed % 5) as usize], seed), 1024).unwrap();
        let view = [vx, vy, vz];
        let scan = single_scan(&gt, view, 32).unwrap();
        let mut order: Vec<usize> = (0..gt.len()).collect();
        order.reverse();
        order.rotate_left((seed % 97) as usize);
        let shuffled = PointCloud::with_labels(
            order.iter().map(|&i| gt.points()[i]).collect(),
            order.iter().map(|&i| gt.labels().unwrap()[i]).collect(),
        ).unwrap();
        let scan2 = single_scan(&shuffled, view, 32).unwrap();
        let mut a: Vec<[u64; 3]> = scan.points().iter().map(key).collect();
        let mut b: Vec<[u64; 3]> = scan2.points().iter().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert!(is_subset(&scan, &gt));
    }
}
