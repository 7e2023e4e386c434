use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfill::geometry::{Point, PointCloud};
use voxfill::metrics::*;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn d(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn brute_directed(x: &[Point], y: &[Point]) -> Vec<f64> {
    x.iter()
        .map(|a| y.iter().map(|b| d(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn brute_chamfer(x: &[Point], y: &[Point]) -> f64 {
    let m = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (m(brute_directed(x, y)) + m(brute_directed(y, x)))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn chamfer_trivial_cases() {
    let x = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
    let y = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(chamfer(&x, &y, None).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cloud(&mut rng, 300);
    assert_eq!(chamfer(&c, &c, Some(CHAMFER_SAMPLES)).unwrap(), 0.0);
}

#[test]
fn chamfer_matches_brute_force_on_200_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let (nx, ny) = (rng.random_range(1..120), rng.random_range(1..120));
        let (x, y) = if i % 4 == 0 {
            // clustered clouds exercise far-away grid queries
            let a = cloud(&mut rng, nx).map_points(|p| p.map(|c| c * 0.05));
            (a, cloud(&mut rng, ny))
        } else {
            (cloud(&mut rng, nx), cloud(&mut rng, ny))
        };
        let got = chamfer(&x, &y, None).unwrap();
        let want = brute_chamfer(x.points(), y.points());
        assert!((got - want).abs() < 1e-9, "pair {i}: {got} vs {want}");
        assert_eq!(got, chamfer(&y, &x, None).unwrap());
    }
}

#[test]
fn nn_index_is_exact_for_outside_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = cloud(&mut rng, 500);
    let queries = cloud(&mut rng, 200).map_points(|p| p.map(|c| c * 3.0 - 1.0));
    let idx = NnIndex::new(pts.points(), [-1.0; 3], [2.0; 3]);
    for q in queries.points() {
        let want = pts.points().iter().map(|p| d(p, q).powi(2)).fold(f64::INFINITY, f64::min);
        assert!((idx.nearest_dist2(q) - want).abs() < 1e-12);
    }
}

#[test]
fn emd_matches_factorial_enumeration() {
    let perms = permutations(8);
    assert_eq!(perms.len(), 40320);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (x, y) = (cloud(&mut rng, 8), cloud(&mut rng, 8));
        let best = perms
            .iter()
            .map(|p| (0..8).map(|i| d(&x.points()[i], &y.points()[p[i]])).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / 8.0;
        let got = emd(&x, &y, None).unwrap();
        assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        assert!((emd(&y, &x, None).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn emd_trivial_cases_and_errors() {
    let x = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let y = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(emd(&x, &y, None).unwrap(), 0.0);
    assert_eq!(emd(&x, &x, Some(EMD_SAMPLES)).unwrap(), 0.0);
    let z = PointCloud::new(vec![[0.5; 3]]).unwrap();
    assert_eq!(emd(&x, &z, None), Err(MetricError::SizeMismatch(2, 1)));
    assert!(emd(&x, &z, Some(8)).is_ok());
}

#[test]
fn emd_dominates_directed_chamfer_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (x, y) = (cloud(&mut rng, 64), cloud(&mut rng, 64));
        let e = emd(&x, &y, None).unwrap();
        let fwd = ucd_uhd(&x, &y).unwrap().0;
        let bwd = ucd_uhd(&y, &x).unwrap().0;
        assert!(e + 1e-12 >= fwd.max(bwd));
    }
}

#[test]
fn ucd_uhd_cases() {
    let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
    let c = PointCloud::new(vec![[0.0, 0.0, 3.0], [0.0, 4.0, 0.0]]).unwrap();
    assert_eq!(ucd_uhd(&p, &c).unwrap(), (3.0, 3.0));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let full = cloud(&mut rng, 400);
    let sub = full.filter_indices(|i| i % 3 == 0).unwrap();
    assert_eq!(ucd_uhd(&sub, &full).unwrap(), (0.0, 0.0));
    for _ in 0..100 {
        let (a, b) = (cloud(&mut rng, 30), cloud(&mut rng, 40));
        let (ucd, uhd) = ucd_uhd(&a, &b).unwrap();
        assert!(uhd >= ucd && ucd >= 0.0);
    }
    assert!(PointCloud::new(vec![]).is_err());
}

#[test]
fn mmd_and_tmd_match_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = cloud(&mut rng, 80);
    let comps: Vec<PointCloud> = (0..5).map(|_| cloud(&mut rng, 60)).collect();
    let direct = comps
        .iter()
        .map(|c| chamfer(c, &gt, None).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(mmd(&comps, &gt, None).unwrap(), direct);
    assert_eq!(mmd(&comps[..1], &gt, None).unwrap(), chamfer(&comps[0], &gt, None).unwrap());
    let mut with_gt = comps.clone();
    with_gt.push(gt.clone());
    assert_eq!(mmd(&with_gt, &gt, None).unwrap(), 0.0);

    let four = &comps[..4];
    let mut pairs = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            pairs.push(chamfer(&four[i], &four[j], None).unwrap());
        }
    }
    assert_eq!(pairs.len(), 6);
    let mean = pairs.iter().sum::<f64>() / 6.0;
    assert!((tmd(four, None).unwrap() - mean).abs() < 1e-15);
    assert_eq!(tmd(&comps[..2], None).unwrap(), chamfer(&comps[0], &comps[1], None).unwrap());
    assert_eq!(tmd(&[gt.clone(), gt.clone(), gt.clone()], None).unwrap(), 0.0);
    assert!(matches!(tmd(&comps[..1], None), Err(MetricError::TooFewCompletions { .. })));
    assert!(matches!(mmd(&[], &gt, None), Err(MetricError::TooFewCompletions { .. })));
}

#[test]
fn metrics_are_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = (cloud(&mut rng, 100), cloud(&mut rng, 90));
    let shift = |pc: &PointCloud| pc.map_points(|p| [p[0] + 0.25, p[1] - 0.5, p[2] + 0.125]);
    let (xs, ys) = (shift(&x), shift(&y));
    assert!((chamfer(&x, &y, Some(64)).unwrap() - chamfer(&xs, &ys, Some(64)).unwrap()).abs() < 1e-9);
    assert!((emd(&x, &y, Some(64)).unwrap() - emd(&xs, &ys, Some(64)).unwrap()).abs() < 1e-9);
    let (a, b) = (ucd_uhd(&x, &y).unwrap(), ucd_uhd(&xs, &ys).unwrap());
    assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
}

#[test]
fn farthest_point_sampling_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pc = cloud(&mut rng, 1000);
    let a = farthest_point_sample(pc.points(), 100);
    assert_eq!(a, farthest_point_sample(pc.points(), 100));
    let lex = pc
        .points()
        .iter()
        .copied()
        .min_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2])))
        .unwrap();
    assert_eq!(a[0], lex);
    let mut sorted = a.clone();
    sorted.sort_by(|p, q| p.partial_cmp(q).unwrap());
    sorted.dedup();
    assert_eq!(sorted.len(), 100);
    assert_eq!(farthest_point_sample(pc.points(), 5000).len(), 1000);
}

#[test]
fn report_scales_follow_display_convention() {
    assert_eq!(Metric::Cd.display_scale(), 100.0);
    assert_eq!(Metric::Ucd.display_scale(), 10000.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = cloud(&mut rng, 500);
    let partial = gt.filter_indices(|i| i < 200).unwrap();
    let r = MetricReport::single(&gt, &gt, &partial).unwrap();
    assert_eq!((r.cd, r.emd, r.ucd, r.uhd), (0.0, 0.0, 0.0, 0.0));
}
