//! Brute-force and Monte-Carlo oracles for the geometric primitives and
//! the quantizer, independent of the implementations they check.

use proptest::prelude::*;
use tokcomm_core::geometry::{ball_query, estimate_normals, fps, knn, FpsStart, Point};
use tokcomm_core::modulator::{make_codebook, modulate, soft_quantize, soft_quantize_var, ModulateOptions};
use tokcomm_core::Estimator;
use tokcomm_tensor::{Graph, RandomSource, Tensor};

fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn cloud(seed: u64, n: usize) -> Vec<Point> {
    let mut rng = RandomSource::new(seed);
    (0..n)
        .map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)])
        .collect()
}

fn set_distance(p: &Point, set: &[usize], pts: &[Point]) -> f64 {
    set.iter().map(|&j| d2(p, &pts[j])).fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fps_prefixes_are_greedy(seed in any::<u64>(), start in 0usize..64) {
        let pts = cloud(seed, 64);
        let picked = fps(&pts, 24, FpsStart::Index(start), &mut RandomSource::new(0)).unwrap();
        prop_assert_eq!(picked.indices[0], start);
        for m in 1..picked.len() {
            let prefix = &picked.indices[..m];
            let chosen = set_distance(&pts[picked.indices[m]], prefix, &pts);
            for i in 0..pts.len() {
                if !prefix.contains(&i) {
                    prop_assert!(set_distance(&pts[i], prefix, &pts) <= chosen);
                }
            }
        }
        let mut uniq = picked.indices.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), 24);
    }

    #[test]
    fn ball_query_matches_exhaustive_scan(seed in any::<u64>(), radius in 0.15f64..0.6, k in 1usize..12) {
        let pts = cloud(seed, 80);
        let centroids: Vec<Point> = pts[..10].to_vec();
        let table = ball_query(&pts, &centroids, radius, k).unwrap();
        for (r, c) in centroids.iter().enumerate() {
            let inside: Vec<usize> = (0..pts.len()).filter(|&i| d2(&pts[i], c) <= radius * radius).collect();
            let mut expect: Vec<usize> = inside.iter().rev().take(k).copied().collect();
            while expect.len() < k {
                expect.push(inside[0]);
            }
            prop_assert_eq!(table.row(r), expect.as_slice());
            for (j, &i) in table.row(r).iter().enumerate() {
                let rel = table.relative[r * k + j];
                for a in 0..3 {
                    prop_assert_eq!(rel[a], pts[i][a] - c[a]);
                }
            }
        }
    }

    #[test]
    fn knn_matches_exhaustive_scan(seed in any::<u64>(), k in 1usize..20) {
        let reference = cloud(seed, 40);
        let queries = cloud(seed ^ 0x5555, 12);
        let table = knn(&queries, &reference, k).unwrap();
        for (r, q) in queries.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, p)| (d2(p, q), i)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
            prop_assert_eq!(table.row(r), expect.as_slice());
        }
    }

    #[test]
    fn soft_quantizer_derivative_matches_finite_differences(z in -1.3f64..1.3, t in 0.1f64..2.0) {
        let cb = make_codebook(16).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1], vec![z]).unwrap());
        let y = soft_quantize_var(&mut g, x, &cb, t).unwrap();
        prop_assert!((g.value(y).item() - soft_quantize(z, &cb, t).unwrap()).abs() < 1e-12);
        let ana = g.backward(y).unwrap().wrt(&g, x).unwrap().item();
        let h = 1e-5;
        let num = (soft_quantize(z + h, &cb, t).unwrap() - soft_quantize(z - h, &cb, t).unwrap()) / (2.0 * h);
        prop_assert!((ana - num).abs() <= 1e-5 * ana.abs().max(num.abs()).max(1e-6), "{} vs {}", ana, num);
    }
}

#[test]
fn sphere_normals_are_radial() {
    let mut rng = RandomSource::new(7);
    let pts: Vec<Point> = (0..500)
        .map(|_| {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect();
    let c = tokcomm_core::PointCloud::new(pts.clone()).unwrap();
    let est = estimate_normals(&c, 8).unwrap();
    let mut cos: Vec<f64> = est
        .cloud
        .normals()
        .unwrap()
        .iter()
        .zip(&pts)
        .map(|(n, p)| (n[0] * p[0] + n[1] * p[1] + n[2] * p[2]).abs())
        .collect();
    cos.sort_by(f64::total_cmp);
    assert!(cos[cos.len() / 2] > 0.95, "median |cos| {}", cos[cos.len() / 2]);
}

/// Grid frequencies of hard symbols from all-zero logits with Gumbel noise.
fn uniform_logit_histogram(t: f64, draws: usize) -> Vec<f64> {
    let cb = make_codebook(16).unwrap();
    let mut rng = RandomSource::new(99);
    let mut g = Graph::new();
    let y = g.input(Tensor::zeros(&[draws, 2 * cb.side()]));
    let s = modulate(&mut g, y, &cb, &ModulateOptions::new(Estimator::GumbelSoftq, t), &mut rng).unwrap();
    let v = g.value(s);
    let level = |x: f64| cb.levels.iter().position(|&c| c == x).unwrap();
    let mut counts = vec![0.0; 16];
    for r in 0..draws {
        counts[level(v.get2(r, 0)) * 4 + level(v.get2(r, 1))] += 1.0;
    }
    counts.iter().map(|c| c / draws as f64).collect()
}

#[test]
fn uniform_logits_give_near_uniform_grid_at_low_temperature() {
    let draws = 100_000;
    let freq = uniform_logit_histogram(0.01, draws);
    let chi2: f64 = freq
        .iter()
        .map(|f| {
            let e = 1.0 / 16.0;
            draws as f64 * (f - e).powi(2) / e
        })
        .sum();
    // 15 degrees of freedom; 30.58 is the 1% critical value.
    assert!(chi2 < 30.58, "chi2 {chi2}, freq {freq:?}");
}

#[test]
fn warm_relaxation_concentrates_on_inner_levels() {
    let freq = uniform_logit_histogram(1.5, 20_000);
    // Indices 5, 6, 9, 10 are the four inner points of the 4x4 grid.
    let inner: f64 = [5, 6, 9, 10].iter().map(|&i| freq[i]).sum();
    assert!(inner > 0.9, "inner mass {inner}");
}
