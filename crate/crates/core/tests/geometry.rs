mod common;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cotgeo::geometry::{capacity, participation_ratio, twonn_id, CapacityConfig, ConeProjector, ConeSpec};
use cotgeo::sample::{ManifoldSample, SampleMeta};
use cotgeo::synth::gen_gaussian_clusters;

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
}

fn labelled(points: Array2<f64>) -> ManifoldSample<f64> {
    let labels = (0..points.nrows()).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    ManifoldSample::new(points, labels, SampleMeta::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_matches_grid_search(seed in 0u64..10_000, k in 1usize..=3, d in 2usize..=3) {
        let gens = gaussian(k, d, seed);
        let t = gaussian(1, d, seed ^ 0xabc).row(0).to_owned();
        let p = ConeProjector::new(ConeSpec::with_default_tolerance(gens.clone()).unwrap());
        let got = p.project_sq_norm(t.view()).unwrap();
        let want = common::grid_projection_sq(gens.view(), t.view(), 50.0);
        prop_assert!((got - want).abs() <= 1e-7 * (1.0 + want), "k={k} d={d}: {got} vs {want}");
    }

    #[test]
    fn projection_is_a_contraction_onto_the_cone(seed in 0u64..10_000) {
        let gens = gaussian(4, 5, seed);
        let t = gaussian(1, 5, seed + 1).row(0).to_owned();
        let p = ConeProjector::new(ConeSpec::with_default_tolerance(gens.clone()).unwrap()).project(t.view()).unwrap();
        prop_assert!(p.coefficients.iter().all(|&c| c >= 0.0));
        let rebuilt = gens.t().dot(&p.coefficients);
        prop_assert!((&rebuilt - &p.point).mapv(f64::abs).sum() < 1e-8);
        // Moreau: the residual is orthogonal to the projection and polar to every generator.
        let r = &t - &p.point;
        prop_assert!(r.dot(&p.point).abs() < 1e-8);
        for g in gens.rows() {
            prop_assert!(g.dot(&r) <= 1e-8);
        }
        prop_assert!(p.sq_norm <= t.dot(&t) + 1e-12);
    }

    #[test]
    fn pr_matches_covariance_spectrum(seed in 0u64..10_000, n in 4usize..40, d in 1usize..8) {
        let x = gaussian(n, d, seed);
        let ev = common::covariance_eigenvalues(x.view());
        let s: f64 = ev.iter().sum();
        let s2: f64 = ev.iter().map(|l| l * l).sum();
        let got = participation_ratio(x.view()).unwrap().value;
        prop_assert!((got - s * s / s2).abs() < 1e-9 * got.max(1.0), "{got} vs {}", s * s / s2);
    }

    #[test]
    fn capacity_ignores_scale_and_point_order(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let x = gaussian(12, 6, seed);
        let cfg = CapacityConfig { n_mc: 64, seed: 7, ..Default::default() };
        let base = capacity(&labelled(x.clone()), &cfg).unwrap();
        let scaled = capacity(&labelled(x.mapv(|v| v * scale)), &cfg).unwrap();
        prop_assert!((base.alpha - scaled.alpha).abs() < 1e-8 * base.alpha);
        // Swapping two same-label rows leaves both cones unchanged.
        let mut swapped = x.clone();
        for j in 0..6 {
            swapped.swap([0, j], [2, j]);
        }
        let perm = capacity(&labelled(swapped), &cfg).unwrap();
        prop_assert!((base.alpha - perm.alpha).abs() < 1e-8 * base.alpha);
    }
}

#[test]
fn pr_of_a_two_one_one_spectrum() {
    // Axis-aligned antipodal pairs with variances in ratio 2:1:1.
    let s = [2f64.sqrt(), 1.0, 1.0];
    let mut x = Array2::zeros((6, 3));
    for (k, &a) in s.iter().enumerate() {
        x[[2 * k, k]] = a;
        x[[2 * k + 1, k]] = -a;
    }
    let pr = participation_ratio(x.view()).unwrap().value;
    assert!((pr - 16.0 / 6.0).abs() < 1e-12, "{pr}");
}

#[test]
fn pr_of_k_orthogonal_random_sign_pulses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1usize, 2, 4, 8] {
        let d = 32;
        let n = 400;
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..k {
                x[[i, j]] = if rand::Rng::random::<bool>(&mut rng) { 4.0 } else { -4.0 };
            }
            for j in 0..d {
                x[[i, j]] += 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
        let pr = participation_ratio(x.view()).unwrap().value;
        assert!(pr >= 0.8 * k as f64 && pr <= 1.3 * k as f64, "k={k}: PR {pr}");
    }
}

#[test]
fn twonn_on_a_circle_is_near_one() {
    // TwoNN assumes Poisson-like neighbours, so the angles are random rather than low-discrepancy.
    let n = 800;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let angles: Vec<f64> = (0..n).map(|_| 2.0 * std::f64::consts::PI * rand::Rng::random::<f64>(&mut rng)).collect();
    let x = Array2::from_shape_fn((n, 5), |(i, j)| {
        let th = angles[i];
        match j {
            0 => th.cos(),
            1 => th.sin(),
            _ => 0.0,
        }
    });
    let id = twonn_id(x.view()).unwrap().value;
    assert!((id - 1.0).abs() < 0.15, "{id}");
}

#[test]
fn capacity_rises_with_cluster_separation() {
    let cfg = CapacityConfig { n_mc: 300, seed: 1, ..Default::default() };
    let alphas: Vec<f64> = [0.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&sep| capacity(&gen_gaussian_clusters::<f64>(sep, 20, 40, 9).unwrap(), &cfg).unwrap().alpha)
        .collect();
    assert!(alphas.windows(2).all(|w| w[0] < w[1]), "{alphas:?}");
}

#[test]
fn single_and_double_precision_agree() {
    let s64 = gen_gaussian_clusters::<f64>(6.0, 10, 30, 2).unwrap();
    let s32 = gen_gaussian_clusters::<f32>(6.0, 10, 30, 2).unwrap();
    let cfg = CapacityConfig { n_mc: 200, seed: 4, ..Default::default() };
    let a64 = capacity(&s64, &cfg).unwrap().alpha;
    let a32 = capacity(&s32, &cfg).unwrap().alpha as f64;
    assert!((a64 - a32).abs() < 1e-3 * a64, "{a64} vs {a32}");

    let pr64 = participation_ratio(s64.points()).unwrap().value;
    let pr32 = participation_ratio(s32.points()).unwrap().value as f64;
    assert!((pr64 - pr32).abs() < 1e-4 * pr64);
}

#[test]
fn full_space_cone_gives_ambient_dimension() {
    // Generators ±e_j span the whole space, so every draw projects onto itself.
    let d = 7;
    let mut gens = Array2::zeros((2 * d, d));
    for j in 0..d {
        gens[[2 * j, j]] = 1.0;
        gens[[2 * j + 1, j]] = -1.0;
    }
    let p = ConeProjector::new(ConeSpec::with_default_tolerance(gens).unwrap());
    let t: Array1<f64> = gaussian(1, d, 5).index_axis(Axis(0), 0).to_owned();
    assert!((p.project_sq_norm(t.view()).unwrap() - t.dot(&t)).abs() < 1e-10);
}
