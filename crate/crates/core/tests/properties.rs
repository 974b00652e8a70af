use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use proptest::prelude::*;

use penalty_mc::bsde_solver::{regress, RegressionBasis};
use penalty_mc::diagnostics::upcrossings;
use penalty_mc::forward_sim::step_penalized;
use penalty_mc::geometry::ConvexDomain;
use penalty_mc::harness::parse_config;
use penalty_mc::problems::builtin;
use penalty_mc::rng::Stream;

fn domains() -> Vec<ConvexDomain> {
    vec![
        ConvexDomain::interval(0.0, 1.0).unwrap(),
        ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap(),
        ConvexDomain::cube(vec![-1.0, 0.0, 0.5], vec![1.0, 2.0, 1.5]).unwrap(),
        ConvexDomain::halfspaces(
            vec![
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
                vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            ],
            vec![0.0, 0.0, FRAC_1_SQRT_2],
        )
        .unwrap(),
    ]
}

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, dim)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_lands_inside_and_is_idempotent(which in 0usize..4, seed in any::<u64>()) {
        let domain = &domains()[which];
        let mut s = Stream::auxiliary(seed, 0);
        let x: Vec<f64> = (0..domain.dim()).map(|_| s.uniform_in(-4.0, 4.0)).collect();
        let p = domain.project(&x).unwrap();
        prop_assert!(domain.distance(&p).unwrap() <= 1e-12);
        let pp = domain.project(&p).unwrap();
        prop_assert!(dist(&p, &pp) <= 1e-12);
        if domain.contains(&x) {
            prop_assert!(dist(&x, &p) <= 1e-12);
        }
    }

    #[test]
    fn projection_is_nonexpansive_and_penalty_is_monotone(x in point(2), y in point(2)) {
        for domain in domains().iter().filter(|d| d.dim() == 2) {
            let (px, py) = (domain.project(&x).unwrap(), domain.project(&y).unwrap());
            prop_assert!(dist(&px, &py) <= dist(&x, &y) * (1.0 + 1e-9) + 1e-12);
            let (dx, dy) = (domain.penalty_delta(&x).unwrap(), domain.penalty_delta(&y).unwrap());
            let inner: f64 = x.iter().zip(&y).zip(dx.iter().zip(&dy)).map(|((a, b), (c, d))| (a - b) * (c - d)).sum();
            prop_assert!(inner >= -1e-12);
        }
    }

    #[test]
    fn penalty_points_away_from_domain_points(x in point(2), z in point(2)) {
        for domain in domains().iter().filter(|d| d.dim() == 2) {
            let z = domain.project(&z).unwrap();
            let delta = domain.penalty_delta(&x).unwrap();
            let inner: f64 = z.iter().zip(&x).zip(&delta).map(|((a, b), d)| (a - b) * d).sum();
            prop_assert!(inner <= 1e-12);
        }
    }

    #[test]
    fn penalized_step_contracts_toward_the_domain(x in -2.0..3.0f64, dw in -0.5..0.5f64, n in 1u32..10_000) {
        let inst = builtin("neumann-heat-interval").unwrap();
        let dt = 1e-3;
        let step = step_penalized(&inst, n, &[x], &[dw], dt).unwrap();
        let (mut b, mut sigma) = ([0.0], [0.0]);
        inst.coefficients.drift(&[x], &mut b);
        inst.coefficients.diffusion(&[x], &mut sigma);
        let free = x + b[0] * dt + sigma[0] * dw;
        let before = inst.domain.distance(&[free]).unwrap();
        let after = inst.domain.distance(&step.x_next).unwrap();
        prop_assert!(after <= before + 1e-15);
        prop_assert!((step.d_push[0] - (step.x_next[0] - free)).abs() <= 1e-12);
        prop_assert!((step.dk - step.d_push[0].abs()).abs() <= 1e-15);
    }

    #[test]
    fn upcrossings_survive_increasing_affine_maps(
        path in prop::collection::vec(-3.0..3.0f64, 0..200),
        a in -2.0..0.0f64,
        gap in 0.01..2.0f64,
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let b = a + gap;
        let mapped: Vec<f64> = path.iter().map(|v| scale * v + shift).collect();
        let original = upcrossings(&path, a, b).unwrap();
        prop_assert_eq!(original, upcrossings(&mapped, scale * a + shift, scale * b + shift).unwrap());
        prop_assert!(original <= path.len() / 2);
    }

    #[test]
    fn regression_shifts_exactly_with_the_targets(seed in any::<u64>(), shift in -100.0..100.0f64) {
        let featurizer = RegressionBasis::default().featurizer_for_box(&[0.0], &[1.0]).unwrap();
        let mut s = Stream::auxiliary(seed, 1);
        let points: Vec<[f64; 1]> = (0..200).map(|_| [s.uniform()]).collect();
        let design = featurizer.design(points.iter().map(|p| &p[..]));
        let targets = DMatrix::from_fn(200, 1, |i, _| (3.0 * points[i][0]).sin() + 0.1 * s.normal());
        let base = regress(&design, &targets, 1e-6).unwrap();
        let moved = regress(&design, &targets.add_scalar(shift), 1e-6).unwrap();
        for (a, b) in base.fitted.iter().zip(moved.fitted.iter()) {
            prop_assert!((b - a - shift).abs() <= 1e-9 * (1.0 + shift.abs()));
        }
    }

    #[test]
    fn config_hash_ignores_key_order(seed in any::<u32>(), paths in 1000usize..100_000, steps in 10usize..5000) {
        let fields = [
            format!("problem = \"neumann-heat-interval\""),
            format!("seed = {seed}"),
            format!("paths = {paths}"),
            "n_schedule = [4, 16]".to_string(),
        ];
        let grid = format!("[grid]\nsteps = {steps}\n");
        let forward = format!("{}\n{grid}", fields.join("\n"));
        let reversed: Vec<&str> = fields.iter().rev().map(String::as_str).collect();
        let backward = format!("{}\n{grid}", reversed.join("\n"));
        let json = format!(
            "{{\"grid\": {{\"steps\": {steps}}}, \"n_schedule\": [4, 16], \"paths\": {paths}, \"seed\": {seed}, \"problem\": \"neumann-heat-interval\"}}"
        );
        let a = parse_config(&forward).unwrap().content_hash();
        prop_assert_eq!(&a, &parse_config(&backward).unwrap().content_hash());
        prop_assert_eq!(&a, &parse_config(&json).unwrap().content_hash());
    }

    #[test]
    fn path_streams_replay(seed in any::<u64>(), path in 0u64..1 << 62) {
        let mut a = Stream::for_path(seed, path);
        let mut b = Stream::for_path(seed, path);
        let (mut xa, mut xb) = (vec![0.0; 17], vec![0.0; 17]);
        a.fill_normals(&mut xa);
        b.fill_normals(&mut xb);
        prop_assert_eq!(xa, xb);
    }
}
