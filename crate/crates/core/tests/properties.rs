//! Randomized invariants across the public API.

use lyadeq::attacks::{containment, ifgsm, pgd, steps_for_k, steps_for_radius, AttackConfig, AttackFamily};
use lyadeq::checkpoint::{decode_dataset, encode_dataset};
use lyadeq::data::Dataset;
use lyadeq::fixedpoint::{anderson_solve, picard_solve, SolverConfig};
use lyadeq::gradcheck::{finite_difference_gradient, relative_error};
use lyadeq::layers::{normal, orthogonality_defect, Icnn, OrthogonalFc};
use lyadeq::lyapunov::{decay_margin, stability_projection, StabilityConfig};
use lyadeq::tensor::{matmul, smooth_relu};
use lyadeq::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 6;

fn icnn(seed: u64) -> Icnn {
    Icnn::init(&mut ChaCha8Rng::seed_from_u64(seed), N, 8, 0.1).unwrap()
}

fn state() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, N)
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_is_positive_definite(seed in 0u64..1000, z in state()) {
        let p = icnn(seed);
        let v0 = p.eval_v(&Tensor::zeros(&[1, N])).unwrap().data()[0];
        prop_assert!(v0.abs() < 1e-12);
        let v = p.eval_v(&row(&z)).unwrap().data()[0];
        prop_assert!(v >= norm_sq(&z) - 1e-12);
    }

    #[test]
    fn lyapunov_is_midpoint_convex(seed in 0u64..1000, a in state(), b in state()) {
        let p = icnn(seed);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let v = |z: &[f64]| p.eval_v(&row(z)).unwrap().data()[0];
        prop_assert!(v(&mid) <= (v(&a) + v(&b)) / 2.0 + 1e-9);
    }

    #[test]
    fn gradient_points_outward(seed in 0u64..1000, z in state()) {
        prop_assume!(norm_sq(&z) > 1e-6);
        let p = icnn(seed);
        let v = p.eval_v(&row(&z)).unwrap().data()[0];
        let grad = p.grad_v(&row(&z)).unwrap();
        let dot: f64 = grad.data().iter().zip(&z).map(|(g, x)| g * x).sum();
        prop_assert!(dot >= v - 1e-9 * (1.0 + v));
    }

    #[test]
    fn projection_certifies_decay(seed in 0u64..1000, z in state(), f in prop::collection::vec(-10.0..10.0f64, N), alpha in 0.01..3.0f64) {
        let p = icnn(seed);
        let cfg = StabilityConfig { alpha, ..Default::default() };
        let (zt, ft) = (row(&z), row(&f));
        let fhat = stability_projection(&ft, &zt, &p, &cfg).unwrap();
        let margin = decay_margin(&fhat, &zt, &p, alpha).unwrap()[0];
        prop_assert!(margin <= 1e-9 * (1.0 + norm_sq(&f)));

        // Closest point of the half-space: the move is max(0, φ)/‖∇V‖.
        let phi = decay_margin(&ft, &zt, &p, alpha).unwrap()[0];
        let grad = p.grad_v(&zt).unwrap();
        let moved = fhat.sub(&ft).unwrap().sum_sq().sqrt();
        let expected = phi.max(0.0) / grad.sum_sq().sqrt();
        prop_assert!((moved - expected).abs() <= 1e-9 * (1.0 + expected));

        let again = stability_projection(&fhat, &zt, &p, &cfg).unwrap();
        prop_assert!(again.sub(&fhat).unwrap().max_abs() <= 1e-9 * (1.0 + fhat.max_abs()));
    }

    #[test]
    fn householder_weights_are_semi_orthogonal(seed in 0u64..1000, out in 1usize..8, extra in 0usize..8) {
        let layer = OrthogonalFc::init(&mut ChaCha8Rng::seed_from_u64(seed), out, out + extra);
        let w = layer.weight().unwrap();
        prop_assert_eq!(w.shape(), &[out, out + extra]);
        prop_assert!(orthogonality_defect(&w).unwrap() <= 1e-10);
    }

    #[test]
    fn attacks_stay_in_the_ball(seed in 0u64..1000, k in 0u32..12, pgd_family in any::<bool>(), pixels in prop::collection::vec(0.0..=1.0f64, 12)) {
        let family = if pgd_family { AttackFamily::Pgd } else { AttackFamily::Ifgsm };
        let cfg = AttackConfig::for_radius(family, k, 1.0, seed);
        let x = Tensor::new(&[3, 4], pixels).unwrap();
        let w = normal(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 4], 1.0);
        // Gradient of a linear loss: pushes every pixel the same way each step.
        let mut grad = |_: &Tensor, _: &[usize]| Ok(w.clone());
        let adv = match family {
            AttackFamily::Pgd => pgd(&mut grad, &x, &[0, 0, 0], &cfg, 0).unwrap(),
            AttackFamily::Ifgsm => ifgsm(&mut grad, &x, &[0, 0, 0], &cfg).unwrap(),
        };
        let (dist, in_range) = containment(&adv, &x, &cfg).unwrap();
        prop_assert!(dist <= cfg.epsilon + 1e-12);
        prop_assert!(in_range);
    }

    #[test]
    fn pgd_is_seed_deterministic(seed in 0u64..1000, pixels in prop::collection::vec(0.0..=1.0f64, 8)) {
        let cfg = AttackConfig::for_radius(AttackFamily::Pgd, 8, 1.0, seed);
        let x = Tensor::new(&[2, 4], pixels).unwrap();
        let mut grad = |x: &Tensor, _: &[usize]| Ok(x.map(|v| v - 0.5));
        let a = pgd(&mut grad, &x, &[0, 1], &cfg, 3).unwrap();
        let b = pgd(&mut grad, &x, &[0, 1], &cfg, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn step_rules_agree(k in 0u32..64) {
        prop_assert_eq!(steps_for_radius(k as f64 / 255.0).unwrap(), steps_for_k(k));
    }

    #[test]
    fn anderson_and_picard_agree(seed in 0u64..1000, rho in 0.1..0.8f64) {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = normal(&mut rng, &[n, n], 1.0);
        let spectral_bound = (0..n).map(|r| raw.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let a = raw.scale(rho / spectral_bound);
        let b = normal(&mut rng, &[1, n], 1.0);
        let map = |z: &Tensor| matmul(z, &a).and_then(|v| v.add(&b));
        let cfg = SolverConfig { tol: 1e-9, max_iter: 500, ..Default::default() };
        let (za, ra) = anderson_solve(map, &Tensor::zeros(&[1, n]), &cfg).unwrap();
        let (zp, rp) = picard_solve(map, &Tensor::zeros(&[1, n]), &cfg).unwrap();
        prop_assert!(ra.converged && rp.converged);
        prop_assert!(za.sub(&zp).unwrap().max_abs() <= 10.0 * cfg.tol / (1.0 - rho));
        prop_assert!(map(&za).unwrap().sub(&za).unwrap().max_abs() <= cfg.tol);
        let (zb, rb) = anderson_solve(map, &Tensor::zeros(&[1, n]), &cfg).unwrap();
        prop_assert_eq!(za, zb);
        prop_assert_eq!(ra, rb);
    }

    #[test]
    fn dataset_container_round_trips(values in prop::collection::vec(prop::num::f64::ANY, 1..40), classes in 2usize..12, seed in any::<u64>()) {
        let n = values.len();
        let labels = (0..n).map(|i| (i * 7 + seed as usize % 5) % classes).collect();
        let ds = Dataset::new(Tensor::new(&[n, 1], values).unwrap(), labels, classes, "prop", "random").unwrap();
        let back = decode_dataset(&encode_dataset(&ds, seed).unwrap()).unwrap();
        prop_assert_eq!(back.labels, ds.labels.clone());
        for (a, b) in ds.images.data().iter().zip(back.images.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normal(&mut rng, &[4, 3], 1.0);
        let x0 = normal(&mut rng, &[2, 4], 1.0);
        // Stay away from the smooth-ReLU knots at 0 and d.
        let pre = matmul(&x0, &w).unwrap();
        prop_assume!(pre.data().iter().all(|&v| v.abs() > 1e-3 && (v - 0.1).abs() > 1e-3));
        let eval = |x: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let h = g.matmul(xv, wv).unwrap();
            let s = g.smooth_relu(h, 0.1).unwrap();
            let q = g.square(s).unwrap();
            let l = g.sum(q).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item().unwrap(), g.grad(xv).unwrap().clone())
        };
        let (_, analytic) = eval(&x0);
        let numeric = finite_difference_gradient(|x| Ok(eval(x).0), &x0, 1e-6).unwrap();
        prop_assert!(relative_error(&analytic, &numeric, 1e-8) <= 1e-5);
    }

    #[test]
    fn smooth_relu_is_continuous_at_its_knots(d in 1e-3..2.0f64) {
        let below = smooth_relu(-f64::EPSILON, d);
        prop_assert!((below - smooth_relu(0.0, d)).abs() <= 1e-15);
        let left = smooth_relu(d * (1.0 - 1e-12), d);
        let right = smooth_relu(d * (1.0 + 1e-12), d);
        prop_assert!((left - d / 2.0).abs() <= 1e-10 && (right - d / 2.0).abs() <= 1e-10);
    }
}
