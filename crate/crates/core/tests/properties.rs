use proptest::prelude::*;

use sngd_core::kernels::{binomial, combinations_colex, projector, select_rows, ExpectationMode, SampleSet, SamplerSpec};
use sngd_core::linalg::{self, Matrix};
use sngd_core::problems::{self, GeneratorKind, GeneratorSpec, Problem, ProblemType};
use sngd_core::solvers::{Algorithm, Solver, SolverConfig};
use sngd_core::spectral::{compute_report, expected_projector, rate_predictors};

const TOL: f64 = 1e-9;

fn lls(m: usize, n: usize, decay: f64, seed: u64) -> Problem {
    let spec = GeneratorSpec::new(GeneratorKind::GaussianRows, m, n, seed).with_decay(decay);
    problems::generate(&spec, ProblemType::Lls).unwrap()
}

fn llq(m: usize, n: usize, kj: f64, kh: f64, seed: u64) -> Problem {
    let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, m, n, seed).with_kappas(kj, kh);
    problems::generate(&spec, ProblemType::Llq).unwrap()
}

/// `(m, n, k)` with `n < m` and `k < m`, small enough to enumerate.
fn sizes() -> impl Strategy<Value = (usize, usize, usize)> {
    (4usize..=9).prop_flat_map(|m| (Just(m), 2..=(m - 1).min(4), 1..=(m - 1).min(3)))
}

fn subset(m: usize, k: usize, pick: u64) -> SampleSet {
    let all = combinations_colex(m, k);
    all[(pick % all.len() as u64) as usize].clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projector_lies_between_zero_and_identity(
        (m, n, k) in sizes(), lambda in 0.0f64..2.0, seed in any::<u64>(), pick in any::<u64>()
    ) {
        let p = lls(m, n, 0.5, seed);
        let block = select_rows(p.jacobian(), &subset(m, k, pick));
        let pr = projector(&block, lambda).unwrap();
        let (lo, hi) = linalg::sym_extremes(&pr);
        prop_assert!(lo >= -TOL && hi <= 1.0 + TOL, "spectrum [{lo}, {hi}]");
    }

    #[test]
    fn projector_decreases_in_lambda(
        (m, n, k) in sizes(), l1 in 0.0f64..1.0, dl in 0.0f64..1.0, seed in any::<u64>(), pick in any::<u64>()
    ) {
        let p = lls(m, n, 0.0, seed);
        let block = select_rows(p.jacobian(), &subset(m, k, pick));
        let mut d: Matrix = projector(&block, l1).unwrap() - projector(&block, l1 + dl).unwrap();
        linalg::symmetrize(&mut d);
        prop_assert!(linalg::sym_extremes(&d).0 >= -TOL);
    }

    #[test]
    fn alpha_nonincreasing_in_lambda((m, n, k) in sizes(), l1 in 0.0f64..1.0, dl in 0.0f64..1.0, seed in any::<u64>()) {
        let p = lls(m, n, 0.5, seed);
        let exact = ExpectationMode::exact();
        let a1 = linalg::sym_extremes(&expected_projector(&p, l1, SamplerSpec::uniform(k), &exact).unwrap().mean).0;
        let a2 = linalg::sym_extremes(&expected_projector(&p, l1 + dl, SamplerSpec::uniform(k), &exact).unwrap().mean).0;
        prop_assert!(a2 <= a1 + TOL, "{a2} > {a1}");
    }

    #[test]
    fn beta_bounds_and_predictor_ordering((m, n, k) in sizes(), lambda in 0.0f64..1.0, seed in any::<u64>()) {
        let p = lls(m, n, 1.0, seed);
        let r = compute_report(&p, lambda, SamplerSpec::uniform(k), &ExpectationMode::exact()).unwrap();
        prop_assert!(r.beta >= 1.0 - 1e-8 && r.beta <= 1.0 / r.alpha + 1e-8);
        prop_assert!(r.invariants().all);
        let pr = rate_predictors(&r);
        prop_assert!(pr.spring_lls <= pr.sngd_lls + 1e-12);
    }

    #[test]
    fn gamma_bound_on_least_quadratics(
        (m, n, k) in sizes(), lambda in 0.0f64..1.0, kj in 1.0f64..30.0, kh in 1.0f64..30.0, seed in any::<u64>()
    ) {
        let p = llq(m, n, kj, kh, seed);
        for sampler in [SamplerSpec::uniform(k), SamplerSpec::k_dpp(k.min(n), lambda)] {
            let r = compute_report(&p, lambda, sampler, &ExpectationMode::exact()).unwrap();
            prop_assert!(r.gamma >= 1.0 / r.kappa_qbar - 1e-8);
        }
    }

    #[test]
    fn demmel_condition_dominates_condition((m, n, _k) in sizes(), decay in 0.0f64..3.0, seed in any::<u64>()) {
        let p = lls(m, n, decay, seed);
        let r = compute_report(&p, 0.0, SamplerSpec::uniform(1), &ExpectationMode::exact()).unwrap();
        prop_assert!(r.kappa_dem_j >= r.kappa_j * (1.0 - 1e-12));
    }

    #[test]
    fn zero_momentum_spring_is_sngd_bitwise((m, n, k) in sizes(), eta in 0.05f64..1.0, seed in any::<u64>(), llq_case in any::<bool>()) {
        let p = if llq_case { llq(m, n, 5.0, 5.0, seed) } else { lls(m, n, 0.5, seed) };
        let sngd = Solver::new(&p, SolverConfig::new(Algorithm::Sngd, eta, k, 30, seed ^ 1)).unwrap().run();
        let spring = Solver::new(&p, SolverConfig::new(Algorithm::Spring, eta, k, 30, seed ^ 1).with_mu(0.0)).unwrap().run();
        prop_assert_eq!(sngd.err_series(), spring.err_series());
        prop_assert_eq!(sngd.final_theta, spring.final_theta);
    }

    #[test]
    fn generation_is_pure_and_round_trips(m in 5usize..40, n in 2usize..5, seed in any::<u64>(), kj in 1.0f64..100.0) {
        let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, m, n, seed).with_kappas(kj, 3.0);
        let a = problems::generate(&spec, ProblemType::Llq).unwrap();
        let b = problems::generate(&spec, ProblemType::Llq).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        prop_assert_eq!(&ja, &serde_json::to_string(&b).unwrap());
        let back: Problem = serde_json::from_str(&ja).unwrap();
        prop_assert_eq!(back.jacobian(), a.jacobian());
        prop_assert_eq!(back.theta_star(), a.theta_star());
    }

    #[test]
    fn enumeration_counts_match_binomial(m in 1usize..12, k in 1usize..6) {
        prop_assume!(k <= m);
        let all = combinations_colex(m, k);
        prop_assert_eq!(all.len() as u64, binomial(m, k));
        let mut uniq: Vec<&[usize]> = all.iter().map(|s| s.indices()).collect();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), all.len());
    }

    #[test]
    fn expected_projector_is_probability_weighted_mean((m, n, k) in sizes(), seed in any::<u64>()) {
        // Under uniform sampling the expectation is the plain average over subsets.
        let p = lls(m, n, 0.0, seed);
        let e = expected_projector(&p, 0.0, SamplerSpec::uniform(k), &ExpectationMode::exact()).unwrap();
        let sets = combinations_colex(m, k);
        let mut sum = Matrix::zeros(n, n);
        for s in &sets {
            sum += projector(&select_rows(p.jacobian(), s), 0.0).unwrap();
        }
        sum /= sets.len() as f64;
        prop_assert!(linalg::fro(&(sum - e.mean)) < 1e-12);
    }
}
