use proptest::prelude::*;

use sinkscale::diagnostics::{best_rho, density, scalability_check, well_bounded};
use sinkscale::eot::{build_kernel, factorization_error, log_sk_run, prescale, solve_eot, Domain, EotProblem, LogMatrix};
use sinkscale::generators::{gen_random, RandomFamily};
use sinkscale::permanent::{permanent, permanent_trace, LAW_TOL};
use sinkscale::reduction::{discretize, expand, recover_dense, verify_equivalence};
use sinkscale::scaling::{marginal_error_l1, nu, sk_iterates};
use sinkscale::{sk_run, Marginals, Matrix, ScalingInstance, TraceOptions};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn positive_matrix(m: usize, n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.01f64..1.0, m * n).prop_map(move |d| Matrix::new(m, n, d).unwrap())
}

fn probability(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, len).prop_map(|x| {
        let s: f64 = x.iter().sum();
        x.iter().map(|v| v / s).collect()
    })
}

fn instance() -> impl Strategy<Value = ScalingInstance> {
    (2usize..7, 2usize..7).prop_flat_map(|(m, n)| {
        (positive_matrix(m, n), probability(m), probability(n))
            .prop_map(|(a, u, v)| ScalingInstance::new(a, Marginals::new(u, v).unwrap()).unwrap())
    })
}

fn square_unit_instance(lo: usize, hi: usize) -> impl Strategy<Value = ScalingInstance> {
    (lo..=hi).prop_flat_map(|n| {
        positive_matrix(n, n).prop_map(move |a| ScalingInstance::new(a, Marginals::ones(n, n).unwrap()).unwrap())
    })
}

/// Integer compositions of `l` into `parts` positive pieces, divided by `l`.
fn rational_targets(m: usize, n: usize, l: u64) -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
    let split = move |parts: usize| {
        prop::collection::vec(1u64..=l, parts).prop_map(move |w| {
            let total: u64 = w.iter().sum();
            let mut out: Vec<u64> = w.iter().map(|x| (x * (l - parts as u64) / total) + 1).collect();
            let gap = l - out.iter().sum::<u64>();
            out[0] += gap;
            out
        })
    };
    (split(m), split(n))
}

fn rational_instance() -> impl Strategy<Value = (ScalingInstance, u64)> {
    (2usize..5, 2usize..5, 6u64..=30).prop_flat_map(|(m, n, l)| {
        (positive_matrix(m, n), rational_targets(m, n, l)).prop_map(move |(a, (ui, vi))| {
            let u = ui.iter().map(|&x| x as f64 / l as f64).collect();
            let v = vi.iter().map(|&x| x as f64 / l as f64).collect();
            (ScalingInstance::new(a, Marginals::new(u, v).unwrap()).unwrap(), l)
        })
    })
}

fn naive_permanent(m: &Matrix) -> f64 {
    fn go(m: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == m.rows() {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 0..m.cols() {
            if !used[j] {
                used[j] = true;
                total += m.get(row, j) * go(m, row + 1, used);
                used[j] = false;
            }
        }
        total
    }
    go(m, 0, &mut vec![false; m.cols()])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn parity_normalization(inst in instance()) {
        let its = sk_iterates(&inst, 20).unwrap();
        for (k, a) in its.iter().enumerate() {
            let (r, c) = marginal_error_l1(a, inst.targets()).unwrap();
            if k % 2 == 0 {
                prop_assert!(r <= 1e-10, "k={k} row_err={r}");
            } else {
                prop_assert!(c <= 1e-10, "k={k} col_err={c}");
            }
        }
    }

    #[test]
    fn marginal_monotonicity(inst in square_unit_instance(5, 12)) {
        let its = sk_iterates(&inst, 40).unwrap();
        let tol = 1e-9;
        let lo = |x: &[f64]| x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = |x: &[f64]| x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for k in 1..its.len() {
            let (cur, prev) = (&its[k], &its[k - 1]);
            // Odd k: columns normalized, watch rows; even k: the reverse.
            let (free, prev_fixed_other) = if k % 2 == 1 {
                (cur.row_sums(), prev.col_sums())
            } else {
                (cur.col_sums(), prev.row_sums())
            };
            prop_assert!(lo(&free) <= 1.0 + tol && hi(&free) >= 1.0 - tol);
            prop_assert!(hi(&free) <= 1.0 / lo(&prev_fixed_other) + tol);
            if k >= 3 {
                let older = if k % 2 == 1 { its[k - 2].row_sums() } else { its[k - 2].col_sums() };
                prop_assert!(lo(&free) >= lo(&older) - tol, "k={k}");
                prop_assert!(hi(&free) <= hi(&older) + tol, "k={k}");
            }
        }
    }

    #[test]
    fn scalers_reproduce_the_iterate(inst in instance(), steps in 1usize..30) {
        let out = sk_run(&inst, 1e-300, steps, &TraceOptions::default()).unwrap();
        let rebuilt = inst.matrix().diag_scale(out.state.row_scalers(), out.state.col_scalers()).unwrap();
        for (a, b) in rebuilt.as_slice().iter().zip(out.state.current().as_slice()) {
            prop_assert!(rel(*a, *b) <= 1e-9);
        }
    }

    #[test]
    fn nu_ignores_row_rescaling(a in positive_matrix(4, 5), d in prop::collection::vec(1e-3f64..1e3, 4)) {
        let scaled = a.diag_scale(&d, &[1.0; 5]).unwrap();
        prop_assert!(rel(nu(&scaled), nu(&a)) <= 1e-12);
    }

    #[test]
    fn runs_are_bit_identical(inst in instance()) {
        let a = sk_run(&inst, 1e-8, 500, &TraceOptions::default()).unwrap();
        let b = sk_run(&inst, 1e-8, 500, &TraceOptions::default()).unwrap();
        prop_assert_eq!(a.trace, b.trace);
        prop_assert_eq!(a.state, b.state);
    }

    #[test]
    fn density_ignores_power_of_two_scaling(inst in instance(), e in -20i32..20, rho in 0.05f64..1.0) {
        let c = 2f64.powi(e);
        let scaled = inst.matrix().scaled(c);
        let (a, b) = (density(inst.matrix(), inst.targets(), rho), density(&scaled, inst.targets(), rho));
        prop_assert_eq!((a.gamma, a.gamma_prime), (b.gamma, b.gamma_prime));
        let (a, b) = (best_rho(inst.matrix(), inst.targets()), best_rho(&scaled, inst.targets()));
        prop_assert_eq!((a.rho, a.gamma, a.gamma_prime), (b.rho, b.gamma, b.gamma_prime));
    }

    #[test]
    fn density_matches_well_boundedness_through_the_kernel(
        costs in prop::collection::vec(0.0f64..4.0, 20),
        u in probability(4),
        v in probability(5),
        rho in 0.2f64..3.0,
    ) {
        let mut costs = costs;
        costs[7] = 0.0;
        let t = Matrix::cost(4, 5, costs).unwrap();
        let targets = Marginals::new(u, v).unwrap();
        let k = build_kernel(&t, 1.0).unwrap();
        let wb = well_bounded(&t, &targets, rho);
        let d = density(&k, &targets, (-rho).exp() - 1e-15);
        prop_assert!((wb.r_rho - d.gamma).abs() <= 1e-12);
        prop_assert!((wb.c_rho - d.gamma_prime).abs() <= 1e-12);
    }

    #[test]
    fn converged_sparse_instances_are_feasible(seed in any::<u64>(), fill in 0.15f64..0.6, n in 3usize..8) {
        let inst = gen_random(&RandomFamily::Sparse { fill, zero_row: None }, n, n, true, seed).unwrap();
        // Infeasible supports can drive entries below the float range.
        let converged = match sk_run(&inst, 1e-6, 5_000, &TraceOptions::default()) {
            Ok(out) => out.converged,
            Err(e) => {
                prop_assert!(matches!(e, sinkscale::Error::NonFinite { .. }), "{e}");
                false
            }
        };
        if converged {
            prop_assert!(scalability_check(&inst).is_feasible());
        }
    }

    #[test]
    fn eot_plan_factorizes(
        costs in prop::collection::vec(0.0f64..1.0, 12),
        eta in 0.5f64..20.0,
        pre in any::<bool>(),
        log in any::<bool>(),
    ) {
        let cost = Matrix::cost(3, 4, costs).unwrap();
        let problem = EotProblem::new(cost.clone(), eta, Marginals::uniform(3, 4).unwrap(), pre).unwrap();
        let domain = if log { Domain::Log } else { Domain::Direct };
        let sol = solve_eot(&problem, 1e-9, 100_000, domain).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(factorization_error(&sol, &cost, eta) <= 1e-8);
    }

    #[test]
    fn prescaling_is_sk_on_the_scaled_kernel(costs in prop::collection::vec(0.0f64..2.0, 12), u in probability(3), v in probability(4)) {
        let cost = Matrix::cost(3, 4, costs).unwrap();
        let targets = Marginals::new(u, v).unwrap();
        let problem = EotProblem::new(cost.clone(), 1.0, targets.clone(), true).unwrap();
        let kernel = build_kernel(&cost, 1.0).unwrap();
        let start = prescale(&kernel, &targets).unwrap();

        let direct = solve_eot(&problem, 1e-10, 10_000, Domain::Direct).unwrap();
        let plain = sk_run(&ScalingInstance::new(start.clone(), targets.clone()).unwrap(), 1e-10, 10_000, &TraceOptions::default()).unwrap();
        prop_assert_eq!(&direct.trace, &plain.trace);

        let log = solve_eot(&problem, 1e-10, 10_000, Domain::Log).unwrap();
        let plain_log = log_sk_run(&LogMatrix::from_matrix(&start), &targets, 1e-10, 10_000, None, None).unwrap();
        prop_assert_eq!(log.trace.len(), plain_log.trace.len());
        for (a, b) in log.plan.as_slice().iter().zip(plain_log.state.exp().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn engines_agree(costs in prop::collection::vec(0.0f64..1.0, 20), eta in 0.1f64..25.0, u in probability(4), v in probability(5)) {
        let cost = Matrix::cost(4, 5, costs).unwrap();
        let problem = EotProblem::new(cost, eta, Marginals::new(u, v).unwrap(), false).unwrap();
        let a = solve_eot(&problem, 1e-300, 50, Domain::Direct).unwrap();
        let b = solve_eot(&problem, 1e-300, 50, Domain::Log).unwrap();
        for (x, y) in a.plan.as_slice().iter().zip(b.plan.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn log_engine_ignores_kernel_scale(costs in prop::collection::vec(0.0f64..5.0, 12), lnc in -50.0f64..50.0) {
        let lm = LogMatrix::kernel(&Matrix::cost(3, 4, costs).unwrap(), 1.0);
        let shifted = LogMatrix::new(3, 4, lm.as_slice().iter().map(|x| x + lnc).collect()).unwrap();
        let t = Marginals::uniform(3, 4).unwrap();
        let a = log_sk_run(&lm, &t, 1e-300, 30, None, None).unwrap();
        let b = log_sk_run(&shifted, &t, 1e-300, 30, None, None).unwrap();
        for (x, y) in a.trace.records.iter().zip(&b.trace.records) {
            prop_assert!((x.total_err - y.total_err).abs() <= 1e-12);
        }
        for (x, y) in a.state.as_slice().iter().zip(b.state.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn reduction_is_exact_for_rational_targets((inst, l) in rational_instance()) {
        let rep = verify_equivalence(&inst, l, 40, false).unwrap();
        prop_assert!(rep.exact);
        prop_assert!(rep.max_deviation <= 1e-9, "{}", rep.max_deviation);
        prop_assert!(rep.max_block_spread <= 1e-12, "{}", rep.max_block_spread);
    }

    #[test]
    fn recover_dense_undoes_the_expansion((inst, l) in rational_instance()) {
        let ti = discretize(inst.targets(), l).unwrap();
        let red = expand(&inst, &ti, false).unwrap();
        let d = recover_dense(&red);
        let weights = |sizes: &[u64]| -> Vec<f64> {
            sizes.iter().flat_map(|&s| std::iter::repeat_n(s as f64, s as usize)).collect()
        };
        let direct = red.g.diag_scale(&weights(&ti.u_prime), &weights(&ti.v_prime)).unwrap();
        prop_assert_eq!(d.as_slice(), direct.as_slice());
        for i in 0..inst.matrix().rows() {
            for j in 0..inst.matrix().cols() {
                for r in red.row_block(i) {
                    for c in red.col_block(j) {
                        prop_assert!(rel(d.get(r, c), inst.matrix().get(i, j)) <= 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn permanent_laws_hold(inst in square_unit_instance(2, 8)) {
        let tr = permanent_trace(&inst, 30).unwrap();
        prop_assert!(tr.law_violations.is_empty());
        prop_assert!(tr.max_law_error() <= LAW_TOL);
        prop_assert!(tr.product_violations.is_empty());
        prop_assert!(tr.max_marginal_product() <= 1.0 + 1e-10);
    }

    #[test]
    fn ryser_matches_the_permutation_sum(n in 1usize..=7, seed in prop::collection::vec(0.0f64..2.0, 49)) {
        let m = Matrix::new(n, n, seed[..n * n].to_vec().iter().map(|x| x + 1e-3).collect()).unwrap();
        prop_assert!(rel(permanent(&m).unwrap(), naive_permanent(&m)) <= 1e-10);
    }
}
