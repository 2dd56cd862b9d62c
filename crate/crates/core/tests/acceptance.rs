//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use sinkscale::diagnostics::well_bounded;
use sinkscale::eot::{log_sk_run, prescale, solve_eot, Domain, EotProblem, LogMatrix};
use sinkscale::generators::{
    critical_bound, critical_delta_next, critical_step, gen_critical2x2, gen_thm61, gen_thm71, gen_tight2x2,
    rng_from_seed, thm61_decay_floor, thm61_epsilon, thm61_theta, thm71_theta,
};
use sinkscale::permanent::{permanent, permanent_trace, van_der_waerden_bound};
use sinkscale::reduction::{block_closed_form, block_input, verify_equivalence};
use sinkscale::scaling::sk_iterates;
use sinkscale::{sk_run, Marginals, Matrix, ScalingInstance, TraceOptions};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, f64);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha20Rng, m: usize, n: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(m, n, (0..m * n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_probability(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

/// A composition of `l` into `parts` positive integers.
fn composition(rng: &mut ChaCha20Rng, parts: usize, l: u64) -> Vec<u64> {
    let mut out = vec![1u64; parts];
    for _ in 0..l - parts as u64 {
        out[rng.gen_range(0..parts)] += 1;
    }
    out
}

fn rational_corpus() -> Vec<(ScalingInstance, u64)> {
    let mut rng = rng_from_seed(2024);
    (0..50)
        .map(|_| {
            let (m, n) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
            let l = rng.gen_range(6..=120u64);
            let u = composition(&mut rng, m, l).iter().map(|&x| x as f64 / l as f64).collect();
            let v = composition(&mut rng, n, l).iter().map(|&x| x as f64 / l as f64).collect();
            let a = random_matrix(&mut rng, m, n, 0.01, 1.0);
            (ScalingInstance::new(a, Marginals::new(u, v).unwrap()).unwrap(), l)
        })
        .collect()
}

fn reduction_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for (inst, l) in rational_corpus() {
        let rep = verify_equivalence(&inst, l, 40, false).map_err(|e| e.to_string())?;
        check(rep.exact, || format!("targets not exact at L={l}"))?;
        worst = worst.max(rep.max_deviation);
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn block_constancy() -> Outcome {
    let mut worst = 0.0f64;
    for (inst, l) in rational_corpus() {
        worst = worst.max(verify_equivalence(&inst, l, 40, false).map_err(|e| e.to_string())?.max_block_spread);
    }
    check(worst <= 1e-12, || format!("max spread {worst:e}"))?;
    Ok(format!("max spread {worst:.1e}"))
}

fn two_step_closed_form() -> Outcome {
    let mut rng = rng_from_seed(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(3..=40);
        let s = rng.gen_range(2..n);
        let t = rng.gen_range(1..s);
        let d = rng.gen_range(0.01..10.0);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
        let a = block_input(n, t, s, d, &u, &v).map_err(|e| e.to_string())?;
        let inst = ScalingInstance::new(a, Marginals::ones(n, n).unwrap()).unwrap();
        let a2 = sk_iterates(&inst, 3).map_err(|e| e.to_string())?.pop().unwrap();
        let b = block_closed_form(n, t, s, d, &v).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                let want = match (i < t, j < s) {
                    (true, true) => b.x,
                    (true, false) => b.y,
                    (false, true) => b.z,
                    (false, false) => b.q,
                };
                worst = worst.max((a2.get(i, j) - want).abs());
            }
        }
    }
    check(worst <= 1e-12, || format!("max entry gap {worst:e}"))?;
    Ok(format!("max entry gap {worst:.1e}"))
}

fn permanent_laws() -> Outcome {
    let mut rng = rng_from_seed(11);
    let floor = van_der_waerden_bound(6) - 1e-9;
    let (mut law, mut product, mut least) = (0.0f64, f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..30 {
        let inst = ScalingInstance::new(random_matrix(&mut rng, 6, 6, 0.01, 1.0), Marginals::ones(6, 6).unwrap()).unwrap();
        let tr = permanent_trace(&inst, 60).map_err(|e| e.to_string())?;
        law = law.max(tr.max_law_error());
        product = product.max(tr.max_marginal_product());
        let out = sk_run(&inst, 1e-12, 100_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
        check(out.converged, || "scaling did not converge".into())?;
        least = least.min(permanent(out.state.current()).map_err(|e| e.to_string())?);
    }
    check(law <= 1e-8, || format!("law error {law:e}"))?;
    check(product <= 1.0 + 1e-10, || format!("marginal product {product}"))?;
    check(least >= floor, || format!("permanent {least} below {floor}"))?;
    Ok(format!("law {law:.1e}, product {product:.12}, min per {least:.6}"))
}

fn marginal_monotonicity() -> Outcome {
    let mut rng = rng_from_seed(13);
    let tol = 1e-9;
    let lo = |x: &[f64]| x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |x: &[f64]| x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut violations = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(5..=12);
        let inst = ScalingInstance::new(random_matrix(&mut rng, n, n, 0.01, 1.0), Marginals::ones(n, n).unwrap()).unwrap();
        let its = sk_iterates(&inst, 100).map_err(|e| e.to_string())?;
        for k in 1..its.len() {
            let (free, other) = if k % 2 == 1 {
                (its[k].row_sums(), its[k - 1].col_sums())
            } else {
                (its[k].col_sums(), its[k - 1].row_sums())
            };
            let mut ok = lo(&free) <= 1.0 + tol && hi(&free) >= 1.0 - tol && hi(&free) <= 1.0 / lo(&other) + tol;
            if k >= 3 {
                let older = if k % 2 == 1 { its[k - 2].row_sums() } else { its[k - 2].col_sums() };
                ok &= lo(&free) >= lo(&older) - tol && hi(&free) <= hi(&older) + tol;
            }
            violations += usize::from(!ok);
        }
    }
    check(violations == 0, || format!("{violations} violations"))?;
    Ok("0 violations".into())
}

fn theta_oracle(n: usize, steps: usize) -> Vec<f64> {
    let nf = n as f64;
    let w0 = 2.0 * (2.0 * nf + 5.0) / (2.0 * nf + 15.0);
    let w1 = (w0 - 1.0) / (1.0 - w0 / 2.0);
    let mut th = (1.0 + w1) / (2.0 + w1);
    let mut out = vec![f64::NAN; steps];
    for k in (1..steps).step_by(2) {
        out[k] = th;
        th = th * (3.0 - th) / (2.0 * (1.0 + th - th * th));
    }
    out
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}

fn theta_recurrence() -> Outcome {
    let mut worst = 0.0f64;
    for n in [10, 50, 100] {
        let inst = gen_thm71(n).map_err(|e| e.to_string())?;
        let oracle = theta_oracle(n, 200);
        for (k, a) in sk_iterates(&inst, 200).map_err(|e| e.to_string())?.iter().enumerate().skip(1).step_by(2) {
            worst = worst.max((thm71_theta(a, n) - oracle[k]).abs());
        }
    }
    check(worst <= 1e-10, || format!("theta gap {worst:e}"))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for n in (10..=100).step_by(10) {
        let out = sk_run(&gen_thm71(n).unwrap(), 1e-6, 1_000_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
        let k = out.iterations().ok_or("no convergence")?;
        xs.push((n as f64).ln());
        ys.push(k as f64);
    }
    let (slope, r2) = least_squares(&xs, &ys);
    check(slope > 0.0 && r2 > 0.9, || format!("slope {slope}, R2 {r2}"))?;
    Ok(format!("theta gap {worst:.1e}, slope {slope:.2}, R2 {r2:.3}"))
}

fn prescaled_dimension_free() -> Outcome {
    let mut counts = Vec::new();
    for n in [20, 100, 500] {
        let inst = gen_thm71(n).unwrap();
        let m = prescale(inst.matrix(), inst.targets()).map_err(|e| e.to_string())?;
        let p = ScalingInstance::new(m, inst.targets().clone()).map_err(|e| e.to_string())?;
        let out = sk_run(&p, 1e-6, 1_000_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
        counts.push(out.iterations().ok_or("no convergence")?);
    }
    let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
    check(spread <= 2, || format!("iterations {counts:?}"))?;
    Ok(format!("iterations {counts:?}"))
}

fn outlier_independence() -> Outcome {
    let mut margin = f64::INFINITY;
    let mut all = Vec::new();
    for seed in 0..5u64 {
        let mut counts = Vec::new();
        for outlier in [1e2, 1e4, 1e6] {
            let mut rng = rng_from_seed(seed);
            let n = 8;
            let mut data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..=2.0)).collect();
            data[0] = outlier;
            let cost = Matrix::cost(n, n, data).map_err(|e| e.to_string())?;
            let t = Marginals::uniform(n, n).unwrap();
            margin = margin.min(well_bounded(&cost, &t, 2.0).kappa_margin);
            let out = log_sk_run(&LogMatrix::kernel(&cost, 1.0), &t, 1e-6, 1_000_000, None, None)
                .map_err(|e| e.to_string())?;
            check(out.converged, || "no convergence".into())?;
            counts.push(out.trace.len());
        }
        check(counts.iter().all(|&c| c == counts[0]), || format!("seed {seed}: iterations {counts:?}"))?;
        all.push(counts[0]);
    }
    check(margin >= 0.2, || format!("kappa margin {margin}"))?;
    Ok(format!("iterations per seed {all:?}, kappa margin {margin:.3}"))
}

/// Two SK steps on `[[p, 1/2 - p], [q, 1/2 - q]]`, back to row-normalized form.
fn two_steps(p: f64, q: f64) -> (f64, f64) {
    let c1 = p + q;
    let c2 = 1.0 - c1;
    let (a, b) = (p / (2.0 * c1), (0.5 - p) / (2.0 * c2));
    let (c, d) = (q / (2.0 * c1), (0.5 - q) / (2.0 * c2));
    (a / (2.0 * (a + b)), c / (2.0 * (c + d)))
}

fn critical_boundary() -> Outcome {
    let (p0, q0) = (0.5, 0.1);
    let inst = gen_critical2x2(p0, q0).map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3] {
        let out = sk_run(&inst, eps, 1_000_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
        let k = out.iterations().ok_or("no convergence")?;
        let bound = critical_bound(eps);
        check(k <= bound, || format!("eps {eps}: {k} steps > {bound}"))?;
        report.push(format!("{k}/{bound}"));
    }
    let steps = 1200;
    let run = sk_run(&inst, 1e-300, steps, &TraceOptions::default()).map_err(|e| e.to_string())?;
    let (mut p, mut q) = (p0, q0);
    let mut worst = 0.0f64;
    for k in (0..steps).step_by(2) {
        let delta = (2.0 * (p + q) - 1.0).abs();
        worst = worst.max((run.trace.records[k].total_err - delta).abs());
        let (sp, sq) = critical_step(p, q);
        let next = two_steps(p, q);
        worst = worst.max((sp - next.0).abs()).max((sq - next.1).abs());
        let dn = (2.0 * (next.0 + next.1) - 1.0).abs();
        worst = worst.max((critical_delta_next(delta, p - q) - dn).abs());
        (p, q) = next;
    }
    check(worst <= 1e-12, || format!("recurrence gap {worst:e}"))?;
    let (d0, d2) = (run.trace.records[0].total_err, run.trace.records[2].total_err);
    check((d0 - 0.2).abs() <= 1e-15 && (d2 - 1.0 / 7.0).abs() <= 1e-15, || format!("D0 {d0}, D2 {d2}"))?;
    Ok(format!("steps {}, recurrence gap {worst:.1e}, D2 {d2}", report.join(" ")))
}

fn nu_dependence() -> Outcome {
    let mut counts = Vec::new();
    for nu in [1e-3, 1e-6, 1e-9] {
        let g = gen_thm61(20, 12, 8, nu).map_err(|e| e.to_string())?;
        let out = sk_run(&g.instance, 1e-4, 10_000_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
        counts.push(out.iterations().ok_or("no convergence")? as f64);
    }
    for w in counts.windows(2) {
        check(w[1] - w[0] >= 0.5 * 3.0, || format!("iterations {counts:?}"))?;
    }
    let mut ratios = Vec::new();
    for eps in [1e-4, 1e-8] {
        for delta in [1e-2, 1e-4, 1e-8] {
            let inst = gen_tight2x2(1.0, delta, delta, 1.0).map_err(|e| e.to_string())?;
            let out = sk_run(&inst, eps, 10_000_000, &TraceOptions::default()).map_err(|e| e.to_string())?;
            ratios.push(out.iterations().ok_or("no convergence")? as f64 / -f64::ln(delta));
        }
        let band = &ratios[ratios.len() - 3..];
        let (lo, hi) = band.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        check(hi <= 4.0 * lo, || format!("eps {eps}: ratios {band:?}"))?;
    }
    Ok(format!("iterations {counts:?}, ratio band {:.2}..{:.2}", ratios.iter().copied().fold(f64::INFINITY, f64::min), ratios.iter().copied().fold(0.0, f64::max)))
}

fn decay_floor() -> Outcome {
    let mut tightest = f64::INFINITY;
    for n in [12usize, 20] {
        let (t, s) = (2 * n / 5, 3 * n / 5);
        for nu in [1e-3, 1e-6] {
            let g = gen_thm61(n, s, t, nu).map_err(|e| e.to_string())?;
            let floor = thm61_decay_floor(n, t, s);
            let its = sk_iterates(&g.instance, 201).map_err(|e| e.to_string())?;
            let eps: Vec<f64> =
                its.iter().enumerate().map(|(k, a)| thm61_epsilon(k, n, t, s, &thm61_theta(a, t, s))).collect();
            for k in 1..200 {
                let gap = eps[k + 1] - eps[k] * floor;
                check(gap > -1e-10, || format!("n={n} nu={nu} k={k}: gap {gap:e}"))?;
                tightest = tightest.min(gap);
            }
        }
    }
    Ok(format!("smallest gap {tightest:.1e}"))
}

fn engine_equivalence() -> Outcome {
    let mut rng = rng_from_seed(17);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let (m, n) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let cost = random_matrix(&mut rng, m, n, 0.0, 1.0);
        let cmax = cost.as_slice().iter().copied().fold(0.0, f64::max);
        let eta = rng.gen_range(0.1..=25.0) / cmax;
        let t = Marginals::new(random_probability(&mut rng, m), random_probability(&mut rng, n)).unwrap();
        let problem = EotProblem::new(cost, eta, t, false).map_err(|e| e.to_string())?;
        let a = solve_eot(&problem, 1e-300, 50, Domain::Direct).map_err(|e| e.to_string())?;
        let b = solve_eot(&problem, 1e-300, 50, Domain::Log).map_err(|e| e.to_string())?;
        for (x, y) in a.plan.as_slice().iter().zip(b.plan.as_slice()) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-9, || format!("max entry gap {worst:e}"))?;
    Ok(format!("max entry gap {worst:.1e}"))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("reduction exactness", reduction_exactness, 10.0),
        ("block constancy under reduction", block_constancy, 10.0),
        ("two-step block closed form", two_step_closed_form, 5.0),
        ("permanent laws", permanent_laws, 30.0),
        ("marginal monotonicity", marginal_monotonicity, 20.0),
        ("dense lower-bound family oracle", theta_recurrence, 60.0),
        ("prescaled iterations are dimension-free", prescaled_dimension_free, 60.0),
        ("outlier independence", outlier_independence, 30.0),
        ("critical 2x2 boundary", critical_boundary, 5.0),
        ("small-entry dependence", nu_dependence, 30.0),
        ("sub-dense decay floor", decay_floor, 10.0),
        ("direct and log engines agree", engine_equivalence, 10.0),
    ];
    let mut failed = Vec::new();
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let outcome = outcome.and_then(|d| if secs < limit { Ok(d) } else { Err(format!("{d}; over {limit}s")) });
        match outcome {
            Ok(detail) => println!("PASS {name} ({detail}, {secs:.2}s)"),
            Err(detail) => {
                println!("FAIL {name} ({detail}, {secs:.2}s)");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
