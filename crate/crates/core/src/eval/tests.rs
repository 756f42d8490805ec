use super::*;
use crate::model::{AnalyticGaussianScore, ZeroScore};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::Rng;

const GAPS: &str = include_str!("../../../../data/horizon_gap.csv");

fn mat(rows: usize, cols: usize, v: &[f64]) -> Mat {
    Mat::from_vec(rows, cols, v.to_vec()).unwrap()
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::stream(&[seed, 99]);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn normalized_return_cases() {
    assert_eq!(normalized_return(5.0, 0.0, 10.0).unwrap(), 50.0);
    assert_eq!(normalized_return(10.0, 0.0, 10.0).unwrap(), 100.0);
    assert_eq!(normalized_return(2.0, 2.0, 7.0).unwrap(), 0.0);
    assert!(normalized_return(1.0, 3.0, 3.0).is_err());
}

proptest! {
    #[test]
    fn normalized_return_is_affine_invariant(
        j in -10.0f64..10.0, jr in -5.0f64..0.0, je in 1.0f64..10.0, c in 0.1f64..5.0, d in -3.0f64..3.0,
    ) {
        let a = normalized_return(j, jr, je).unwrap();
        let b = normalized_return(c * j + d, c * jr + d, c * je + d).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}

/// `(lambda / 2) (E|S| - (2p - 1) E S)` with `S` a sum of four independent
/// spins, using binomial weights.
fn exploit_oracle(lambda: f64, p: f64) -> f64 {
    let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut e_abs = 0.0;
    for (k, c) in binom.iter().enumerate() {
        let s = 2.0 * k as f64 - 4.0;
        e_abs += c * p.powi(k as i32) * (1.0 - p).powi(4 - k as i32) * s.abs();
    }
    let e_s = 4.0 * (2.0 * p - 1.0);
    0.5 * lambda * (e_abs - (2.0 * p - 1.0) * e_s)
}

#[test]
fn exact_exploitability_cases() {
    let spec = EnvSpec::ising(5, 1.3);
    let e = |p| exploitability_exact_ising(&spec, BernoulliPolicy { p_up: p }).unwrap();
    assert_eq!(e(1.0), 0.0);
    assert_eq!(e(0.0), 0.0);
    assert!((e(0.5) - 0.75 * 1.3).abs() < 1e-12);
    for k in 0..=20 {
        let p = k as f64 / 20.0;
        assert!(e(p) >= 0.0);
        assert!((e(p) - exploit_oracle(1.3, p)).abs() < 1e-12, "p = {p}");
    }
}

#[test]
fn exploitability_rejects_bad_inputs() {
    let gs = EnvSpec::gaussian_squeeze(8, 2, 1, 1);
    let pol = BernoulliPolicy { p_up: 0.5 };
    assert!(matches!(exploitability_exact_ising(&gs, pol), Err(Error::UnsupportedEnv { .. })));
    assert!(exploitability_learned(&gs, pol, BestResponse::Greedy, 10, 0).is_err());
    assert!(exploitability_exact_ising(&EnvSpec::ising(2, 1.0), pol).is_err());
    let spec = EnvSpec::ising(4, 1.0);
    assert!(exploitability_learned(&spec, pol, BestResponse::Greedy, 0, 0).is_err());
}

#[test]
fn learned_exploitability_recovers_uniform_value() {
    let spec = EnvSpec::ising(4, 1.0);
    let pol = BernoulliPolicy { p_up: 0.5 };
    let exact = exploitability_exact_ising(&spec, pol).unwrap();
    for m in [BestResponse::Greedy, BestResponse::Reinforce] {
        let est = exploitability_learned(&spec, pol, m, 20_000, 3).unwrap();
        assert!(est.raw >= 0.9 * exact, "{m:?}: {} vs {exact}", est.raw);
        assert!(est.raw <= exact + 3.0 * est.std, "{m:?}: {} vs {exact}", est.raw);
    }
}

#[test]
fn aligned_policy_is_unexploitable() {
    let spec = EnvSpec::ising(4, 1.0);
    let est = exploitability_learned(&spec, BernoulliPolicy { p_up: 1.0 }, BestResponse::Greedy, 2000, 0).unwrap();
    assert!(est.raw.abs() < 1e-12);
    assert_eq!(est.reported(), 0.0);
}

#[test]
fn learned_estimates_are_repeatable() {
    let spec = EnvSpec::ising(4, 1.0);
    let pol = BernoulliPolicy { p_up: 0.3 };
    let a = exploitability_learned(&spec, pol, BestResponse::Greedy, 8000, 1).unwrap();
    let b = exploitability_learned(&spec, pol, BestResponse::Greedy, 8000, 2).unwrap();
    let combined = (a.std * a.std + b.std * b.std).sqrt();
    assert!((a.raw - b.raw).abs() <= 2.0 * combined + 1e-12, "{} vs {}", a.raw, b.raw);
}

#[test]
fn learned_exploitability_is_sandwiched_by_exact() {
    let spec = EnvSpec::ising(4, 0.8);
    let mut r = rng::stream(&[17]);
    for k in 0..20 {
        let pol = BernoulliPolicy { p_up: r.random() };
        let exact = exploitability_exact_ising(&spec, pol).unwrap();
        let est = exploitability_learned(&spec, pol, BestResponse::Greedy, 3000, k).unwrap();
        assert!(est.raw <= exact + 3.0 * est.std + 1e-12, "p {}: {} > {exact}", pol.p_up, est.raw);
    }
}

fn brute_force_assignment(c: &Mat) -> f64 {
    fn go(c: &Mat, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

proptest! {
    #[test]
    fn assignment_matches_brute_force(n in 1usize..7, seed in 0u64..1000) {
        let mut r = rng::stream(&[seed]);
        let c = Mat::from_vec(n, n, (0..n * n).map(|_| r.random_range(0.0..10.0)).collect()).unwrap();
        let perm = assignment(&c).unwrap();
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        prop_assert!((cost - brute_force_assignment(&c)).abs() < 1e-9);
    }
}

#[test]
fn w2_small_cases() {
    let a = mat(2, 1, &[0.0, 2.0]);
    let b = mat(2, 1, &[3.0, 1.0]);
    assert!((w2_squared(&a, &b, W2Method::ExactAssignment).unwrap() - 1.0).abs() < 1e-15);
    assert!((w2_squared(&a, &b, W2Method::sliced()).unwrap() - 1.0).abs() < 1e-9);
    let x = gaussian(40, 3, 1);
    assert_eq!(w2_squared(&x, &x, W2Method::ExactAssignment).unwrap(), 0.0);
    assert!(w2_squared(&x, &x, W2Method::sliced()).unwrap().abs() < 1e-12);
    let mean_cost = {
        let c = cost_matrix(&x, &x);
        c.data.iter().sum::<f64>() / c.data.len() as f64
    };
    let s = w2_squared(&x, &x, W2Method::sinkhorn()).unwrap();
    assert!(s >= 0.0 && s < 0.1 * mean_cost, "sinkhorn self-distance {s} vs mean cost {mean_cost}");
}

#[test]
fn w2_exact_equals_sliced_in_one_dimension() {
    let a = gaussian(50, 1, 2);
    let b = gaussian(50, 1, 3);
    let e = w2_squared(&a, &b, W2Method::ExactAssignment).unwrap();
    let s = w2_squared(&a, &b, W2Method::sliced()).unwrap();
    assert!((e - s).abs() < 1e-9);
}

#[test]
fn w2_errors() {
    let a = gaussian(4, 2, 0);
    assert!(matches!(w2_squared(&a, &gaussian(4, 3, 0), W2Method::ExactAssignment), Err(Error::Shape(_))));
    let big = gaussian(EXACT_CAP + 1, 1, 0);
    assert!(w2_squared(&big, &big, W2Method::ExactAssignment).is_err());
    assert!(w2_squared(&a, &gaussian(5, 2, 0), W2Method::ExactAssignment).is_err());
    assert!(w2_squared(&a, &gaussian(5, 2, 0), W2Method::sinkhorn()).is_ok());
}

#[test]
fn sinkhorn_approaches_exact_with_small_epsilon() {
    let a = gaussian(12, 2, 4);
    let b = gaussian(12, 2, 5);
    let e = w2_squared(&a, &b, W2Method::ExactAssignment).unwrap();
    let s = w2_squared(&a, &b, W2Method::Sinkhorn { iters: 500, epsilon_scale: 0.005 }).unwrap();
    assert!((s - e).abs() < 0.05 * e, "{s} vs {e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn w2_metric_axioms(seed in 0u64..10_000) {
        let a = gaussian(6, 2, seed);
        let b = gaussian(6, 2, seed + 1);
        let c = gaussian(6, 2, seed + 2);
        let d = |x: &Mat, y: &Mat| w2_squared(x, y, W2Method::ExactAssignment).unwrap().sqrt();
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) > 0.0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }
}

#[test]
fn sliced_does_not_exceed_exact_on_average() {
    let mut gap = Vec::new();
    for s in 0..20 {
        let a = gaussian(16, 3, 100 + s);
        let b = gaussian(16, 3, 200 + s);
        let e = w2_squared(&a, &b, W2Method::ExactAssignment).unwrap();
        let sl = w2_squared(&a, &b, W2Method::Sliced { projections: 64, seed: s }).unwrap();
        gap.push(e - sl);
    }
    assert!(stats::mean(&gap) > 0.0);
}

#[test]
fn loglog_recovers_planted_rate() {
    let ns = [16.0, 32.0, 64.0, 128.0, 256.0];
    let ys: Vec<f64> = ns.iter().map(|n| 3.0 / n).collect();
    let (a, b) = fit_loglog(&ns, &ys).unwrap();
    assert!((b + 1.0).abs() < 1e-12);
    assert!((a - 3.0f64.ln()).abs() < 1e-12);
    assert!(fit_loglog(&[1.0, 2.0], &[1.0, 0.0]).is_err());
}

#[test]
fn poc_without_interaction_is_degenerate() {
    let sample = |n: usize, seed: u64| -> Result<Mat> {
        let mut out = Mat::zeros(n, 2);
        for i in 0..n {
            let mut r = rng::stream(&[seed, i as u64]);
            out.row_mut(i).iter_mut().for_each(|v| *v = r.sample(StandardNormal));
        }
        Ok(out)
    };
    let c = poc_curve(&sample, &[8, 16], 64, 4, &[0, 1, 2]).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.slope, 0.0);
    assert!(c.slope_ci.0 <= 0.0 && 0.0 <= c.slope_ci.1);
}

#[test]
fn poc_argument_checks() {
    let sample = |n: usize, _s: u64| Ok(Mat::zeros(n, 1));
    assert!(poc_curve(&sample, &[8, 16], 64, 4, &[0, 1]).is_err());
    assert!(poc_curve(&sample, &[8, 16], 64, 9, &[0, 1, 2]).is_err());
    assert!(poc_curve(&sample, &[8, 16], 32, 4, &[0, 1, 2]).is_err());
}

#[test]
fn spectral_norm_of_linear_maps() {
    let x = vec![0.3, -0.2, 0.9];
    let id = |v: &[f64]| Ok(v.to_vec());
    let (l, ok) = spectral_norm_fd(&id, &x, 1e-4).unwrap();
    assert!(ok && (l - 1.0).abs() < 1e-9);
    let dt = 0.01;
    let lin = |v: &[f64]| Ok(v.iter().map(|a| a + dt * 0.5 * a).collect());
    let (l, ok) = spectral_norm_fd(&lin, &x, 1e-4).unwrap();
    assert!(ok && (l - (1.0 + 0.5 * dt)).abs() < 1e-9);
    let skew = |v: &[f64]| Ok(vec![3.0 * v[0] + v[1], v[1] - v[2]]);
    let (l, _) = spectral_norm_fd(&skew, &x, 1e-4).unwrap();
    // Largest singular value of [[3, 1, 0], [0, 1, -1]].
    let (a, b, c) = (10.0f64, 1.0f64, 2.0f64);
    let top = ((a + c) + ((a - c).powi(2) + 4.0 * b * b).sqrt()) / 2.0;
    assert!((l - top.sqrt()).abs() < 1e-8);
}

#[test]
fn lipschitz_of_analytic_score_matches_closed_form() {
    let sched = DiffusionSchedule::default();
    let score = AnalyticGaussianScore { schedule: sched, dim: 3 };
    let probes = vec![gaussian(2, 3, 7)];
    let dt = sched.dt();
    for t in [0.1, 0.5, 0.9] {
        let mv = sched.marginal_var(t);
        let g2 = sched.diffusion(t).powi(2);
        let r = effective_lipschitz(&score, &sched, StepMap::ScoreOnly, &probes, &[t], dt, 10).unwrap();
        assert!((r.l_eff - (1.0 - dt * g2 / mv).abs()).abs() < 1e-8);
        let r = effective_lipschitz(&score, &sched, StepMap::Full, &probes, &[t], dt, 10).unwrap();
        let expected = (1.0 - 0.5 * sched.beta(t) * dt).abs();
        assert!((r.l_eff - expected).abs() < 1e-8);
        assert!((r.l_eff_h - 10.0 * r.l_eff).abs() < 1e-12);
        assert!(r.converged);
    }
    let zero = ZeroScore { dim: 3 };
    let r = effective_lipschitz(&zero, &sched, StepMap::ScoreOnly, &probes, &[0.5], dt, 1).unwrap();
    assert!((r.l_eff - 1.0).abs() < 1e-9);
    assert!(effective_lipschitz(&zero, &sched, StepMap::Full, &[], &[0.5], dt, 1).is_err());
}

fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0.ln(), acc.1 + p.1.ln()));
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = points.iter().map(|p| (p.0.ln() - mx) * (p.1.ln() - my)).sum();
    let den: f64 = points.iter().map(|p| (p.0.ln() - mx).powi(2)).sum();
    num / den
}

#[test]
fn horizon_fit_recovers_planted_exponents() {
    let hs = [10.0f64, 25.0, 50.0, 100.0, 200.0];
    for b in [1.0, 2.0, 3.0] {
        let seeds: Vec<Vec<(f64, f64)>> =
            (1..4).map(|c| hs.iter().map(|&h| (h, c as f64 * h.powf(b))).collect()).collect();
        let fit = horizon_fit(&seeds, &[25.0, 50.0, 100.0], 200, 0).unwrap();
        assert!((fit.b - b).abs() < 1e-9, "{} vs {b}", fit.b);
        assert!(fit.per_seed.iter().all(|p| (p.1 - b).abs() < 1e-9));
    }
}

#[test]
fn horizon_fit_on_recorded_gaps() {
    let rows = parse_gap_csv(GAPS).unwrap();
    assert_eq!(rows.len(), 50);
    let window = [25.0, 50.0, 100.0];
    let battle = gap_series(&rows, "battle");
    assert_eq!(battle.len(), 5);
    let fit = horizon_fit(&battle, &window, BOOTSTRAP_REPLICATES, 0).unwrap();
    let seed0: Vec<(f64, f64)> = battle[0].iter().copied().filter(|p| window.contains(&p.0)).collect();
    assert!((fit.per_seed[0].1 - ls_slope(&seed0)).abs() < 1e-12);
    assert!((fit.per_seed[0].1 - 1.88).abs() < 0.01);
    assert!((1.86..=1.98).contains(&fit.b), "battle b = {}", fit.b);
    assert!(fit.ci.0 <= fit.b && fit.b <= fit.ci.1);
    let gs = horizon_fit(&gap_series(&rows, "gaussian_squeeze"), &window, BOOTSTRAP_REPLICATES, 0).unwrap();
    assert!((1.99..=2.11).contains(&gs.b), "gs b = {}", gs.b);
}

#[test]
fn horizon_fit_errors() {
    let good = vec![vec![(25.0, 1.0), (50.0, 4.0)]];
    assert!(horizon_fit(&good, &[25.0, 50.0], 10, 0).is_ok());
    assert!(horizon_fit(&[vec![(25.0, 1.0), (50.0, 0.0)]], &[25.0, 50.0], 10, 0).is_err());
    assert!(horizon_fit(&good, &[25.0], 10, 0).is_err());
    assert!(parse_gap_csv("h,gap\n1,2\n").is_err());
}

#[test]
fn transition_error_cases() {
    let spec = EnvSpec::gaussian_squeeze(3, 2, 2, 1);
    let record = crate::offline::EpisodeRecord::new(env::reset(&spec, 0).unwrap());
    let mut ex = Execution { record, transition_errors: Vec::new(), plan_calls: 0, work: 0.0 };
    assert!(matches!(transition_error(&ex), Err(Error::Missing(_))));
    let expected = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let same = crate::plan::step_transition_error(2, &expected, &expected);
    let shifted: Vec<f64> = expected.iter().enumerate().map(|(k, v)| v + if k % 2 == 0 { 0.3 } else { 0.4 }).collect();
    let off = crate::plan::step_transition_error(2, &shifted, &expected);
    assert_eq!(same, 0.0);
    assert!((off - 0.5).abs() < 1e-12);
    ex.transition_errors = vec![same, off];
    assert!((transition_error(&ex).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn metrics_csv_round_trip() {
    let mut a = MetricRecord::new("poc_w2", "gaussian_squeeze", 0.012345678912);
    a.n = 64;
    a.seed = 3;
    a.slope = Some(-0.97);
    a.ci_lo = Some(-1.1);
    a.ci_hi = Some(-0.9);
    let b = MetricRecord::new("normalized_return", "gaussian_squeeze", 72.5);
    let text = format_metrics(&[a.clone(), b]).unwrap();
    assert!(text.starts_with(METRIC_HEADER));
    let back = parse_metrics(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].slope, Some(-0.97));
    assert!((back[0].value - a.value).abs() < 1e-9 * a.value);
    assert_eq!(format_metrics(&back).unwrap(), text);
    let mut bad = a;
    bad.ci_lo = Some(0.0);
    assert!(format_metrics(&[bad]).is_err());
    assert!(format_metrics(&[MetricRecord::new("x", "e", f64::NAN)]).is_err());
}
