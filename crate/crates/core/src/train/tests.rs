use super::*;
use crate::env::TrajectoryLayout;
use crate::model::{AnalyticGaussianScore, ScoreConfig};
use crate::offline::{collect_split, train_mfq, MfqConfig, Split};

fn sched() -> DiffusionSchedule {
    DiffusionSchedule::default()
}

fn tiny_model(layout: TrajectoryLayout, seed: u64) -> ScoreModel {
    let cfg = ScoreConfig { hidden: 16, depth: 1, time_embed: 8, interaction_hidden: 8, kernel_rank: 2, ..Default::default() };
    ScoreModel::seeded(layout, cfg, seed).unwrap()
}

fn gaussian_pops(count: usize, n: usize, d: usize, seed: u64) -> Vec<Mat> {
    let mut r = rng::stream(&[seed]);
    (0..count)
        .map(|_| Mat { rows: n, cols: d, data: (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect() })
        .collect()
}

#[test]
fn forward_noise_at_zero_is_identity() {
    let x = gaussian_pops(1, 3, 4, 1).remove(0);
    let (xt, _) = forward_noise(&sched(), &x, 0.0, &mut rng::stream(&[2])).unwrap();
    assert_eq!(xt, x);
}

#[test]
fn forward_noise_is_reproducible() {
    let x = gaussian_pops(1, 3, 4, 1).remove(0);
    let a = forward_noise(&sched(), &x, 0.4, &mut rng::stream(&[5])).unwrap();
    let b = forward_noise(&sched(), &x, 0.4, &mut rng::stream(&[5])).unwrap();
    assert_eq!(a, b);
    assert!(forward_noise(&sched(), &x, 1.5, &mut rng::stream(&[5])).is_err());
}

#[test]
fn forward_noise_variance_matches_marginal() {
    let s = sched();
    for &t in &[0.05, 0.3, 1.0] {
        let x = gaussian_pops(1, 10_000, 1, 3).remove(0);
        let (xt, _) = forward_noise(&s, &x, t, &mut rng::stream(&[9])).unwrap();
        let v = stats::variance(&xt.data);
        assert!((v / s.marginal_var(t) - 1.0).abs() < 0.05, "t={t} var={v}");
    }
}

#[test]
fn loss_trivial_cases() {
    let target = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    assert_eq!(mfvsm_loss(&target, &target, None, 1.0, 0.0).unwrap(), 0.0);
    let zero = Mat::zeros(2, 2);
    let expect = (1.0 + 4.0 + 0.25 + 9.0) / 4.0;
    assert_eq!(mfvsm_loss(&zero, &target, None, 1.0, 0.0).unwrap(), expect);
    assert!(mfvsm_loss(&zero, &Mat::zeros(3, 2), None, 1.0, 0.0).is_err());
}

#[test]
fn loss_reward_term_on_two_agents() {
    let target = Mat::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
    let g = Mat::from_vec(2, 3, vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.0]).unwrap();
    let (alpha, lambda) = (0.5, 0.3);
    let mut direct = 0.0;
    for i in 0..2 {
        for c in 0..3 {
            let d = target.get(i, c) - g.get(i, c);
            direct += d * d;
        }
    }
    direct = lambda / alpha * direct / 6.0;
    let got = mfvsm_loss(&target, &target, Some(&g), alpha, lambda).unwrap();
    assert!((got - direct).abs() < 1e-15);

    let s = Mat::from_vec(2, 3, vec![0.0, 1.0, 0.0, -1.0, 0.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let sv = tape.leaf(s.clone());
    let l = mfvsm_loss_tape(&mut tape, sv, &target, Some(&g), alpha, lambda, 2.0).unwrap();
    let want = 2.0 * mfvsm_loss(&s, &target, Some(&g), alpha, lambda).unwrap();
    assert!((tape.scalar(l) - want).abs() < 1e-14);
}

fn flat(d: &DiffusionSchedule, n: usize) -> SubdivisionSchedule {
    SubdivisionSchedule::new(n, 1, 0, d, 0.0).unwrap()
}

#[test]
fn single_level_is_plain_denoising() {
    let d = sched();
    let cfg = TrainConfig::new(flat(&d, 6));
    assert_eq!(cfg.subdivision.n_levels, vec![6]);
    assert_eq!(cfg.subdivision.window(0), (d.t_min, d.t_max));
    assert_eq!(cfg.subdivision.level_weights(cfg.weighting), vec![1.0]);
}

fn run(cfg: &TrainConfig, pops: &[Mat], epochs: usize) -> ScoreModel {
    let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 2 };
    let mut m = tiny_model(layout, 7);
    let mut opt = Adam::new(m.params.len(), cfg.lr);
    let norm = Normalizer::identity(layout.dim());
    for e in 0..epochs {
        train_epoch(&mut m, &mut opt, pops, None, &norm, cfg, e).unwrap();
    }
    m
}

#[test]
fn training_is_deterministic() {
    let d = sched();
    let pops = gaussian_pops(6, 8, 5, 2);
    let mut cfg = TrainConfig::new(SubdivisionSchedule::new(8, 2, 1, &d, 0.1).unwrap());
    cfg.batch = 4;
    let a = run(&cfg, &pops, 2);
    let b = run(&cfg, &pops, 2);
    assert_eq!(a.params.data, b.params.data);
    cfg.seed = 1;
    assert_ne!(run(&cfg, &pops, 2).params.data, a.params.data);
}

#[test]
fn unit_weights_make_both_paths_agree() {
    let d = sched();
    let pops = gaussian_pops(4, 8, 5, 4);
    let mut cfg = TrainConfig::new(SubdivisionSchedule::new(8, 1, 3, &{
        let mut s = d;
        s.n_steps = 200;
        s
    }, 0.1).unwrap());
    cfg.weighting = LevelWeighting::PracticalBPow;
    let a = run(&cfg, &pops, 1);
    cfg.weighting = LevelWeighting::Uniform;
    let b = run(&cfg, &pops, 1);
    assert_eq!(a.params.data, b.params.data);
    cfg.weighting = LevelWeighting::Theoretical;
    assert_ne!(run(&cfg, &pops, 1).params.data, a.params.data);
}

#[test]
fn level_larger_than_episode_is_rejected() {
    let d = sched();
    let pops = gaussian_pops(2, 4, 5, 4);
    let cfg = TrainConfig::new(flat(&d, 8));
    let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 2 };
    let mut m = tiny_model(layout, 7);
    let mut opt = Adam::new(m.params.len(), cfg.lr);
    let err = train_epoch(&mut m, &mut opt, &pops, None, &Normalizer::identity(5), &cfg, 0);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn loss_is_exchangeable_under_agent_permutation() {
    let d = sched();
    let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 2 };
    let m = tiny_model(layout, 3);
    let x0 = gaussian_pops(1, 7, 5, 8).remove(0);
    let (xt, eps) = forward_noise(&d, &x0, 0.3, &mut rng::stream(&[1])).unwrap();
    let base = mfvsm_loss(&m.forward(0.3, &xt).unwrap(), &denoising_target(&d, 0.3, &eps), None, 1.0, 0.0).unwrap();
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let xp = crate::model::gather_rows(&xt, &perm);
    let ep = crate::model::gather_rows(&eps, &perm);
    let l = mfvsm_loss(&m.forward(0.3, &xp).unwrap(), &denoising_target(&d, 0.3, &ep), None, 1.0, 0.0).unwrap();
    assert!((l - base).abs() <= 1e-12 * base);
}

#[test]
fn analytic_model_has_zero_error() {
    let d = sched();
    let pops = gaussian_pops(4, 8, 3, 1);
    let src = AnalyticGaussianScore { schedule: d, dim: 3 };
    let e = score_error(&src, &pops, &d, (d.t_min, d.t_max), ScoreTarget::AnalyticGaussian, 50, 0).unwrap();
    assert!(e < 1e-6);
    assert!(score_error(&src, &[], &d, (d.t_min, d.t_max), ScoreTarget::Denoising, 5, 0).is_err());
}

#[test]
fn zero_model_error_is_target_rms() {
    let d = sched();
    let pops = gaussian_pops(3, 5, 2, 6);
    let zero = crate::model::ZeroScore { dim: 2 };
    let window = (0.2, 0.6);
    let got = score_error(&zero, &pops, &d, window, ScoreTarget::Denoising, 30, 4).unwrap();
    let mut sq = 0.0;
    let mut n = 0;
    for k in 0..30u64 {
        let mut r = rng::stream(&[4, tag::EVAL, k]);
        let pop = &pops[k as usize % 3];
        let t: f64 = r.random_range(window.0..window.1);
        let (_, eps) = forward_noise(&d, pop, t, &mut r).unwrap();
        let s = d.noise_std(t);
        sq += eps.data.iter().map(|e| e * e / (s * s)).sum::<f64>();
        n += pop.rows;
    }
    assert!((got - (sq / n as f64).sqrt()).abs() < 1e-12);
}

struct TimeScaled(usize);

impl ScoreSource for TimeScaled {
    fn dim(&self) -> usize {
        self.0
    }
    fn score(&self, t: f64, x: &Mat) -> Result<Mat> {
        Ok(x.map(|v| -t * v))
    }
}

#[test]
fn global_error_reaggregates_level_errors() {
    let d = sched();
    let sub = SubdivisionSchedule::new(8, 2, 3, &d, 0.1).unwrap();
    let pops = gaussian_pops(8, 16, 3, 2);
    let src = TimeScaled(3);
    let draws = 4000;
    let global = score_error(&src, &pops, &d, (d.t_min, d.t_max), ScoreTarget::AnalyticGaussian, draws, 1).unwrap();
    let width = d.t_max - d.t_min;
    let mut agg = 0.0;
    for k in 0..=sub.k_levels {
        let w = sub.window(k);
        let e = score_error(&src, &pops, &d, w, ScoreTarget::AnalyticGaussian, draws, 10 + k as u64).unwrap();
        agg += (w.1 - w.0) / width * e * e;
    }
    assert!((global * global / agg - 1.0).abs() < 0.05, "{} vs {agg}", global * global);
}

#[test]
fn loss_trends_down_on_squeeze_expert_data() {
    let spec = crate::env::EnvSpec::gaussian_squeeze(16, 8, 1, 1);
    let art = train_mfq(&spec, &MfqConfig { iterations: 60, ..Default::default() }, 0).unwrap();
    let ds = collect_split(&spec, &art, Split::Expert, 40, 1, 11).unwrap();
    let d = sched();
    let mut bundle = ModelBundle::new(tiny_model(spec.layout(), 0), fit_normalizer(&ds).unwrap());
    let mut cfg = TrainConfig::new(SubdivisionSchedule::new(16, 2, 2, &{
        let mut s = d;
        s.n_steps = 198;
        s
    }, 0.1).unwrap());
    cfg.batch = 4;
    cfg.lr = 2e-3;
    cfg.loss_weighting = LossWeighting::NoiseVariance;
    let pops = normalized_populations(&ds, &bundle.normalizer);
    let mut opt = Adam::new(bundle.score.params.len(), cfg.lr);
    let mut totals = Vec::new();
    for e in 0..20 {
        let rep = train_epoch(&mut bundle.score, &mut opt, &pops, Some(&spec), &bundle.normalizer, &cfg, e).unwrap();
        totals.push(rep.objective);
    }
    let ma: Vec<f64> = totals.windows(5).map(stats::mean).collect();
    let xs: Vec<f64> = (0..ma.len()).map(|i| i as f64).collect();
    let (_, slope) = stats::linear_fit(&xs, &ma);
    assert!(slope < 0.0 && ma[ma.len() - 1] < ma[0], "{totals:?}");
}

#[test]
fn fit_resumes_epoch_counter_and_logs() {
    let spec = crate::env::EnvSpec::gaussian_squeeze(8, 3, 1, 1);
    let art = train_mfq(&spec, &MfqConfig { iterations: 20, ..Default::default() }, 0).unwrap();
    let ds = collect_split(&spec, &art, Split::Expert, 6, 1, 11).unwrap();
    let (tr, held) = ds.split_at(4);
    let mut bundle = ModelBundle::new(tiny_model(spec.layout(), 0), fit_normalizer(&tr).unwrap());
    let mut cfg = TrainConfig::new(SubdivisionSchedule::new(8, 2, 1, &sched(), 0.1).unwrap());
    cfg.epochs = 2;
    cfg.lambda = 0.1;
    let a = fit(&mut bundle, &tr, &held, Some(&spec), &cfg).unwrap();
    assert_eq!(bundle.epoch, 2);
    assert_eq!(a.log.len(), 4);
    let b = fit(&mut bundle, &tr, &held, Some(&spec), &cfg).unwrap();
    assert_eq!(b.log[0].epoch, 2);
    assert!(format_log(&b.log).starts_with(LOG_HEADER));
}
