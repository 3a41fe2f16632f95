use dpfed_core::accountant::{build_privacy_table, table_delta, MomentsAccountant, TableRow};
use dpfed_core::estimators::EstimatorKind;
use dpfed_core::fedtrain::{
    run_training, sample_fixed, sample_users, user_update_fedavg, user_update_fedsgd, Algorithm, BatchSize,
    ClipSchedule, Sequential, TrainingConfig,
};
use dpfed_core::model::{loss_and_grad, mean_loss, synthesize_dataset, BigramSoftmax, Model, SynthesisConfig, TinyRnn, TokenDataset};
use dpfed_core::rng::{substream, Purpose};
use dpfed_core::ClipConfig;

fn dataset(users: usize, tokens: usize, vocab: usize, seed: u64) -> TokenDataset {
    let cfg = SynthesisConfig {
        users,
        tokens_per_user: tokens,
        vocab,
        heterogeneity: 0.3,
        seed,
    };
    synthesize_dataset(&cfg, 10, tokens as f64).unwrap()
}

#[test]
fn poisson_sample_size_matches_binomial() {
    let k = 763_430usize;
    let q = 100.0 / k as f64;
    let rounds = 10_000u64;
    let mut total = 0usize;
    for round in 0..rounds {
        let mut rng = substream(3, round, Purpose::Sampling, 0);
        let s = sample_users(k, q, &mut rng);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.last().is_none_or(|&i| i < k));
        total += s.len();
    }
    let mean = total as f64 / rounds as f64;
    let sd_of_mean = (k as f64 * q * (1.0 - q) / rounds as f64).sqrt();
    assert!((mean - 100.0).abs() < 3.0 * sd_of_mean, "mean {mean}, sd {sd_of_mean}");
}

#[test]
fn poisson_inclusion_is_uniform_over_users() {
    let k = 20usize;
    let q = 0.3;
    let trials = 20_000u64;
    let mut hits = vec![0u32; k];
    for t in 0..trials {
        for i in sample_users(k, q, &mut substream(9, t, Purpose::Sampling, 0)) {
            hits[i] += 1;
        }
    }
    let sd = (trials as f64 * q * (1.0 - q)).sqrt();
    for h in hits {
        assert!((h as f64 - trials as f64 * q).abs() < 4.0 * sd, "{h}");
    }
}

#[test]
fn fixed_sample_of_one_hundred() {
    let mut counts = vec![0u32; 1000];
    for t in 0..200 {
        let s = sample_fixed(1000, 100, &mut substream(1, t, Purpose::Sampling, 0));
        assert_eq!(s.len(), 100);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for i in s {
            counts[i] += 1;
        }
    }
    // every user has expected count 20
    assert!(counts.iter().all(|&c| c > 0 && c < 50));
}

#[test]
fn fedavg_single_full_batch_equals_fedsgd() {
    let data = dataset(6, 300, 12, 2);
    let models: Vec<Box<dyn Model>> = vec![Box::new(BigramSoftmax::new(12).unwrap()), Box::new(TinyRnn::new(12, 5).unwrap())];
    for model in &models {
        let theta = model.init_params(4);
        for shard in data.users() {
            let mut r1 = substream(0, 1, Purpose::LocalTraining, shard.user_id);
            let mut r2 = r1.clone();
            let avg = user_update_fedavg(
                model.as_ref(),
                shard,
                &theta,
                10,
                1,
                BatchSize::Full,
                2.5,
                &ClipConfig::disabled(),
                ClipSchedule::Greedy,
                &mut r1,
            )
            .unwrap();
            let sgd = user_update_fedsgd(model.as_ref(), shard, &theta, 10, BatchSize::Full, 2.5, &ClipConfig::disabled(), &mut r2).unwrap();
            let diff = avg.delta.sub(&sgd.delta).unwrap().flat_norm();
            assert!(diff <= 1e-12, "{diff}");

            let (_, grad) = loss_and_grad(model.as_ref(), &theta, &shard.sequences(10)).unwrap();
            let direct = grad.scale(-2.5);
            assert!(sgd.delta.sub(&direct).unwrap().flat_norm() <= 1e-12);
        }
    }
}

#[test]
fn full_participation_fedsgd_is_gradient_descent() {
    let data = dataset(8, 200, 10, 7);
    let model = BigramSoftmax::new(10).unwrap();
    let eval = data.all_sequences();
    let eta = 0.5;
    let rounds = 15;
    let cfg = TrainingConfig {
        q: 1.0,
        fixed_sample_size: Some(data.len()),
        noise_enabled: false,
        clip: ClipConfig::disabled(),
        algorithm: Algorithm::FedSgd {
            batch_size: BatchSize::Full,
            learning_rate: eta,
        },
        rounds,
        eval_every: 1,
        ..TrainingConfig::default()
    };
    let out = run_training(cfg, &model, &data, &eval, &Sequential).unwrap();

    // direct loop: theta -= eta * weighted mean of per-user mean gradients
    let w = data.total_weight();
    let mut theta = model.init_params(0);
    let mut losses = vec![mean_loss(&model, &theta, &eval).unwrap()];
    for _ in 0..rounds {
        let mut step = theta.zeros_like();
        for shard in data.users() {
            let (_, g) = loss_and_grad(&model, &theta, &shard.sequences(10)).unwrap();
            step.add_scaled_assign(&g, -eta * shard.weight / w).unwrap();
        }
        theta.add_assign(&step).unwrap();
        losses.push(mean_loss(&model, &theta, &eval).unwrap());
    }
    let gap = out.params.sub(&theta).unwrap().flat_norm();
    assert!(gap <= 1e-12, "{gap}");
    assert!(losses.windows(2).all(|p| p[1] < p[0]), "{losses:?}");
    for (log, want) in out.logs.iter().zip(&losses[1..]) {
        let got = log.eval.as_ref().unwrap().loss;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn reported_epsilon_matches_privacy_table() {
    let data = dataset(200, 60, 8, 1);
    let model = BigramSoftmax::new(8).unwrap();
    let eval = data.all_sequences();
    let cfg = TrainingConfig {
        q: 0.05,
        z: 1.0,
        clip: ClipConfig::flat(0.3),
        rounds: 100,
        eval_every: 50,
        ..TrainingConfig::default()
    };
    let out = run_training(cfg, &model, &data, &eval, &Sequential).unwrap();
    let table = build_privacy_table(
        &[TableRow {
            users: 200,
            expected_users: 10,
            z: 1.0,
        }],
        &[1, 10, 100],
    )
    .unwrap();
    for entry in table {
        let log = &out.logs[entry.rounds as usize - 1];
        assert_eq!(log.epsilon, Some(entry.epsilon));
        assert_eq!(entry.delta, table_delta(200));
    }
    assert_eq!(out.epsilon, out.logs.last().unwrap().epsilon);
    for log in &out.logs {
        assert!((0.0..=1.0).contains(&log.frac_clipped));
        assert!(log.update_norm <= 0.3 * log.sampled_users as f64 / (0.05 * data.total_weight()) * (1.0 + 1e-12));
    }
}

#[test]
fn scaling_clip_and_sigma_together_keeps_epsilon() {
    let data = dataset(100, 80, 8, 4);
    let model = BigramSoftmax::new(8).unwrap();
    let eval = data.all_sequences();
    let base = TrainingConfig {
        q: 0.1,
        z: 1.3,
        rounds: 30,
        eval_every: 10,
        ..TrainingConfig::default()
    };
    let a = run_training(TrainingConfig { clip: ClipConfig::flat(0.5), ..base.clone() }, &model, &data, &eval, &Sequential).unwrap();
    let b = run_training(TrainingConfig { clip: ClipConfig::flat(5.0), ..base }, &model, &data, &eval, &Sequential).unwrap();
    assert!((b.logs[0].sigma / a.logs[0].sigma - 10.0).abs() < 1e-12);
    let ea: Vec<u64> = a.logs.iter().map(|l| l.epsilon.unwrap().to_bits()).collect();
    let eb: Vec<u64> = b.logs.iter().map(|l| l.epsilon.unwrap().to_bits()).collect();
    assert_eq!(ea, eb);

    let mut acc = MomentsAccountant::new(0.1).unwrap();
    acc.accum_priv_spending(1.3, 30).unwrap();
    assert_eq!(acc.get_privacy_spent(table_delta(100)).unwrap().to_bits(), *ea.last().unwrap());
}

#[test]
fn clipped_estimator_smoke_run() {
    let cfg = SynthesisConfig {
        users: 1000,
        tokens_per_user: 100,
        vocab: 20,
        heterogeneity: 0.3,
        seed: 0,
    };
    let data = synthesize_dataset(&cfg, 10, 100.0).unwrap();
    let model = BigramSoftmax::new(20).unwrap();
    let eval = data.all_sequences();
    let q = 50.0 / 1000.0;
    let s = 2.0;
    let run = TrainingConfig {
        q,
        z: 1.0,
        estimator: EstimatorKind::ClippedDenominator,
        clip: ClipConfig::flat(s),
        rounds: 10,
        eval_every: 5,
        ..TrainingConfig::default()
    };
    let out = run_training(run, &model, &data, &eval, &Sequential).unwrap();
    let w_min = 0.9 * data.total_weight();
    for log in &out.logs {
        assert!((log.sigma - 2.0 * s / (q * w_min)).abs() < 1e-15);
        assert!(log.sampled_users > 0);
        assert!(log.norm_min.unwrap() <= log.norm_median.unwrap());
        assert!(log.norm_median.unwrap() <= log.norm_max.unwrap());
    }
    assert_eq!(out.logs.iter().filter(|l| l.eval.is_some()).count(), 2);
}
