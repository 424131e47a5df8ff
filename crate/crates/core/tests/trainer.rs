use iin::concepts::make_world;
use iin::flow::FactorLayout;
use iin::objective::{marginal_nll, pair_loss, CorrelationConfig, PairMode};
use iin::trainer::{Checkpoint, LinearGaussianSource, LossMode, TrainConfig, Trainer, WorldSource};
use iin::trainer::DataSource;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world_source(dims: Vec<usize>, seed: u64) -> WorldSource {
    WorldSource::new(make_world(seed, FactorLayout::new(dims).unwrap(), 0.9).unwrap())
}

#[test]
fn resume_after_fifty_steps_is_bitwise_identical() {
    let cfg = |steps| TrainConfig { steps, n_flow: 3, hidden: 32, depth: 2, lr: 1e-3, batch: 25, ..TrainConfig::default() };
    let layout = FactorLayout::new(vec![4, 2, 2]).unwrap();
    let mut full = Trainer::from_scratch(layout.clone(), cfg(100)).unwrap();
    let mut curve = Vec::new();
    full.run(&mut world_source(vec![4, 2, 2], 5), None, |m| {
        curve.push(m.loss.to_bits());
        Ok(())
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.iin");
    let mut resumed_curve = Vec::new();
    let mut first = Trainer::from_scratch(layout, cfg(50)).unwrap();
    first
        .run(&mut world_source(vec![4, 2, 2], 5), Some(&path), |m| {
            resumed_curve.push(m.loss.to_bits());
            Ok(())
        })
        .unwrap();
    let mut src = world_source(vec![4, 2, 2], 5);
    let mut second = Trainer::resume(Checkpoint::load(&path).unwrap(), cfg(100), &mut src).unwrap();
    second
        .run(&mut src, None, |m| {
            resumed_curve.push(m.loss.to_bits());
            Ok(())
        })
        .unwrap();

    assert_eq!(curve, resumed_curve);
    assert_eq!(full.network(), second.network());
    assert_eq!(full.adam_state(), second.adam_state());
}

#[test]
fn linear_gaussian_toy_reaches_analytic_optimum() {
    let mut src = LinearGaussianSource::random(4, 17).unwrap();
    let optimum = 2.0 + src.log_abs_det();
    let cfg = TrainConfig {
        steps: 1500,
        n_flow: 4,
        hidden: 32,
        depth: 1,
        lr: 3e-3,
        batch: 64,
        loss_mode: LossMode::Unsupervised,
        ..TrainConfig::default()
    };
    let mut t = Trainer::from_scratch(FactorLayout::residual_only(4).unwrap(), cfg).unwrap();
    t.run(&mut src, None, |_| Ok(())).unwrap();
    let held_out = src.latents(20_000, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let loss = marginal_nll(t.network(), &held_out).unwrap();
    println!("held-out nll {loss:.4}, optimum {optimum:.4}");
    assert!((loss - optimum).abs() <= 0.05 * optimum.abs(), "{loss} vs {optimum}");
}

#[test]
fn synthetic_world_pair_loss_drops_by_thirty_percent() {
    let cfg = TrainConfig { steps: 3000, n_flow: 4, hidden: 64, depth: 2, ..TrainConfig::default() };
    let mut src = world_source(vec![8, 4, 4], 2);
    let eval: Vec<_> = (1..=2)
        .map(|c| src.world.sample_pairs(c, PairMode::Share, 2000, &mut src.world.rng(1000 + c as u64)).unwrap())
        .collect();
    let mut t = Trainer::from_scratch(FactorLayout::new(vec![8, 4, 4]).unwrap(), cfg).unwrap();
    let corr = CorrelationConfig::default();
    let mut init_net = t.network().clone();
    init_net.initialize(&eval[0].stacked().unwrap()).unwrap();
    let before: f64 = eval.iter().map(|b| pair_loss(&init_net, b, &corr).unwrap().total).sum();
    t.run(&mut src, None, |_| Ok(())).unwrap();
    let after: f64 = eval.iter().map(|b| pair_loss(t.network(), b, &corr).unwrap().total).sum();
    println!("pair loss {before:.4} -> {after:.4}");
    assert!(after <= 0.7 * before, "{before} -> {after}");
}
