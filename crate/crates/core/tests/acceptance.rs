//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any fails.

use std::time::{Duration, Instant};

use iin::analysis::{
    interpolate, max_canonical_correlation, ou_walk, response_analysis, swap_factor, OUConfig, SyntheticHead,
};
use iin::concepts::{make_world, read_pairs, write_pairs, ConceptScores, CorrelationAccumulator, SyntheticWorld};
use iin::flow::{FactorLayout, FlowConfig, Init, InterpretationNetwork};
use iin::numerics::{kernels, Tensor};
use iin::objective::{
    nll_bits_per_sample, pair_loss, parameter_gradient_errors, record_pair_loss, CorrelationConfig, PairBatch,
    PairMode,
};
use iin::trainer::{
    Checkpoint, DataSource, LinearGaussianSource, LossMode, TrainConfig, Trainer, WorldSource,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, d).unwrap()
}

fn cols(x: &Tensor, r: std::ops::Range<usize>) -> Tensor {
    kernels::slice_cols(x, r.start, r.len()).unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Mean over columns of the Pearson correlation between matching columns.
fn mean_column_correlation(x: &Tensor, y: &Tensor) -> f64 {
    let c = x.cols();
    (0..c)
        .map(|j| {
            let a: Vec<f64> = (0..x.rows()).map(|r| x.get(r, j)).collect();
            let b: Vec<f64> = (0..y.rows()).map(|r| y.get(r, j)).collect();
            pearson(&a, &b)
        })
        .sum::<f64>()
        / c as f64
}

fn random_network(n: usize, n_flow: usize, hidden: usize, output_std: f64, seed: u64) -> InterpretationNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig::new(n).with_blocks(n_flow, hidden, 2);
    let layout = FactorLayout::new(vec![n / 2, n / 2]).unwrap();
    let mut net = InterpretationNetwork::with_init(cfg, layout, Init::Random { output_std }, &mut rng).unwrap();
    net.initialize(&gaussian(256, n, &mut rng)).unwrap();
    net
}

fn invertibility() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, &n_flow) in [1usize, 6, 12].iter().enumerate() {
        for (j, &n) in [8usize, 16, 64].iter().enumerate() {
            let net = random_network(n, n_flow, 64, 0.01, (10 * i + j) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(99 + (10 * i + j) as u64);
            let mut z = gaussian(1000, n, &mut rng);
            z.data_mut().iter_mut().for_each(|v| *v = v.clamp(-10.0, 10.0));
            let back = net.inverse(&net.forward(&z).unwrap().0).unwrap();
            worst = worst.max(back.max_abs_diff(&z).unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 30.0, format!("max error {worst:.2e}, {secs:.1} s"))
}

fn logdet_exactness() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (s, &n) in [2usize, 4, 8].iter().enumerate() {
        let net = random_network(n, 3, 16, 0.3, 40 + s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(7 + s as u64);
        for _ in 0..20 {
            let z = gaussian(1, n, &mut rng);
            let analytic = net.forward(&z).unwrap().1.data()[0];
            let mut probes = Vec::with_capacity(2 * n * n);
            for j in 0..n {
                for sign in [1.0, -1.0] {
                    let mut p = z.data().to_vec();
                    p[j] += sign * h;
                    probes.extend(p);
                }
            }
            let y = net.forward(&Tensor::matrix(2 * n, n, probes).unwrap()).unwrap().0;
            let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| (y.get(2 * j, i) - y.get(2 * j + 1, i)) / (2.0 * h));
            let numeric = jac.determinant().abs().ln();
            worst = worst.max((numeric - analytic).abs());
        }
    }
    outcome(worst < 1e-3, format!("max |logdet - log|det J_fd|| = {worst:.2e}"))
}

fn gradient_oracle() -> Outcome {
    let layout = FactorLayout::new(vec![4, 4]).unwrap();
    let world = make_world(4, layout.clone(), 0.9).unwrap();
    let batch = world.sample_pairs(1, PairMode::Share, 8, &mut world.rng(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = FlowConfig::new(8).with_blocks(2, 16, 2);
    let mut net = InterpretationNetwork::with_init(cfg, layout, Init::Random { output_std: 0.1 }, &mut rng).unwrap();
    net.initialize(&batch.stacked().unwrap()).unwrap();
    let corr = CorrelationConfig::default();
    let errs = parameter_gradient_errors(&net, 1e-6, |tape, params| {
        Ok(record_pair_loss(tape, &net, params, &batch, &corr)?.total)
    })
    .unwrap();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("{} tensors, max relative error {worst:.2e}", errs.len()))
}

fn loss_anchors() -> Outcome {
    let layout = FactorLayout::new(vec![1, 1]).unwrap();
    let cfg = FlowConfig::new(2).with_blocks(2, 4, 1);
    let net = InterpretationNetwork::identity(cfg, layout, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let corr = CorrelationConfig::default();
    let batch = |v: f64| {
        let t = Tensor::matrix(1, 2, vec![v, v]).unwrap();
        PairBatch::new(t.clone(), t, 1, PairMode::Share).unwrap()
    };
    let zero = pair_loss(&net, &batch(0.0), &corr).unwrap().total;
    let ones = pair_loss(&net, &batch(1.0), &corr).unwrap().total;
    let anchor = 3.052631578947368;
    outcome(zero == 0.0 && (ones - anchor).abs() < 1e-9, format!("zero case {zero}, (1,1) case {ones:.12}"))
}

struct Trained {
    net: InterpretationNetwork,
    world: SyntheticWorld,
    elapsed: Duration,
}

fn train_disentangler() -> Trained {
    let dims = FactorLayout::new(vec![8, 4, 4]).unwrap();
    let world = make_world(0, dims.clone(), 0.9).unwrap();
    let cfg = TrainConfig { steps: 3000, batch: 25, lr: 1e-4, n_flow: 6, hidden: 128, depth: 2, seed: 1, ..TrainConfig::default() };
    let start = Instant::now();
    let mut t = Trainer::from_scratch(dims, cfg).unwrap();
    t.run(&mut WorldSource::new(world.clone()), None, |_| Ok(())).unwrap();
    Trained { net: t.into_network(), world, elapsed: start.elapsed() }
}

fn disentanglement(m: &Trained) -> Outcome {
    let (z, g) = m.world.sample(5000, &mut m.world.rng(500)).unwrap();
    let codes = m.net.forward(&z).unwrap().0;
    let layout = m.world.dims();
    let (mut on_min, mut off_max) = (f64::INFINITY, 0.0f64);
    for f in 1..=layout.num_concepts() {
        let zf = cols(&codes, layout.range(f).unwrap());
        for k in 0..layout.num_factors() {
            let c = max_canonical_correlation(&zf, &cols(&g, layout.range(k).unwrap())).unwrap();
            if k == f {
                on_min = on_min.min(c);
            } else {
                off_max = off_max.max(c);
            }
        }
    }
    let secs = m.elapsed.as_secs_f64();
    outcome(
        on_min >= 0.8 && off_max <= 0.3 && secs < 300.0,
        format!("min on-factor {on_min:.3}, max off-factor {off_max:.3}, training {secs:.0} s"),
    )
}

fn swap_fidelity(m: &Trained) -> Outcome {
    let layout = m.world.dims();
    let (zs, gs) = m.world.sample(3000, &mut m.world.rng(600)).unwrap();
    let (zd, gd) = m.world.sample(3000, &mut m.world.rng(601)).unwrap();
    let (mut to_donor, mut kept) = (f64::INFINITY, f64::INFINITY);
    for f in 1..=layout.num_concepts() {
        let swapped = swap_factor(&m.net, &zs, &zd, f).unwrap();
        let g = m.world.unmix(&swapped).unwrap();
        for k in 0..layout.num_factors() {
            let r = layout.range(k).unwrap();
            if k == f {
                to_donor = to_donor.min(mean_column_correlation(&cols(&g, r.clone()), &cols(&gd, r)));
            } else {
                kept = kept.min(mean_column_correlation(&cols(&g, r.clone()), &cols(&gs, r)));
            }
        }
    }
    outcome(to_donor >= 0.8 && kept >= 0.8, format!("swapped factor vs donor {to_donor:.3}, others vs source {kept:.3}"))
}

fn dimensionality_estimation() -> Outcome {
    let dims = FactorLayout::new(vec![4, 6, 4, 2]).unwrap();
    let mut ordered = 0;
    let mut last = Vec::new();
    for seed in 0..5 {
        let world = make_world(seed, dims.clone(), 0.9).unwrap();
        let mut scores = Vec::new();
        for c in 1..=3 {
            let b = world.sample_pairs(c, PairMode::Share, 4000, &mut world.rng(c as u64)).unwrap();
            let mut acc = CorrelationAccumulator::new(16);
            acc.push(&b.za, &b.zb).unwrap();
            scores.push(acc.score().unwrap());
        }
        if scores[0] > scores[1] && scores[1] > scores[2] {
            ordered += 1;
        }
        last = scores;
    }
    let world = make_world(9, dims, 0.9).unwrap();
    let (z, _) = world.sample(1000, &mut world.rng(0)).unwrap();
    let mut acc = CorrelationAccumulator::new(16);
    acc.push(&z, &z).unwrap();
    let identical = ConceptScores::new(16, vec![acc.score().unwrap()]).unwrap().concept(1);
    outcome(
        ordered == 5 && identical == 16.0,
        format!("ordering matched {ordered}/5 (last scores {:.2?}), identical pairs s_F = {identical}", last),
    )
}

fn gaussianization() -> Outcome {
    let mut src = LinearGaussianSource::random(4, 21).unwrap();
    let cfg = TrainConfig {
        steps: 3000,
        n_flow: 2,
        hidden: 32,
        depth: 1,
        lr: 1e-3,
        batch: 256,
        loss_mode: LossMode::Unsupervised,
        ..TrainConfig::default()
    };
    let mut t = Trainer::from_scratch(FactorLayout::residual_only(4).unwrap(), cfg).unwrap();
    t.run(&mut src, None, |_| Ok(())).unwrap();
    let net = t.network();
    let held = src.latents(10_000, &mut ChaCha8Rng::seed_from_u64(1234)).unwrap();
    let codes = net.forward(&held).unwrap().0;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for j in 0..4 {
        let col: Vec<f64> = (0..codes.rows()).map(|r| codes.get(r, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let ends = src.latents(20, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let a = Tensor::matrix(10, 4, ends.data()[..40].to_vec()).unwrap();
    let b = Tensor::matrix(10, 4, ends.data()[40..].to_vec()).unwrap();
    let path = interpolate(net, &a, &b, 10).unwrap();
    let bits: Vec<Vec<f64>> = path.iter().map(|z| nll_bits_per_sample(net, z).unwrap()).collect();
    let mut worst_path = 0.0f64;
    for p in 0..10 {
        let mid = 0.5 * (bits[0][p] + bits[9][p]);
        for step in &bits {
            worst_path = worst_path.max((step[p] - mid).abs());
        }
    }
    outcome(
        worst_mean < 0.1 && worst_var < 0.2 && worst_path <= 1.0,
        format!("max |mean| {worst_mean:.3}, max |var-1| {worst_var:.3}, max path deviation {worst_path:.3} bits/dim"),
    )
}

fn response(m: &Trained) -> Outcome {
    let head = SyntheticHead::new(m.world.clone(), 1, 4, 0).unwrap();
    let cfg = OUConfig::mean_reverting(0.05, 100).unwrap();
    let (starts, _) = m.world.sample(30, &mut m.world.rng(700)).unwrap();
    let mut rate = [0.0; 2];
    for i in 0..starts.rows() {
        let z = Tensor::matrix(1, 16, starts.row(i).to_vec()).unwrap();
        for (slot, k) in [(0, 1usize), (1, 0usize)] {
            rate[slot] += response_analysis(&m.net, &head, &z, k, &cfg, i as u64).unwrap().change_rate;
        }
    }
    let (aligned, residual) = (rate[0] / 30.0, rate[1] / 30.0);
    outcome(aligned > 5.0 * residual, format!("change rate aligned {aligned:.3}, residual {residual:.3}"))
}

fn lag1(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let cov = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (n - 1.0);
    (var, cov / var)
}

fn ou_statistics() -> Outcome {
    let (gamma, sigma) = (0.5, 1.0);
    let lit = OUConfig::literal(gamma, sigma, 100_000).unwrap();
    let w = ou_walk(&[0.0], &lit, 3).unwrap();
    let (var, r1) = lag1(w.data());
    let target = sigma * sigma / (1.0 - gamma * gamma);
    let mr = OUConfig::mean_reverting(0.05, 100_000).unwrap();
    let w2 = ou_walk(&[0.0], &mr, 4).unwrap();
    let (_, r2) = lag1(w2.data());
    let pass = (var - target).abs() <= 0.1 * target && (r1 + gamma).abs() <= 0.02 && (r2 - 0.95).abs() <= 0.02;
    outcome(pass, format!("literal variance {var:.4} vs {target:.4}, lag-1 {r1:.4}; mean-reverting lag-1 {r2:.4}"))
}

fn determinism() -> Outcome {
    let dims = FactorLayout::new(vec![4, 2, 2]).unwrap();
    let world = make_world(2, dims.clone(), 0.9).unwrap();
    let cfg = |steps| TrainConfig { steps, n_flow: 2, hidden: 16, depth: 1, lr: 1e-3, batch: 16, seed: 8, ..TrainConfig::default() };
    let curve = |steps| {
        let mut t = Trainer::from_scratch(dims.clone(), cfg(steps)).unwrap();
        let mut c = Vec::new();
        t.run(&mut WorldSource::new(world.clone()), None, |m| {
            c.push(m.loss.to_bits());
            Ok(())
        })
        .unwrap();
        (c, t)
    };
    let (c1, full) = curve(40);
    let (c2, _) = curve(40);
    let curves_equal = c1 == c2;

    let (_, half) = curve(20);
    let bytes = half.checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let ckpt_bitwise = ck.to_bytes() == bytes && ck == half.checkpoint();
    let mut src = WorldSource::new(world.clone());
    let mut resumed = Trainer::resume(ck, cfg(40), &mut src).unwrap();
    resumed.run(&mut src, None, |_| Ok(())).unwrap();
    let resume_equal = resumed.checkpoint() == full.checkpoint();
    let z = world.sample(50, &mut world.rng(5)).unwrap().0;
    let forward_equal = full.network().forward(&z).unwrap() == resumed.network().forward(&z).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ilp");
    let pairs = world.sample_pairs(2, PairMode::Differ, 33, &mut world.rng(6)).unwrap();
    write_pairs(&path, std::slice::from_ref(&pairs)).unwrap();
    let back = read_pairs(&path).unwrap().next_batch(100).unwrap().unwrap();
    let pairs_equal = back == pairs;

    outcome(
        curves_equal && ckpt_bitwise && resume_equal && forward_equal && pairs_equal,
        format!(
            "loss curves {curves_equal}, checkpoint bytes {ckpt_bitwise}, resume {resume_equal}, \
             forward {forward_equal}, pair file {pairs_equal}"
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status}  {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "invertibility", invertibility());
    report(2, "log-det exactness", logdet_exactness());
    report(3, "gradient oracle", gradient_oracle());
    report(4, "loss anchors", loss_anchors());
    let trained = train_disentangler();
    report(5, "disentanglement recovery", disentanglement(&trained));
    report(6, "swap fidelity", swap_fidelity(&trained));
    report(7, "dimensionality estimation", dimensionality_estimation());
    report(8, "unsupervised gaussianization", gaussianization());
    report(9, "response analysis", response(&trained));
    report(10, "OU statistics", ou_statistics());
    report(11, "determinism and persistence", determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
