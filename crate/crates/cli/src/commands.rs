use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use iin::analysis::{
    attribute_vector, interpolate, response_analysis, sample, swap_factor, OUConfig, SyntheticHead,
};
use iin::concepts::{
    allocate_dims, make_world, read_pairs, ConceptScores, CorrelationAccumulator, SyntheticWorld,
};
use iin::flow::{FactorLayout, FlowConfig, Init, InterpretationNetwork};
use iin::io::{atomic_write, read_latents_csv, write_latents_csv};
use iin::numerics::Tensor;
use iin::objective::{
    nll_bits, nll_bits_per_sample, parameter_gradient_errors, record_pair_loss, CorrelationConfig,
    PairMode,
};
use iin::trainer::{
    write_metrics_csv, Checkpoint, DataSource, LatentTableSource, LinearGaussianSource, LossMode,
    PairFileSource, StepMetrics, Trainer, WorldSource,
};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::runconfig::{LayoutSpec, RunConfig, SourceSpec};

/// Pairs per concept drawn from a synthetic world for automatic allocation.
const AUTO_LAYOUT_PAIRS: usize = 4000;

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn read_csv(path: &Path) -> CliResult<Tensor> {
    read_latents_csv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_network(path: &Path) -> CliResult<InterpretationNetwork> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if !ck.network.is_initialized() {
        return Err(CliError::Data(format!("{}: the network has not been trained", path.display())));
    }
    Ok(ck.network)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, d).expect("shape matches data")
}

fn csv_row(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn world_of(spec: &SourceSpec) -> CliResult<Option<SyntheticWorld>> {
    match spec {
        SourceSpec::World { dims, sigma, seed, mix_depth } => {
            Ok(Some(SyntheticWorld::new(*seed, dims.clone(), *sigma, *mix_depth)?))
        }
        _ => Ok(None),
    }
}

fn build_source(rc: &RunConfig) -> CliResult<Box<dyn DataSource>> {
    Ok(match &rc.source {
        SourceSpec::World { .. } => Box::new(WorldSource::new(world_of(&rc.source)?.expect("world source"))),
        SourceSpec::Files(files) => {
            for (c, p) in files {
                if !p.is_file() {
                    return Err(CliError::Data(format!(
                        "missing pair file for concept {c}: {} does not exist",
                        p.display()
                    )));
                }
            }
            let first = files.values().next().expect("at least one file");
            let dim = read_pairs(first)?.header().dim;
            let paths: Vec<&PathBuf> = files.values().collect();
            let src = PairFileSource::open(&paths, dim)?;
            for (c, p) in files {
                if !src.concepts().contains(c) {
                    return Err(CliError::Data(format!(
                        "{} is listed as concept {c} but its header names another concept",
                        p.display()
                    )));
                }
            }
            Box::new(src)
        }
        SourceSpec::Linear { dim, seed } => Box::new(LinearGaussianSource::random(*dim, *seed)?),
        SourceSpec::Latents(p) => Box::new(LatentTableSource::new(read_csv(p)?)?),
    })
}

/// Scores concepts from the configured pair data and allocates `total` dims.
fn auto_layout(rc: &RunConfig, total: usize) -> CliResult<(FactorLayout, ConceptScores)> {
    let mut scores = Vec::new();
    match &rc.source {
        SourceSpec::World { dims, .. } => {
            let world = world_of(&rc.source)?.expect("world source");
            for c in 1..=dims.num_concepts() {
                let mut rng = world.rng(1000 + c as u64);
                let b = world.sample_pairs(c, PairMode::Share, AUTO_LAYOUT_PAIRS, &mut rng)?;
                let mut acc = CorrelationAccumulator::new(b.dim());
                acc.push(&b.za, &b.zb)?;
                scores.push(acc.score()?);
            }
        }
        SourceSpec::Files(files) => {
            for (expected, (c, p)) in files.iter().enumerate() {
                if *c != expected + 1 {
                    return Err(CliError::Data(format!("missing pair file for concept {}", expected + 1)));
                }
                scores.push(score_file(p, 1024)?.1);
            }
        }
        _ => return Err(usage("layout = auto needs pair data (source = world or files)")),
    }
    let scores = ConceptScores::new(total, scores)?;
    Ok((allocate_dims(&scores, total)?, scores))
}

fn score_file(path: &Path, batch: usize) -> CliResult<(usize, f64)> {
    if !path.is_file() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    let reader = read_pairs(path)?;
    let concept = reader.header().concept as usize;
    let mut acc = CorrelationAccumulator::new(reader.header().dim);
    for b in reader.batches(batch) {
        let b = b?;
        acc.push(&b.za, &b.zb)?;
    }
    Ok((concept, acc.score()?))
}

fn scores_csv(scores: &ConceptScores, layout: &FactorLayout) -> String {
    let mut s = String::from("factor,score,dims\n");
    for (k, (sc, d)) in scores.all().iter().zip(layout.dims()).enumerate() {
        writeln!(s, "{k},{sc},{d}").unwrap();
    }
    s
}

/// Keeps rows of an earlier metrics file up to and including `step`.
fn earlier_metrics(path: &Path, step: u64) -> String {
    let Ok(text) = std::fs::read_to_string(path) else { return String::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn train(args: &TrainArgs, unsupervised: bool) -> CliResult<()> {
    let mut rc = RunConfig::load(&args.config)?;
    if let Some(s) = args.steps {
        rc.train.steps = s;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(o) = &args.out {
        rc.out = Some(o.clone());
    }
    let out = rc.out.clone().ok_or_else(|| usage("an output directory is required (--out or out = …)"))?;
    rc.train.loss_mode = if unsupervised { LossMode::Unsupervised } else { LossMode::Supervised };
    rc.train.validate()?;

    let mut source = build_source(&rc)?;
    let dim = source.dim();
    let mut scores = None;
    let layout = match (&rc.layout, &rc.source) {
        (Some(LayoutSpec::Fixed(l)), _) => l.clone(),
        (Some(LayoutSpec::Auto { total }), _) => {
            let (l, s) = auto_layout(&rc, total.unwrap_or(dim))?;
            scores = Some(s);
            l
        }
        (None, SourceSpec::World { dims, .. }) if !unsupervised => dims.clone(),
        (None, _) if unsupervised => FactorLayout::residual_only(dim)?,
        (None, _) => return Err(usage("layout is required unless source = world")),
    };
    if layout.total() != dim {
        return Err(CliError::Data(format!("layout {layout} has {} dims but the data has {dim}", layout.total())));
    }

    let ckpt_path = out.join("model.iin");
    let metrics_path = out.join("metrics.csv");
    if let Some(p) = &args.resume {
        let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if same(p, &ckpt_path) || same(&p.with_file_name("metrics.csv"), &metrics_path) {
            return Err(usage("--resume must point outside the output directory; inputs are never overwritten"));
        }
    }
    prepare_out(&out)?;
    write_text(&out.join("resolved.cfg"), &rc.resolved_text(&layout))?;
    if let Some(s) = &scores {
        write_text(&out.join("dims.csv"), &scores_csv(s, &layout))?;
        info!("allocated layout {layout}");
    }

    let (mut trainer, mut prior) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load_expecting(p, &rc.train, &layout)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let prior = earlier_metrics(&p.with_file_name("metrics.csv"), ck.step);
            info!("resuming from step {}", ck.step);
            (Trainer::resume(ck, rc.train.clone(), source.as_mut())?, prior)
        }
        None => (Trainer::from_scratch(layout, rc.train.clone())?, String::new()),
    };

    let mut metrics: Vec<StepMetrics> = Vec::new();
    let result = trainer.run(source.as_mut(), Some(&ckpt_path), |m| {
        if m.step % 100 == 0 {
            info!("step {} loss {:.5} nll {:.4} bits/dim", m.step, m.loss, m.nll_bits);
        }
        metrics.push(*m);
        Ok(())
    });
    let mut body = Vec::new();
    write_metrics_csv(&mut body, &metrics)?;
    let body = String::from_utf8(body).expect("utf-8 csv");
    let (header, rows) = body.split_once('\n').expect("header line");
    prior.push_str(rows);
    write_text(&metrics_path, &format!("{header}\n{prior}"))?;
    result?;
    if let Some(m) = metrics.last() {
        println!("step {} loss {} nll_bits {}", m.step, m.loss, m.nll_bits);
    }

    if unsupervised && trainer.network().is_initialized() {
        let held_out = match &rc.source {
            SourceSpec::Latents(p) => read_csv(p)?,
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
                rng.set_stream(7);
                source.latents(5000, &mut rng)?
            }
        };
        let net = trainer.network();
        let (codes, _) = net.forward(&held_out)?;
        let mut s = String::from("dim,mean,variance\n");
        let rows = codes.rows() as f64;
        for j in 0..codes.cols() {
            let col: Vec<f64> = (0..codes.rows()).map(|r| codes.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / rows;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
            writeln!(s, "{j},{mean},{var}").unwrap();
        }
        write_text(&out.join("gaussianity.csv"), &s)?;
        println!("held-out nll_bits {}", nll_bits(net, &held_out)?);
    }
    Ok(())
}

pub fn estimate_dims(args: &EstimateArgs) -> CliResult<()> {
    let mut found = Vec::new();
    let mut dim = None;
    for p in &args.pairs {
        let (c, s) = score_file(p, args.batch)?;
        let d = read_pairs(p)?.header().dim;
        if *dim.get_or_insert(d) != d {
            return Err(CliError::Data(format!("{} has dimension {d}, expected {}", p.display(), dim.unwrap())));
        }
        found.push((c, s));
    }
    found.sort_by_key(|&(c, _)| c);
    for (i, &(c, _)) in found.iter().enumerate() {
        if c != i + 1 {
            return Err(CliError::Data(format!(
                "pair files must cover concepts 1..=K exactly once; found concept {c} at position {}",
                i + 1
            )));
        }
    }
    let total = args.total.or(dim).expect("at least one pair file");
    let scores = ConceptScores::new(total, found.iter().map(|&(_, s)| s).collect())?;
    let layout = allocate_dims(&scores, total)?;
    for (c, s) in &found {
        println!("concept {c}: s_F = {s}");
    }
    println!("layout: {layout}");
    if let Some(out) = &args.out {
        prepare_out(out)?;
        write_text(&out.join("dims.csv"), &scores_csv(&scores, &layout))?;
    }
    Ok(())
}

pub fn swap(args: &SwapArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let src = read_csv(&args.src)?;
    let donor = read_csv(&args.donor)?;
    let out = swap_factor(&net, &src, &donor, args.factor)?;
    prepare_out(&args.out)?;
    write_latents_csv(&args.out.join("swapped.csv"), &out)?;
    println!("swapped factor {} for {} latents", args.factor, out.rows());
    Ok(())
}

pub fn interp(args: &InterpArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let z1 = read_csv(&args.from)?;
    let z2 = read_csv(&args.to)?;
    let path = interpolate(&net, &z1, &z2, args.steps)?;
    let n = net.dim();
    let mut s = String::from("path,step,t,nll_bits");
    (0..n).for_each(|j| write!(s, ",z{j}").unwrap());
    s.push('\n');
    let bits: Vec<Vec<f64>> = path.iter().map(|z| nll_bits_per_sample(&net, z)).collect::<Result<_, _>>()?;
    let mut worst = 0.0f64;
    for p in 0..z1.rows() {
        let ends = 0.5 * (bits[0][p] + bits[args.steps - 1][p]);
        for (i, z) in path.iter().enumerate() {
            let t = i as f64 / (args.steps - 1) as f64;
            writeln!(s, "{p},{i},{t},{},{}", bits[i][p], csv_row(z.row(p))).unwrap();
            worst = worst.max((bits[i][p] - ends).abs());
        }
    }
    prepare_out(&args.out)?;
    write_text(&args.out.join("interp.csv"), &s)?;
    println!("max |nll_bits - endpoint mean| = {worst}");
    Ok(())
}

pub fn attr_vec(args: &AttrVecArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let with = net.forward(&read_csv(&args.with)?)?.0;
    let without = net.forward(&read_csv(&args.without)?)?.0;
    let mut v = attribute_vector(&with, &without)?;
    if let Some(k) = args.factor {
        v = v.restrict(net.layout(), k)?;
    }
    prepare_out(&args.out)?;
    write_text(&args.out.join("attr_vec.csv"), &format!("{}\n", csv_row(v.direction().data())))?;
    if let Some(p) = &args.apply {
        let codes = net.forward(&read_csv(p)?)?.0;
        let edited = net.inverse(&v.apply(net.layout(), &codes, args.alpha)?)?;
        write_latents_csv(&args.out.join("edited.csv"), &edited)?;
    }
    let norm = v.direction().norm_sq().sqrt();
    println!("attribute vector norm {norm}");
    Ok(())
}

pub fn sample_cmd(args: &SampleArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let z = sample(&net, args.n, args.seed)?;
    if !z.is_finite() {
        return Err(CliError::Numerical("samples contain non-finite values".into()));
    }
    prepare_out(&args.out)?;
    write_latents_csv(&args.out.join("samples.csv"), &z)?;
    println!("wrote {} samples", args.n);
    Ok(())
}

pub fn respond(args: &RespondArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let rc = RunConfig::load(&args.config)?;
    let world = world_of(&rc.source)?.ok_or_else(|| usage("respond needs a config with source = world"))?;
    if world.dim() != net.dim() {
        return Err(CliError::Data(format!("world has dimension {}, network {}", world.dim(), net.dim())));
    }
    let head = SyntheticHead::new(world.clone(), args.head_factor, args.classes, args.head_seed)?;
    let cfg = if args.literal {
        let sigma = args.sigma.ok_or_else(|| usage("--literal needs --sigma"))?;
        OUConfig::literal(args.gamma, sigma, args.steps)?
    } else {
        if args.sigma.is_some() {
            return Err(usage("--sigma only applies with --literal"));
        }
        OUConfig::mean_reverting(args.gamma, args.steps)?
    };
    let (starts, _) = world.sample(args.starts, &mut world.rng(3 + args.seed))?;
    prepare_out(&args.out)?;
    let mut summary = String::from("start,base_prediction,change_rate\n");
    let mut total = 0.0;
    for i in 0..args.starts {
        let z = Tensor::matrix(1, net.dim(), starts.row(i).to_vec())?;
        let rep = response_analysis(&net, &head, &z, args.factor, &cfg, args.seed.wrapping_add(i as u64))?;
        rep.save_csv(&args.out.join(format!("response_{i}.csv")))?;
        writeln!(summary, "{i},{},{}", rep.base_prediction, rep.change_rate).unwrap();
        total += rep.change_rate;
    }
    write_text(&args.out.join("summary.csv"), &summary)?;
    println!("mean change rate {}", total / args.starts as f64);
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.n < 2 || args.n % 2 != 0 {
        return Err(usage("--n must be even and at least 2"));
    }
    let half = args.n / 2;
    let layout = FactorLayout::new(vec![args.n - half, half])?;
    let world = make_world(args.seed, layout.clone(), 0.9)?;
    let batch = world.sample_pairs(1, PairMode::Share, 8, &mut world.rng(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cfg = FlowConfig::new(args.n).with_blocks(2, 16, 2);
    let mut net = InterpretationNetwork::with_init(cfg, layout, Init::Random { output_std: 0.1 }, &mut rng)?;
    net.initialize(&batch.stacked()?)?;
    let corr = CorrelationConfig::default();
    let errs = parameter_gradient_errors(&net, args.h, |tape, params| {
        Ok(record_pair_loss(tape, &net, params, &batch, &corr)?.total)
    })?;
    let mut s = String::from("tensor,shape,relative_error\n");
    for (i, (e, p)) in errs.iter().zip(net.parameters()).enumerate() {
        let shape = p.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        writeln!(s, "{i},{shape},{e}").unwrap();
    }
    if let Some(out) = &args.out {
        prepare_out(out)?;
        write_text(&out.join("gradcheck.csv"), &s)?;
    }
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    println!("{} parameter tensors, max relative error {worst:e}", errs.len());
    if !(worst < args.tol) {
        return Err(CliError::Numerical(format!("gradient error {worst:e} exceeds {:e}", args.tol)));
    }
    Ok(())
}

pub fn roundtrip(args: &RoundtripArgs) -> CliResult<()> {
    let net = load_network(&args.ckpt)?;
    let z = gaussian(args.n, net.dim(), args.seed);
    let (codes, _) = net.forward(&z)?;
    let back = net.inverse(&codes)?;
    let err = back.max_abs_diff(&z)?;
    println!("max |T^-1(T(z)) - z| = {err:e} over {} latents", args.n);
    if !(err < args.tol) {
        return Err(CliError::Numerical(format!("round-trip error {err:e} exceeds {:e}", args.tol)));
    }
    Ok(())
}
