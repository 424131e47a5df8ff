//! `key = value` run configuration files.
//!
//! Blank lines and text after `#` are ignored. Keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `lr`, `batch`, `steps`, `sigma_ab` | optimization | 1e-4, 25, 1000, 0.9 |
//! | `n_flow`, `hidden`, `depth` | architecture | 6, 512, 2 |
//! | `seed` | run seed | 0 |
//! | `checkpoint_every` | steps between checkpoints, or `none` | none |
//! | `clip_norm` | gradient norm limit, or `none` | none |
//! | `marginal_loss` | `gaussian` or `literal` (unsupervised mode) | gaussian |
//! | `layout` | comma-separated factor dims `N_0,N_1,…` or `auto` | world dims |
//! | `total` | `N` when `layout = auto` | data dimension |
//! | `source` | `world`, `files`, `linear` or `latents` | required |
//! | `world_dims`, `world_sigma`, `world_seed`, `world_mix_depth` | synthetic world | –, 0.9, 0, 1 |
//! | `concept.<k>` | pair file for concept `k` | – |
//! | `latents` | headerless latent CSV | – |
//! | `linear_dim`, `linear_seed` | linear Gaussian source | –, 0 |
//! | `out` | output directory | – |
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iin::flow::FactorLayout;
use iin::objective::MarginalLoss;
use iin::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

const SCALAR_KEYS: &[&str] = &[
    "lr",
    "batch",
    "steps",
    "sigma_ab",
    "n_flow",
    "hidden",
    "depth",
    "seed",
    "checkpoint_every",
    "clip_norm",
    "marginal_loss",
    "layout",
    "total",
    "source",
    "world_dims",
    "world_sigma",
    "world_seed",
    "world_mix_depth",
    "latents",
    "linear_dim",
    "linear_seed",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub enum LayoutSpec {
    Fixed(FactorLayout),
    Auto { total: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    World { dims: FactorLayout, sigma: f64, seed: u64, mix_depth: usize },
    Files(BTreeMap<usize, PathBuf>),
    Linear { dim: usize, seed: u64 },
    Latents(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `None` means the world's dims for a world source and a single
    /// residual factor for unsupervised training.
    pub layout: Option<LayoutSpec>,
    pub source: SourceSpec,
    pub out: Option<PathBuf>,
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_layout(key: &str, v: &str) -> CliResult<FactorLayout> {
    FactorLayout::parse(v).map_err(|e| usage(format!("{key}: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let known = SCALAR_KEYS.contains(&k)
                || k.strip_prefix("concept.").is_some_and(|c| c.parse::<usize>().is_ok_and(|c| c >= 1));
            if !known {
                return Err(usage(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(usage(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };

        let mut t = TrainConfig::default();
        for (k, v) in &kv {
            match k.as_str() {
                "lr" => t.lr = parse_num(k, v)?,
                "batch" => t.batch = parse_num(k, v)?,
                "steps" => t.steps = parse_num(k, v)?,
                "sigma_ab" => t.sigma_ab = parse_num(k, v)?,
                "n_flow" => t.n_flow = parse_num(k, v)?,
                "hidden" => t.hidden = parse_num(k, v)?,
                "depth" => t.depth = parse_num(k, v)?,
                "seed" => t.seed = parse_num(k, v)?,
                "checkpoint_every" => t.checkpoint_every = parse_opt(k, v)?,
                "clip_norm" => t.clip_norm = parse_opt(k, v)?,
                "marginal_loss" => {
                    t.marginal_loss = match v.as_str() {
                        "gaussian" => MarginalLoss::GaussianNll,
                        "literal" => MarginalLoss::Literal,
                        _ => return Err(usage(format!("marginal_loss must be gaussian or literal, got {v:?}"))),
                    }
                }
                _ => {}
            }
        }

        let total = kv.get("total").map(|v| parse_num("total", v)).transpose()?;
        let layout = match kv.get("layout").map(String::as_str) {
            None => {
                if total.is_some() {
                    return Err(usage("total is only meaningful with layout = auto"));
                }
                None
            }
            Some("auto") => Some(LayoutSpec::Auto { total }),
            Some(v) => {
                if total.is_some() {
                    return Err(usage("total is only meaningful with layout = auto"));
                }
                Some(LayoutSpec::Fixed(parse_layout("layout", v)?))
            }
        };

        let get = |k: &str| kv.get(k).map(String::as_str);
        let source = match get("source") {
            Some("world") => SourceSpec::World {
                dims: parse_layout("world_dims", get("world_dims").ok_or_else(|| usage("source = world needs world_dims"))?)?,
                sigma: get("world_sigma").map_or(Ok(0.9), |v| parse_num("world_sigma", v))?,
                seed: get("world_seed").map_or(Ok(0), |v| parse_num("world_seed", v))?,
                mix_depth: get("world_mix_depth").map_or(Ok(1), |v| parse_num("world_mix_depth", v))?,
            },
            Some("files") => {
                let files: BTreeMap<usize, PathBuf> = kv
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix("concept.").map(|c| (c.parse().unwrap(), path(v))))
                    .collect();
                if files.is_empty() {
                    return Err(usage("source = files needs at least one concept.<k> entry"));
                }
                SourceSpec::Files(files)
            }
            Some("linear") => SourceSpec::Linear {
                dim: parse_num("linear_dim", get("linear_dim").ok_or_else(|| usage("source = linear needs linear_dim"))?)?,
                seed: get("linear_seed").map_or(Ok(0), |v| parse_num("linear_seed", v))?,
            },
            Some("latents") => SourceSpec::Latents(path(get("latents").ok_or_else(|| usage("source = latents needs latents"))?)),
            Some(other) => return Err(usage(format!("unknown source {other:?}"))),
            None => return Err(usage("source is required")),
        };
        let used_keys: &[&str] = match source {
            SourceSpec::World { .. } => &["world_dims", "world_sigma", "world_seed", "world_mix_depth"],
            SourceSpec::Linear { .. } => &["linear_dim", "linear_seed"],
            SourceSpec::Latents(_) => &["latents"],
            SourceSpec::Files(_) => &[],
        };
        for k in kv.keys() {
            let source_key = k.starts_with("world_") || k.starts_with("linear_") || k == "latents" || k.starts_with("concept.");
            let applies = used_keys.contains(&k.as_str()) || (k.starts_with("concept.") && matches!(source, SourceSpec::Files(_)));
            if source_key && !applies {
                return Err(usage(format!("key {k:?} does not apply to this source")));
            }
        }
        let rc = RunConfig { train: t, layout, source, out: kv.get("out").map(|v| path(v)) };
        rc.train.validate()?;
        Ok(rc)
    }

    /// Serializes with every key explicit; `layout` is the resolved one.
    pub fn resolved_text(&self, layout: &FactorLayout) -> String {
        let t = &self.train;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("lr", t.lr.to_string());
        kv("batch", t.batch.to_string());
        kv("steps", t.steps.to_string());
        kv("sigma_ab", t.sigma_ab.to_string());
        kv("n_flow", t.n_flow.to_string());
        kv("hidden", t.hidden.to_string());
        kv("depth", t.depth.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", opt(t.checkpoint_every.map(|c| c.to_string())));
        kv("clip_norm", opt(t.clip_norm.map(|c| c.to_string())));
        kv(
            "marginal_loss",
            match t.marginal_loss {
                MarginalLoss::GaussianNll => "gaussian",
                MarginalLoss::Literal => "literal",
            }
            .into(),
        );
        kv("layout", layout.to_string());
        match &self.source {
            SourceSpec::World { dims, sigma, seed, mix_depth } => {
                kv("source", "world".into());
                kv("world_dims", dims.to_string());
                kv("world_sigma", sigma.to_string());
                kv("world_seed", seed.to_string());
                kv("world_mix_depth", mix_depth.to_string());
            }
            SourceSpec::Files(files) => {
                kv("source", "files".into());
                for (c, p) in files {
                    kv(&format!("concept.{c}"), p.display().to_string());
                }
            }
            SourceSpec::Linear { dim, seed } => {
                kv("source", "linear".into());
                kv("linear_dim", dim.to_string());
                kv("linear_seed", seed.to_string());
            }
            SourceSpec::Latents(p) => {
                kv("source", "latents".into());
                kv("latents", p.display().to_string());
            }
        }
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        s
    }
}
