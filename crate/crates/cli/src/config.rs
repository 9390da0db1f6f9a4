//! `key = value` run configuration with dotted sections.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sadm_core::network::{ModelConfig, Optimizer};
use sadm_core::sampling::SampleConfig;
use sadm_core::schedule::NoiseSchedule;
use sadm_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub subjects: usize,
    pub length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { subjects: 5, length: 6 }
    }
}

/// Every setting of a run. `seed` drives data generation, initialization,
/// training and sampling (each on its own random stream).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Conditioner-only steps run before end-to-end training.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
            sample: SampleConfig {
                steps: 50,
                ..SampleConfig::default()
            },
        };
        c.sync_seeds();
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("{key}: expected three comma-separated integers, got {value:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(key, p)?;
    }
    Ok(out)
}

fn adam_params(opt: &Optimizer) -> (f64, f64, f64) {
    match *opt {
        Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        Optimizer::Sgd => match Optimizer::default() {
            Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
            Optimizer::Sgd => unreachable!(),
        },
    }
}

impl RunConfig {
    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.sample.seed = self.seed;
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.model.schedule
    }

    /// Parse config text; keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut optimizer = "adam".to_string();
        let (mut beta1, mut beta2, mut eps) = adam_params(&cfg.train.optimizer);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format!("line {}: expected `key = value`, got {raw:?}", n + 1))?;
            if !seen.insert(key.to_string()) {
                return Err(format!("line {}: duplicate key {key}", n + 1));
            }
            let m = &mut cfg.model;
            match key {
                "seed" => cfg.seed = parse(key, value)?,
                "data.subjects" => cfg.data.subjects = parse(key, value)?,
                "data.length" => cfg.data.length = parse(key, value)?,
                "data.extents" => m.extents = parse_triple(key, value)?,
                "schedule.lambda_min" => m.schedule.lambda_min = parse(key, value)?,
                "schedule.lambda_max" => m.schedule.lambda_max = parse(key, value)?,
                "attention.blocks" => m.attention.blocks = parse(key, value)?,
                "attention.dim" => m.attention.dim = parse(key, value)?,
                "attention.heads" => m.attention.heads = parse(key, value)?,
                "attention.window" => m.attention.window = parse_triple(key, value)?,
                "attention.max_len" => m.attention.max_len = parse(key, value)?,
                "attention.mlp_ratio" => m.attention.mlp_ratio = parse(key, value)?,
                "denoiser.base" => m.denoiser.base = parse(key, value)?,
                "denoiser.depth" => m.denoiser.depth = parse(key, value)?,
                "denoiser.emb_width" => m.denoiser.emb_width = parse(key, value)?,
                "train.steps" => cfg.train.steps = parse(key, value)?,
                "train.lr" => cfg.train.lr = parse(key, value)?,
                "train.batch" => cfg.train.batch = parse(key, value)?,
                "train.p_uncond" => cfg.train.p_uncond = parse(key, value)?,
                "train.optimizer" => optimizer = value.to_string(),
                "train.beta1" => beta1 = parse(key, value)?,
                "train.beta2" => beta2 = parse(key, value)?,
                "train.eps" => eps = parse(key, value)?,
                "train.ckpt_every" => cfg.train.ckpt_every = parse(key, value)?,
                "train.pretrain_steps" => cfg.pretrain_steps = parse(key, value)?,
                "train.pretrain_lr" => cfg.pretrain_lr = parse(key, value)?,
                "sample.T" => cfg.sample.steps = parse(key, value)?,
                "sample.w" => cfg.sample.guidance = parse(key, value)?,
                "sample.v" => cfg.sample.v = parse(key, value)?,
                "sample.clamp" => cfg.sample.clamp = parse_bool(key, value)?,
                "sample.final_noise" => cfg.sample.final_noise = parse_bool(key, value)?,
                _ => return Err(format!("line {}: unknown key {key}", n + 1)),
            }
        }
        cfg.train.optimizer = match optimizer.as_str() {
            "adam" => Optimizer::Adam { beta1, beta2, eps },
            "sgd" => Optimizer::Sgd,
            other => return Err(format!("train.optimizer: expected adam or sgd, got {other:?}")),
        };
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        let err = |e: sadm_core::Error| e.to_string();
        NoiseSchedule::new(self.model.schedule.lambda_min, self.model.schedule.lambda_max).map_err(err)?;
        self.train.validate().map_err(err)?;
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(format!("train.pretrain_lr must be positive and finite, got {}", self.pretrain_lr));
        }
        self.sample.validate().map_err(err)?;
        self.model.attention.token_grid(self.model.extents).map_err(err)?;
        self.model.denoiser.validate(self.model.extents).map_err(err)?;
        if self.data.length < 2 {
            return Err("data.length must be at least 2".into());
        }
        if self.data.length - 1 > self.model.attention.max_len {
            return Err(format!(
                "attention.max_len = {} cannot hold the {}-frame prefixes of data.length = {}",
                self.model.attention.max_len,
                self.data.length - 1,
                self.data.length
            ));
        }
        if self.data.subjects < 2 {
            return Err("data.subjects must be at least 2".into());
        }
        Ok(())
    }

    /// The fully resolved configuration; [`RunConfig::parse`] reads it back
    /// to an identical value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        let (beta1, beta2, eps) = adam_params(&self.train.optimizer);
        let optimizer = match self.train.optimizer {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd => "sgd",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("data.subjects", self.data.subjects.to_string());
        kv("data.length", self.data.length.to_string());
        kv("data.extents", triple(m.extents));
        kv("schedule.lambda_min", m.schedule.lambda_min.to_string());
        kv("schedule.lambda_max", m.schedule.lambda_max.to_string());
        kv("attention.blocks", m.attention.blocks.to_string());
        kv("attention.dim", m.attention.dim.to_string());
        kv("attention.heads", m.attention.heads.to_string());
        kv("attention.window", triple(m.attention.window));
        kv("attention.max_len", m.attention.max_len.to_string());
        kv("attention.mlp_ratio", m.attention.mlp_ratio.to_string());
        kv("denoiser.base", m.denoiser.base.to_string());
        kv("denoiser.depth", m.denoiser.depth.to_string());
        kv("denoiser.emb_width", m.denoiser.emb_width.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.p_uncond", self.train.p_uncond.to_string());
        kv("train.optimizer", optimizer.to_string());
        kv("train.beta1", beta1.to_string());
        kv("train.beta2", beta2.to_string());
        kv("train.eps", eps.to_string());
        kv("train.ckpt_every", self.train.ckpt_every.to_string());
        kv("train.pretrain_steps", self.pretrain_steps.to_string());
        kv("train.pretrain_lr", self.pretrain_lr.to_string());
        kv("sample.T", self.sample.steps.to_string());
        kv("sample.w", self.sample.guidance.to_string());
        kv("sample.v", self.sample.v.to_string());
        kv("sample.clamp", self.sample.clamp.to_string());
        kv("sample.final_noise", self.sample.final_noise.to_string());
        s
    }
}
