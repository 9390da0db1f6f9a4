//! The `sadm` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sadm_core::datagen::{make_dataset, read_lvs, write_lvs};
use sadm_core::metrics::evaluate;
use sadm_core::ndcore::{Rng, Tensor};
use sadm_core::network::Sadm;
use sadm_core::sampling::autoregressive_sample;
use sadm_core::sequence::{IndexPartition, LongitudinalVolume};
use sadm_core::training::{loss_csv, pretrain_conditioner, train};

use crate::config::RunConfig;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent data (exit 2).
    Data(String),
    /// Non-finite values during training or sampling (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
        }
    }
}

impl From<sadm_core::Error> for CliError {
    fn from(e: sadm_core::Error) -> Self {
        use sadm_core::Error as E;
        match e {
            E::Config(_) | E::Partition(_) => CliError::Usage(e.to_string()),
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage),
        None => Ok(RunConfig::default()),
    }
}

/// Write `train/` and `test/` LVS files plus `manifest.csv` under `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let ds = make_dataset(cfg.data.subjects, cfg.data.length, cfg.model.extents, cfg.seed)?;
    let mut manifest = String::from("split,id,file,rho,center_x,center_y,center_z,radius_x,radius_y,radius_z\n");
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        create_dir(&out.join(split))?;
        for s in samples {
            let file = format!("{split}/subject-{:03}.lvs", s.id);
            write_lvs(&s.volume, out.join(&file))?;
            let (c, r) = (s.params.center, s.params.radii);
            writeln!(
                manifest,
                "{split},{},{file},{},{},{},{},{},{},{}",
                s.id, s.params.rho, c[0], c[1], c[2], r[0], r[1], r[2]
            )
            .unwrap();
        }
    }
    write_file(&out.join("manifest.csv"), manifest)
}

/// The LVS files of one split listed in `dir/manifest.csv`, in order.
pub fn read_split(dir: &Path, split: &str) -> CliResult<Vec<(PathBuf, LongitudinalVolume)>> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(CliError::Data(format!("{}: line {}: malformed row", path.display(), n + 1)));
        }
        if fields[0] == split {
            let file = dir.join(fields[2]);
            let v = read_lvs(&file)?;
            out.push((file, v));
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no {split} subjects", path.display())));
    }
    Ok(out)
}

/// Train into the run directory `out`: `config.echo`, `ckpt/`, `loss.csv`.
/// Subjects come from `data` (a `gen-data` directory) or are generated from
/// the configuration.
pub fn train_run(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> CliResult<()> {
    let subjects: Vec<LongitudinalVolume> = match data {
        Some(dir) => read_split(dir, "train")?.into_iter().map(|(_, v)| v).collect(),
        None => make_dataset(cfg.data.subjects, cfg.data.length, cfg.model.extents, cfg.seed)?
            .train
            .into_iter()
            .map(|s| s.volume)
            .collect(),
    };
    for v in &subjects {
        if v.extents() != cfg.model.extents {
            return Err(CliError::Data(format!(
                "subject extents {:?} differ from data.extents {:?}",
                v.extents(),
                cfg.model.extents
            )));
        }
        if v.len() - 1 > cfg.model.attention.max_len {
            return Err(CliError::Data(format!(
                "subject of {} frames exceeds attention.max_len = {}",
                v.len(),
                cfg.model.attention.max_len
            )));
        }
    }
    let ckpt = out.join("ckpt");
    create_dir(&ckpt)?;
    write_file(&out.join("config.echo"), cfg.to_text())?;
    let mut model = Sadm::new(cfg.model.clone(), cfg.seed)?;
    if cfg.pretrain_steps > 0 {
        let pre = sadm_core::training::TrainConfig {
            steps: cfg.pretrain_steps,
            lr: cfg.pretrain_lr,
            ..cfg.train.clone()
        };
        let trace = pretrain_conditioner(&mut model, &subjects, &pre)?;
        write_file(&out.join("pretrain_loss.csv"), loss_csv(&trace))?;
    }
    let trace = train(&mut model, &subjects, &cfg.train, Some(&ckpt))?;
    write_file(&out.join("loss.csv"), loss_csv(&trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Single,
    Missing,
    Full,
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Setting::Single),
            "missing" => Ok(Setting::Missing),
            "full" => Ok(Setting::Full),
            _ => Err(format!("unknown setting {s:?} (expected single, missing or full)")),
        }
    }
}

/// Explicit index lists for [`resolve_partition`].
#[derive(Clone, Debug, Default)]
pub struct PartitionArgs {
    pub cond: Option<Vec<usize>>,
    pub missing: Option<Vec<usize>>,
    pub future: Option<Vec<usize>>,
    /// Frames to predict in the full setting.
    pub k: usize,
}

/// single ⇒ C = {1}; full ⇒ C = {1..L−k}, F = the last k; missing (or no
/// setting) ⇒ the lists given explicitly, with the future list defaulting to
/// empty.
pub fn resolve_partition(setting: Option<Setting>, args: &PartitionArgs, len: usize) -> CliResult<IndexPartition> {
    let explicit = args.cond.is_some() || args.missing.is_some() || args.future.is_some();
    let p = match setting {
        Some(Setting::Single) | Some(Setting::Full) if explicit => {
            return Err(CliError::Usage("--cond/--missing/--future only apply to the missing setting".into()))
        }
        Some(Setting::Single) => IndexPartition::single(len),
        Some(Setting::Full) => {
            if args.k == 0 || args.k >= len {
                return Err(CliError::Usage(format!("--k must lie in 1..{len}")));
            }
            IndexPartition::full(len, args.k)
        }
        Some(Setting::Missing) | None => {
            let cond = args
                .cond
                .clone()
                .ok_or_else(|| CliError::Usage("--cond is required unless --setting is single or full".into()))?;
            IndexPartition::new(
                cond,
                args.missing.clone().unwrap_or_default(),
                args.future.clone().unwrap_or_default(),
            )
        }
    };
    p.validate(len).map_err(|v| CliError::Usage(format!("invalid partition: {v}")))?;
    Ok(p)
}

/// The configuration beside a checkpoint: `<ckpt>/../config.echo`, i.e. the
/// run directory for `RUN/ckpt/last.ckpt`.
pub fn config_for_checkpoint(ckpt: &Path) -> PathBuf {
    run_dir_of(ckpt).join("config.echo")
}

/// `RUN` for a checkpoint at `RUN/ckpt/NAME`.
pub fn run_dir_of(ckpt: &Path) -> PathBuf {
    match ckpt.parent().and_then(Path::parent) {
        Some(run) if run.as_os_str().is_empty() => PathBuf::from("."),
        Some(run) => run.to_path_buf(),
        None => PathBuf::from(".."),
    }
}

/// Complete `input` under partition `p`; the result holds the generated
/// frames only (every other frame absent).
pub fn sample_sequence(cfg: &RunConfig, ckpt: &Path, input: &LongitudinalVolume, p: &IndexPartition) -> CliResult<LongitudinalVolume> {
    if input.extents() != cfg.model.extents {
        return Err(CliError::Data(format!(
            "input extents {:?} differ from the model's {:?}",
            input.extents(),
            cfg.model.extents
        )));
    }
    if input.len() - 1 > cfg.model.attention.max_len {
        return Err(CliError::Data(format!(
            "input of {} frames exceeds attention.max_len = {}",
            input.len(),
            cfg.model.attention.max_len
        )));
    }
    let model = Sadm::load(cfg.model.clone(), ckpt)?;
    let mut rng = Rng::stream(cfg.sample.seed, 4);
    let done = autoregressive_sample(&model, &cfg.schedule(), input, p, &cfg.sample, &mut rng)?;
    let mut frames = vec![Tensor::zeros(&input.extents()); input.len()];
    let mut present = vec![false; input.len()];
    for (i, x) in done.missing.into_iter().chain(done.future) {
        frames[i - 1] = x;
        present[i - 1] = true;
    }
    Ok(LongitudinalVolume::with_mask(frames, present)?)
}

/// Metrics of every frame present in `pred`; the CSV goes to `csv_out`.
pub fn eval_files(pred: &Path, truth: &Path, csv_out: Option<&Path>) -> CliResult<String> {
    let report = evaluate(&read_lvs(pred)?, &read_lvs(truth)?)?;
    if let Some(out) = csv_out {
        write_file(out, report.to_csv())?;
    }
    Ok(report.to_table())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(format!("unknown axis {s:?} (expected x, y or z)")),
        }
    }
}

/// Plain (P2) PGM of one slice, values mapped from `[0, 1]` to `0..=255`.
/// Rows run along the first remaining axis, columns along the second.
pub fn render_slice(frame: &Tensor, axis: Axis, slice: usize) -> CliResult<String> {
    let s = frame.shape();
    let a = axis as usize;
    if slice >= s[a] {
        return Err(CliError::Usage(format!("slice {slice} outside 0..{} on axis {axis:?}", s[a])));
    }
    let (r, c) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    };
    let mut out = format!("P2\n{} {}\n255\n", s[c], s[r]);
    let d = frame.data();
    for i in 0..s[r] {
        let row: Vec<String> = (0..s[c])
            .map(|j| {
                let mut idx = [0; 3];
                idx[a] = slice;
                idx[r] = i;
                idx[c] = j;
                let v = d[(idx[0] * s[1] + idx[1]) * s[2] + idx[2]];
                ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn render_file(input: &Path, frame: usize, axis: Axis, slice: usize, out: &Path) -> CliResult<()> {
    let v = read_lvs(input)?;
    if frame == 0 || frame > v.len() {
        return Err(CliError::Usage(format!("frame {frame} outside 1..={}", v.len())));
    }
    if !v.is_present(frame) {
        return Err(CliError::Data(format!("frame {frame} is absent from {}", input.display())));
    }
    write_file(out, render_slice(v.frame(frame), axis, slice)?)
}
