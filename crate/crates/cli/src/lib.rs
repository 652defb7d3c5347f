//! The `chanstream` command line: dataset generation, training, rendering,
//! evaluation, packing and serving.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chanstream::fields::{Ablation, FieldError, Mode, ModelConfig, SceneModel};
use chanstream::image::{Image, ImageError};
use chanstream::render::{blend, decomposition_colors, render_image, Camera, RenderConfig, RenderError};
use chanstream::scenes::{evaluate_with, gen_scene3d, gen_toy2d, nominal_camera, EvalReport, Scene3dSpec, SceneDataset, SceneError, ToySpec};
use chanstream::stream_io::{load_checkpoint, pack_with, save_checkpoint, Dtype, StreamError};
use chanstream::train::{fit_with, loss_csv, TrainConfig, TrainError};
use chanstream_server::{ServerError, FOCAL_PER_WIDTH};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Grid resolution per axis for volumetric scenes unless overridden.
pub const DEFAULT_VOLUME_RESOLUTION: usize = 32;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Anything that fails after the inputs were accepted; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        runtime(e)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Invalid(_) => CliError::Validation(e.to_string()),
            e => runtime(e),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Config(_) | FieldError::Key { .. } => CliError::Validation(e.to_string()),
            e => runtime(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => CliError::Validation(e.to_string()),
            TrainError::Field(f) => f.into(),
            e => runtime(e),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Camera(_) => CliError::Validation(e.to_string()),
            e => runtime(e),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        runtime(e)
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        runtime(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "chanstream", version, about = "Decomposed dynamic radiance fields with channel-streamed grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Fit one model per clip and write checkpoints and loss curves.
    Train(TrainArgs),
    /// Render a trained model at a list of times.
    Render(RenderArgs),
    /// Score models on held-out views as a CSV table.
    Eval(EvalArgs),
    /// Convert a checkpoint into a streamable NFPS file.
    Pack(PackArgs),
    /// Serve an NFPS file over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    Toy2d,
    Scene3d,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    pub scene: SceneKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=500 --set model.features=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seeds both sampling and initialization; wins over the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablate: Option<Ablation>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// A checkpoint file or a training output directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for `frame_NNNN.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated model times.
    #[arg(long, value_delimiter = ',', required = true)]
    pub times: Vec<f64>,
    /// Eye, look-at point and up vector as nine comma-separated numbers.
    #[arg(long, value_delimiter = ',', num_args = 9)]
    pub pose: Option<Vec<f64>>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Blend the color-coded decomposition over each frame.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// `[NAME=]PATH` of a checkpoint or training directory; repeatable.
    /// Without any model the ground truth is scored against itself.
    #[arg(long)]
    pub model: Vec<String>,
    /// Also score each model with these decomposition branches masked.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value_t = 64)]
    pub cache_size: usize,
}

/// Settings gathered from a config file and `--set` overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `model.`-prefixed entries, in order, without the prefix.
    pub model: Vec<(String, String)>,
}

impl RunConfig {
    /// Applies one `key = value` pair. Keys prefixed `model.` go to the model
    /// config; everything else is a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        if let Some(mk) = key.strip_prefix("model.") {
            ModelConfig::toy2d(2, 2, 1).set(mk, value)?;
            self.model.push((mk.to_string(), value.to_string()));
        } else {
            self.train.set(key, value)?;
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn model_config(&self, dataset: &SceneDataset) -> Result<ModelConfig> {
        let frames = dataset.model_frames();
        let mut mc = match dataset.mode {
            Mode::Direct2d => ModelConfig::toy2d(dataset.width, dataset.height, frames),
            Mode::Volumetric => ModelConfig::volumetric(DEFAULT_VOLUME_RESOLUTION, frames),
        };
        for (k, v) in &self.model {
            mc.set(k, v)?;
        }
        Ok(mc)
    }

    /// Starts from the dataset's ray bounds and background.
    pub fn for_dataset(dataset: &SceneDataset) -> Self {
        let mut rc = Self::default();
        rc.train.near = dataset.near;
        rc.train.far = dataset.far;
        rc.train.background = dataset.background;
        rc
    }
}

/// Parses arguments, mapping clap failures onto exit codes: 0 for help and
/// version output, 1 for usage errors.
pub fn main_with(args: impl IntoIterator<Item = String>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Render(a) => render(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Pack(a) => pack(&a),
        Command::Serve(a) => Ok(chanstream_server::run(&a.stream, &a.bind, a.cache_size)?),
    }
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let dataset = match args.scene {
        SceneKind::Toy2d => gen_toy2d(&ToySpec::default(), &mut rng)?,
        SceneKind::Scene3d => gen_scene3d(&Scene3dSpec::default(), &mut rng)?,
    };
    dataset.write_dir(&args.out)?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<SceneDataset> {
    if !dir.join("manifest.txt").is_file() {
        return Err(CliError::Validation(format!("{} is not a dataset directory", dir.display())));
    }
    Ok(SceneDataset::read_dir(dir)?)
}

pub fn clip_checkpoint_name(start: usize) -> String {
    format!("clip_{start:05}.ckpt")
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let mut rc = RunConfig::for_dataset(&dataset);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        rc.parse_text(&text)?;
    }
    for kv in &args.overrides {
        rc.apply_override(kv)?;
    }
    if let Some(seed) = args.seed {
        rc.set("seed", &seed.to_string())?;
        rc.set("model.seed", &seed.to_string())?;
    }
    if let Some(a) = args.ablate {
        rc.set("model.ablation", a.as_str())?;
    }
    rc.train.validate()?;
    let mc = rc.model_config(&dataset)?;
    mc.validate()?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.txt"), format!("{}{}", rc.train.to_text(), mc.to_text("model.")))?;
    let mut failure = None;
    fit_with(&dataset.training_set(), &mc, &rc.train, |clip| {
        if failure.is_some() {
            return;
        }
        let result = save_checkpoint(&clip.model, &args.out.join(clip_checkpoint_name(clip.start)))
            .map_err(CliError::from)
            .and_then(|_| Ok(fs::write(args.out.join(format!("loss_{:05}.csv", clip.start)), loss_csv(&clip.losses))?));
        if let Err(e) = result {
            failure = Some(e);
        }
    })?;
    failure.map_or(Ok(()), Err)
}

/// Trained clips in frame order, each with its first frame.
pub struct ClipSet {
    pub clips: Vec<(usize, SceneModel)>,
    /// Settings from `config.txt` next to the checkpoints, if present.
    pub config: Option<TrainConfig>,
}

impl ClipSet {
    /// Loads a single checkpoint or every `clip_*.ckpt` in a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, clips) = if path.is_dir() {
            let mut names: Vec<(usize, PathBuf)> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter_map(|p| {
                    let name = p.file_name()?.to_str()?;
                    let start = name.strip_prefix("clip_")?.strip_suffix(".ckpt")?.parse().ok()?;
                    Some((start, p))
                })
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(CliError::Validation(format!("no clip_*.ckpt in {}", path.display())));
            }
            let clips = names.into_iter().map(|(s, p)| Ok((s, load_checkpoint(&p)?))).collect::<Result<Vec<_>>>()?;
            (path.to_path_buf(), clips)
        } else if path.is_file() {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), vec![(0, load_checkpoint(path)?)])
        } else {
            return Err(CliError::Validation(format!("{} does not exist", path.display())));
        };
        let config = match fs::read_to_string(dir.join("config.txt")) {
            Ok(text) => {
                let mut rc = RunConfig::default();
                rc.parse_text(&text)?;
                Some(rc.train)
            }
            Err(_) => None,
        };
        Ok(Self { clips, config })
    }

    /// The clip covering model time `t` and the clip-local time. Times past a
    /// clip's last frame but before the next clip clamp to that last frame.
    pub fn at(&self, t: f64) -> (&SceneModel, f64) {
        let i = self.clips.iter().rposition(|(s, _)| *s as f64 <= t).unwrap_or(0);
        let (start, model) = &self.clips[i];
        let last = (model.frames() - 1) as f64;
        (model, (t - *start as f64).clamp(0.0, last))
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        for (_, m) in &mut self.clips {
            m.config.ablation = a;
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.clips[0].1.config.ablation
    }

    pub fn render_config(&self) -> RenderConfig {
        let base = self.config.clone().unwrap_or_default();
        RenderConfig { samples: RenderConfig::default().samples, ..base.render_config() }
    }
}

fn vec3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

pub fn render(args: &RenderArgs) -> Result<()> {
    let set = ClipSet::load(&args.model)?;
    let first = &set.clips[0].1.config;
    let camera = match (first.mode, &args.pose) {
        (Mode::Direct2d, Some(_)) => return Err(CliError::Validation("2-D models take no --pose".into())),
        (Mode::Direct2d, None) => {
            let w = args.width.unwrap_or(first.grid_dims[0]);
            let h = args.height.unwrap_or(first.grid_dims[1]);
            if w == 0 || h == 0 {
                return Err(CliError::Validation("image size must be positive".into()));
            }
            nominal_camera(w, h)
        }
        (Mode::Volumetric, pose) => {
            let p = pose.clone().unwrap_or_else(|| vec![0.5, 0.75, 1.9, 0.5, 0.3, 0.5, 0.0, 1.0, 0.0]);
            let w = args.width.unwrap_or(64);
            let h = args.height.unwrap_or(64);
            Camera::look_at(vec3(&p[0..3]), vec3(&p[3..6]), vec3(&p[6..9]), w, h, FOCAL_PER_WIDTH * w as f64)?
        }
    };
    let last = set.clips.last().map(|(s, m)| (s + m.frames() - 1) as f64).unwrap_or(0.0);
    if let Some(t) = args.times.iter().find(|t| !(0.0..=last).contains(*t)) {
        return Err(CliError::Validation(format!("time {t} is outside [0, {last}]")));
    }
    let cfg = set.render_config();
    fs::create_dir_all(&args.out)?;
    for (i, &t) in args.times.iter().enumerate() {
        let (model, local) = set.at(t);
        let r = render_image(model, &camera, local, &cfg)?;
        let image = if args.overlay {
            blend(&r.image, &decomposition_colors(camera.width, camera.height, &r.decomposition), 0.5)?
        } else {
            r.image
        };
        image.write_png(&args.out.join(format!("frame_{i:04}.png")))?;
    }
    Ok(())
}

/// One evaluated model: its variant label and report.
pub struct EvalRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Render settings for scoring against a dataset.
pub fn eval_render_config(dataset: &SceneDataset, trained: Option<&TrainConfig>) -> RenderConfig {
    RenderConfig {
        tau: trained.map_or(RenderConfig::default().tau, |c| c.tau),
        near: dataset.near,
        far: dataset.far,
        background: dataset.background,
        ..RenderConfig::default()
    }
}

pub fn evaluate_clips(set: &ClipSet, dataset: &SceneDataset) -> Result<EvalReport> {
    let cfg = eval_render_config(dataset, set.config.as_ref());
    let report = evaluate_with(dataset, |v, t| {
        let (model, local) = set.at(t);
        Ok(render_image(model, &dataset.render_camera(v), local, &cfg)?.image)
    })?;
    Ok(report)
}

fn variant_name(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "full",
        other => other.as_str(),
    }
}

pub fn eval_csv(scene: &str, rows: &[EvalRow]) -> String {
    let mut s = String::from("scene,variant,region,psnr,ssim\n");
    for row in rows {
        for r in row.report.scores() {
            let ssim = r.ssim.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{scene},{},{},{:.4},{ssim}", row.variant, r.region, r.psnr);
        }
    }
    s
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    let dataset = read_dataset(&args.data)?;
    let scene = args.data.file_name().and_then(|n| n.to_str()).unwrap_or("scene").replace(',', "_");
    let mut rows = Vec::new();
    if args.model.is_empty() {
        let report = evaluate_with(&dataset, |v, _| Ok::<Image, SceneError>(v.image.clone()))?;
        rows.push(EvalRow { variant: "ground-truth".into(), report });
    }
    for spec in &args.model {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), p),
            None => (None, spec.as_str()),
        };
        let mut set = ClipSet::load(Path::new(path))?;
        let trained = set.ablation();
        let base = name.clone().unwrap_or_else(|| variant_name(trained).to_string());
        rows.push(EvalRow { variant: base.clone(), report: evaluate_clips(&set, &dataset)? });
        for &a in &args.ablate {
            if a == trained {
                continue;
            }
            set.set_ablation(a);
            rows.push(EvalRow { variant: format!("{base}:{}", variant_name(a)), report: evaluate_clips(&set, &dataset)? });
            set.set_ablation(trained);
        }
    }
    let csv = eval_csv(&scene, &rows);
    match &args.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(csv)
}

pub fn pack(args: &PackArgs) -> Result<()> {
    let set = ClipSet::load(&args.model)?;
    if set.clips.len() != 1 {
        return Err(CliError::Validation(format!("{} holds {} clips; pack one checkpoint at a time", args.model.display(), set.clips.len())));
    }
    let dtype = match args.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    pack_with(&set.clips[0].1, &args.out, dtype)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_accepts_comments_and_prefixes() {
        let mut rc = RunConfig::default();
        rc.parse_text("# comment\nsteps = 12  # trailing\n\nmodel.features = 3\nlambda=0.5\n").unwrap();
        assert_eq!(rc.train.steps, 12);
        assert_eq!(rc.train.lambda, 0.5);
        assert_eq!(rc.model, vec![("features".to_string(), "3".to_string())]);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let mut rc = RunConfig::default();
        let e = rc.parse_text("stepz = 3").unwrap_err();
        assert!(matches!(e, CliError::Validation(_)));
        assert!(e.to_string().contains("stepz"), "{e}");
        let e = rc.set("model.widht", "3").unwrap_err();
        assert!(e.to_string().contains("widht"), "{e}");
        assert!(rc.parse_text("steps").is_err());
        assert!(rc.apply_override("steps").is_err());
    }

    #[test]
    fn written_config_reloads_to_the_same_settings() {
        let mut rc = RunConfig::default();
        rc.set("alpha_decay_steps", "40").unwrap();
        rc.set("background", "0.5,0.25,1").unwrap();
        let mc = ModelConfig::volumetric(6, 4);
        let text = format!("{}{}", rc.train.to_text(), mc.to_text("model."));
        let mut back = RunConfig::default();
        back.parse_text(&text).unwrap();
        assert_eq!(back.train, rc.train);
        let mut mc2 = ModelConfig::volumetric(3, 4);
        for (k, v) in &back.model {
            mc2.set(k, v).unwrap();
        }
        assert_eq!(mc2, mc);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 2);
        assert_eq!(main_with(["chanstream", "--help"].map(String::from)), 0);
        assert_eq!(main_with(["chanstream", "--version"].map(String::from)), 0);
        assert_eq!(main_with(["chanstream"].map(String::from)), 1);
        assert_eq!(main_with(["chanstream", "frobnicate"].map(String::from)), 1);
    }
}
