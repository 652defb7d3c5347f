//! The five fields of the decomposed scene model and the probability-weighted
//! feature blend.
//!
//! * decomposition: streamed grid `V_f` + small MLP -> softmax over
//!   (static, deforming, new)
//! * stationary: static grid `V_s` + tiny MLP over (feature, encoded time)
//! * deformation: MLP over encoded (p, t) -> displacement; the warped point is
//!   looked up in the stationary field, which doubles as canonical space
//! * newness: streamed grid `V_n`, no decoder
//! * radiance: MLP over (blended feature, encoded view direction) -> (sigma, rgb),
//!   or straight to rgb in the 2-D toy mode

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_grid::{Backbone, GridError, Rate, StreamGrid};
use crate::grad::{GradError, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("query outside the domain: {0}")]
    Domain(String),
    #[error("view direction must be unit length, |d| = {0}")]
    NonUnitDirection(f64),
    #[error("operation requires {expected:?} mode")]
    WrongMode { expected: Mode },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("config key {key}: {msg}")]
    Key { key: String, msg: String },
}

pub type Result<T, E = FieldError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Points are 3-D and rendered by volume integration along rays.
    Volumetric,
    /// Points are 2-D pixel locations and the field value is the pixel color.
    Direct2d,
}

impl Mode {
    pub fn spatial_dims(self) -> usize {
        match self {
            Mode::Volumetric => 3,
            Mode::Direct2d => 2,
        }
    }
}

/// Decomposition branch forced to probability zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    None,
    NoStatic,
    NoDeform,
    NoNew,
}

impl Ablation {
    /// Which of (static, deform, new) remain active.
    pub fn mask(self) -> [bool; 3] {
        match self {
            Ablation::None => [true; 3],
            Ablation::NoStatic => [false, true, true],
            Ablation::NoDeform => [true, false, true],
            Ablation::NoNew => [true, true, false],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoStatic => "no-static",
            Ablation::NoDeform => "no-deform",
            Ablation::NoNew => "no-new",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no-static" => Ok(Ablation::NoStatic),
            "no-deform" => Ok(Ablation::NoDeform),
            "no-new" => Ok(Ablation::NoNew),
            other => Err(FieldError::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Node counts of the streamed grids `V_f` and `V_n`.
    pub grid_dims: Vec<usize>,
    /// Node counts of the static grid `V_s`.
    pub static_dims: Vec<usize>,
    pub features: usize,
    pub rate: Rate,
    pub frames: usize,
    pub backbone: Backbone,
    pub pos_levels: usize,
    pub deform_time_levels: usize,
    pub static_time_levels: usize,
    pub dir_levels: usize,
    pub decomp_width: usize,
    pub decomp_layers: usize,
    pub static_width: usize,
    pub static_layers: usize,
    pub deform_width: usize,
    pub deform_layers: usize,
    pub radiance_width: usize,
    pub radiance_layers: usize,
    pub ablation: Ablation,
    /// Half-width of the uniform initialization of grid values.
    pub grid_init: f64,
    /// Normalized time at which deformed points query the stationary field;
    /// `None` uses the query's own time.
    pub canonical_time: Option<f64>,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for the 2-D toy mode.
    pub fn toy2d(width: usize, height: usize, frames: usize) -> Self {
        Self {
            mode: Mode::Direct2d,
            grid_dims: vec![width, height],
            static_dims: vec![width, height],
            features: 4,
            rate: Rate::integer(1),
            frames,
            backbone: Backbone::Dense,
            pos_levels: 6,
            deform_time_levels: 2,
            static_time_levels: 1,
            dir_levels: 4,
            decomp_width: 64,
            decomp_layers: 2,
            static_width: 64,
            static_layers: 2,
            deform_width: 64,
            deform_layers: 4,
            radiance_width: 64,
            radiance_layers: 4,
            ablation: Ablation::None,
            grid_init: 0.1,
            canonical_time: Some(-1.0),
            seed: 0,
        }
    }

    /// Desk-scale defaults for volumetric scenes.
    pub fn volumetric(resolution: usize, frames: usize) -> Self {
        Self {
            mode: Mode::Volumetric,
            grid_dims: vec![resolution; 3],
            static_dims: vec![resolution; 3],
            ..Self::toy2d(2, 2, frames)
        }
    }

    pub const KEYS: [&'static str; 22] = [
        "grid_dims",
        "static_dims",
        "features",
        "rate",
        "backbone",
        "pos_levels",
        "deform_time_levels",
        "static_time_levels",
        "dir_levels",
        "decomp_width",
        "decomp_layers",
        "static_width",
        "static_layers",
        "deform_width",
        "deform_layers",
        "radiance_width",
        "radiance_layers",
        "ablation",
        "grid_init",
        "canonical_time",
        "seed",
        "resolution",
    ];

    /// Sets one field from text. `resolution` sets every axis of both grids
    /// at once; dims are written `96x96`, backbones `dense` or `cp:16`, and
    /// the canonical time `none` or a number.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let err = |msg: String| FieldError::Key { key: key.into(), msg };
        let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{v:?}: {e}")));
        let dims = |v: &str| v.split('x').map(|p| num(p.trim())).collect::<Result<Vec<_>>>();
        match key {
            "grid_dims" => self.grid_dims = dims(v)?,
            "static_dims" => self.static_dims = dims(v)?,
            "resolution" => {
                let n = num(v)?;
                let d = self.mode.spatial_dims();
                self.grid_dims = vec![n; d];
                self.static_dims = vec![n; d];
            }
            "features" => self.features = num(v)?,
            "rate" => self.rate = v.parse().map_err(|e: GridError| err(e.to_string()))?,
            "backbone" => {
                self.backbone = match v.split_once(':') {
                    None if v == "dense" => Backbone::Dense,
                    Some(("cp", r)) => Backbone::CpRank(num(r)?),
                    _ => return Err(err(format!("{v:?} is neither dense nor cp:RANK"))),
                }
            }
            "pos_levels" => self.pos_levels = num(v)?,
            "deform_time_levels" => self.deform_time_levels = num(v)?,
            "static_time_levels" => self.static_time_levels = num(v)?,
            "dir_levels" => self.dir_levels = num(v)?,
            "decomp_width" => self.decomp_width = num(v)?,
            "decomp_layers" => self.decomp_layers = num(v)?,
            "static_width" => self.static_width = num(v)?,
            "static_layers" => self.static_layers = num(v)?,
            "deform_width" => self.deform_width = num(v)?,
            "deform_layers" => self.deform_layers = num(v)?,
            "radiance_width" => self.radiance_width = num(v)?,
            "radiance_layers" => self.radiance_layers = num(v)?,
            "ablation" => self.ablation = v.parse().map_err(|e: FieldError| err(e.to_string()))?,
            "grid_init" => self.grid_init = v.parse().map_err(|e| err(format!("{v:?}: {e}")))?,
            "canonical_time" => {
                self.canonical_time = match v {
                    "none" => None,
                    _ => Some(v.parse().map_err(|e| err(format!("{v:?}: {e}")))?),
                }
            }
            "seed" => self.seed = v.parse().map_err(|e| err(format!("{v:?}: {e}")))?,
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    /// `key = value` lines that [`ModelConfig::set`] reads back; `prefix` is
    /// prepended to every key.
    pub fn to_text(&self, prefix: &str) -> String {
        let dims = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let backbone = match self.backbone {
            Backbone::Dense => "dense".to_string(),
            Backbone::CpRank(r) => format!("cp:{r}"),
        };
        let canonical = self.canonical_time.map_or("none".to_string(), |t| t.to_string());
        let rows: [(&str, String); 21] = [
            ("grid_dims", dims(&self.grid_dims)),
            ("static_dims", dims(&self.static_dims)),
            ("features", self.features.to_string()),
            ("rate", self.rate.to_string()),
            ("backbone", backbone),
            ("pos_levels", self.pos_levels.to_string()),
            ("deform_time_levels", self.deform_time_levels.to_string()),
            ("static_time_levels", self.static_time_levels.to_string()),
            ("dir_levels", self.dir_levels.to_string()),
            ("decomp_width", self.decomp_width.to_string()),
            ("decomp_layers", self.decomp_layers.to_string()),
            ("static_width", self.static_width.to_string()),
            ("static_layers", self.static_layers.to_string()),
            ("deform_width", self.deform_width.to_string()),
            ("deform_layers", self.deform_layers.to_string()),
            ("radiance_width", self.radiance_width.to_string()),
            ("radiance_layers", self.radiance_layers.to_string()),
            ("ablation", self.ablation.as_str().to_string()),
            ("grid_init", self.grid_init.to_string()),
            ("canonical_time", canonical),
            ("seed", self.seed.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{prefix}{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mode.spatial_dims();
        if self.grid_dims.len() != d || self.static_dims.len() != d {
            return Err(FieldError::Config(format!("{:?} mode needs {d}-D grids", self.mode)));
        }
        let layers = [self.decomp_layers, self.static_layers, self.deform_layers, self.radiance_layers];
        let widths = [self.decomp_width, self.static_width, self.deform_width, self.radiance_width];
        if layers.contains(&0) || widths.contains(&0) {
            return Err(FieldError::Config("MLP layers and widths must be positive".into()));
        }
        if !(self.grid_init >= 0.0) {
            return Err(FieldError::Config("grid_init must be >= 0".into()));
        }
        self.streamed_grid()?;
        self.stationary_grid()?;
        Ok(())
    }

    pub fn streamed_grid(&self) -> Result<StreamGrid> {
        Ok(StreamGrid::new(self.grid_dims.clone(), self.features, self.rate, self.frames, self.backbone)?)
    }

    pub fn stationary_grid(&self) -> Result<StreamGrid> {
        Ok(StreamGrid::static_grid(self.static_dims.clone(), self.features, self.backbone)?)
    }

    fn encoded_len(components: usize, levels: usize) -> usize {
        components * (1 + 2 * levels)
    }

    /// Layer sizes of every MLP, in the order used for parameter naming.
    pub fn mlp_specs(&self) -> [(&'static str, MlpSpec); 4] {
        let d = self.mode.spatial_dims();
        let f = self.features;
        let sizes = |input: usize, width: usize, layers: usize, output: usize| {
            let mut s = vec![input];
            s.extend(std::iter::repeat_n(width, layers - 1));
            s.push(output);
            MlpSpec { sizes: s }
        };
        let radiance_in = match self.mode {
            Mode::Volumetric => f + Self::encoded_len(3, self.dir_levels),
            Mode::Direct2d => f,
        };
        let radiance_out = match self.mode {
            Mode::Volumetric => 4,
            Mode::Direct2d => 3,
        };
        [
            ("decomposition", sizes(f, self.decomp_width, self.decomp_layers, 3)),
            (
                "stationary",
                sizes(f + Self::encoded_len(1, self.static_time_levels), self.static_width, self.static_layers, f),
            ),
            (
                "deformation",
                sizes(
                    Self::encoded_len(d, self.pos_levels) + Self::encoded_len(1, self.deform_time_levels),
                    self.deform_width,
                    self.deform_layers,
                    d,
                ),
            ),
            ("radiance", sizes(radiance_in, self.radiance_width, self.radiance_layers, radiance_out)),
        ]
    }
}

/// Layer sizes of a fully connected network (input, hidden..., output).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
}

/// ReLU hidden layers, identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn init(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut ChaCha8Rng, zero_last: bool) -> Self {
        let n = spec.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (spec.sizes[l], spec.sizes[l + 1]);
            let last = l + 1 == n;
            let bound = if last { (1.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| if last && zero_last { 0.0 } else { rng.gen_range(-bound..bound) })
                .collect();
            let wid = store.add(format!("{name}.{l}.weight"), Tensor::matrix(fan_in, fan_out, w));
            let bid = store.add(format!("{name}.{l}.bias"), Tensor::vector(vec![0.0; fan_out]));
            layers.push((wid, bid));
        }
        Self { spec, layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(w);
            let bv = g.param(b);
            let z = g.matmul(h, wv)?;
            h = g.add_bias(z, bv)?;
            if l + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Frequency encoding `[x, sin(2^l pi x), cos(2^l pi x) for l < levels]` per component.
pub fn encode(x: &[f64], levels: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(x);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        for &v in x {
            out.push((f * v).sin());
            out.push((f * v).cos());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probabilities {
    pub p_static: f64,
    pub p_deform: f64,
    pub p_new: f64,
}

impl Probabilities {
    pub fn as_array(&self) -> [f64; 3] {
        [self.p_static, self.p_deform, self.p_new]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridParam {
    pub grid: StreamGrid,
    pub id: ParamId,
}

/// A batch of field queries.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    /// `n x d` points in `[0, 1]^d`.
    pub points: Tensor,
    /// Per-point continuous frame time in `[0, T - 1]`.
    pub times: Vec<f64>,
    /// `n x 3` unit view directions (volumetric mode only).
    pub dirs: Option<Tensor>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Graph handles produced by [`SceneModel::eval`].
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `n x 3` (static, deform, new).
    pub probs: Var,
    /// `n x F` blended feature.
    pub feature: Var,
    /// `n x 1` density (volumetric mode).
    pub sigma: Option<Var>,
    /// `n x 3` color.
    pub rgb: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub decomposition_grid: GridParam,
    pub static_grid: GridParam,
    pub newness_grid: GridParam,
    pub decomposition: Mlp,
    pub stationary: Mlp,
    pub deformation: Mlp,
    pub radiance: Mlp,
}

impl SceneModel {
    /// Builds a freshly initialized model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let streamed = config.streamed_grid()?;
        let stationary = config.stationary_grid()?;
        let grid_values = |len: usize, rng: &mut ChaCha8Rng| -> Tensor {
            let a = config.grid_init;
            Tensor::vector((0..len).map(|_| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 }).collect())
        };
        let vf = params.add("decomposition.grid", grid_values(streamed.storage_len(), &mut rng));
        let vs = params.add("stationary.grid", grid_values(stationary.storage_len(), &mut rng));
        let vn = params.add("newness.grid", grid_values(streamed.storage_len(), &mut rng));
        let [dspec, sspec, fspec, rspec] = config.mlp_specs();
        let decomposition = Mlp::init(&mut params, dspec.0, dspec.1, &mut rng, false);
        let stationary_mlp = Mlp::init(&mut params, sspec.0, sspec.1, &mut rng, false);
        let deformation = Mlp::init(&mut params, fspec.0, fspec.1, &mut rng, true);
        let radiance = Mlp::init(&mut params, rspec.0, rspec.1, &mut rng, false);
        Ok(Self {
            decomposition_grid: GridParam { grid: streamed.clone(), id: vf },
            static_grid: GridParam { grid: stationary, id: vs },
            newness_grid: GridParam { grid: streamed, id: vn },
            decomposition,
            stationary: stationary_mlp,
            deformation,
            radiance,
            config,
            params,
        })
    }

    /// Rebuilds a model around externally supplied parameter values, which
    /// must match the names and shapes `config` produces.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.grid_init = 0.0;
        let mut model = Self::new(cfg)?;
        model.config = config;
        if params.len() != model.params.len() {
            return Err(FieldError::Config(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in model.params.iter() {
            let (pname, pval) = (params.name(id), params.get(id));
            if pname != name || pval.shape() != value.shape() {
                return Err(FieldError::Config(format!(
                    "parameter {} mismatch: {name} {:?} vs {pname} {:?}",
                    id.index(),
                    value.shape(),
                    pval.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    fn norm_time(&self, t: f64) -> f64 {
        let span = self.config.frames.saturating_sub(1).max(1) as f64;
        t / span
    }

    fn check_times(&self, times: &[f64]) -> Result<()> {
        let max = (self.config.frames - 1) as f64;
        if let Some(&t) = times.iter().find(|&&t| !(0.0..=max).contains(&t)) {
            return Err(GridError::FrameOutOfRange { t, max: self.config.frames - 1 }.into());
        }
        Ok(())
    }

    fn time_encoding(&self, times: &[f64], levels: usize) -> Tensor {
        let normalized: Vec<f64> = times.iter().map(|&t| self.norm_time(t)).collect();
        Self::encode_normalized(&normalized, levels)
    }

    fn encode_normalized(times: &[f64], levels: usize) -> Tensor {
        let mut data = Vec::with_capacity(times.len() * (1 + 2 * levels));
        for &t in times {
            encode(&[t], levels, &mut data);
        }
        Tensor::matrix(times.len(), 1 + 2 * levels, data)
    }

    /// Decomposition probabilities, `n x 3`.
    pub fn probabilities(&self, g: &mut Graph<'_>, points: Var, times: &[f64]) -> Result<Var> {
        let vf = g.param(self.decomposition_grid.id);
        let feat = self.decomposition_grid.grid.sample_batch(g, vf, points, times)?;
        let logits = self.decomposition.forward(g, feat)?;
        Ok(g.softmax_masked(logits, Some(&self.config.ablation.mask()))?)
    }

    /// Stationary feature `s(q, t)`, `n x F`.
    pub fn stationary_features(&self, g: &mut Graph<'_>, points: Var, times: &[f64]) -> Result<Var> {
        let tenc = self.time_encoding(times, self.config.static_time_levels);
        self.stationary_encoded(g, points, tenc)
    }

    fn stationary_encoded(&self, g: &mut Graph<'_>, points: Var, tenc: Tensor) -> Result<Var> {
        let vs = g.param(self.static_grid.id);
        let zeros = vec![0.0; tenc.rows()];
        let feat = self.static_grid.grid.sample_batch(g, vs, points, &zeros)?;
        let tenc = g.constant(tenc);
        let input = g.concat_cols(&[feat, tenc])?;
        self.stationary.forward(g, input)
    }

    /// Displacement `d(p, t)`, `n x d`.
    pub fn displacements(&self, g: &mut Graph<'_>, points: &Tensor, times: &[f64]) -> Result<Var> {
        let cfg = &self.config;
        let d = points.cols();
        let width = d * (1 + 2 * cfg.pos_levels) + 1 + 2 * cfg.deform_time_levels;
        let mut data = Vec::with_capacity(times.len() * width);
        for (i, &t) in times.iter().enumerate() {
            encode(points.row(i), cfg.pos_levels, &mut data);
            encode(&[self.norm_time(t)], cfg.deform_time_levels, &mut data);
        }
        let input = g.constant(Tensor::matrix(times.len(), width, data));
        self.deformation.forward(g, input)
    }

    /// Stationary field queried at the deformed point `clamp(p + d(p, t))`,
    /// at the canonical time when one is configured.
    pub fn deformed_features(&self, g: &mut Graph<'_>, points: &Tensor, times: &[f64]) -> Result<Var> {
        let delta = self.displacements(g, points, times)?;
        let p = g.constant(points.clone());
        let moved = g.add(p, delta)?;
        let q = g.clamp(moved, 0.0, 1.0);
        match self.config.canonical_time {
            Some(tc) => {
                let tenc = Self::encode_normalized(&vec![tc; times.len()], self.config.static_time_levels);
                self.stationary_encoded(g, q, tenc)
            }
            None => self.stationary_features(g, q, times),
        }
    }

    /// Newness feature `n(p, t)`, `n x F`.
    pub fn newness_features(&self, g: &mut Graph<'_>, points: Var, times: &[f64]) -> Result<Var> {
        let vn = g.param(self.newness_grid.id);
        Ok(self.newness_grid.grid.sample_batch(g, vn, points, times)?)
    }

    /// Evaluates every field for a batch of queries.
    ///
    /// Branches whose probability is below `tau` contribute zero and are not
    /// evaluated for that point. Ablated branches are never evaluated.
    pub fn eval(&self, g: &mut Graph<'_>, batch: &QueryBatch, tau: f64) -> Result<FieldOutput> {
        let n = batch.len();
        let d = self.config.mode.spatial_dims();
        if batch.points.shape() != [n, d] {
            return Err(GradError::ShapeMismatch {
                op: "eval",
                lhs: vec![n, d],
                rhs: batch.points.shape().to_vec(),
            }
            .into());
        }
        if n == 0 {
            return Err(FieldError::Domain("empty query batch".into()));
        }
        if !(tau >= 0.0) {
            return Err(FieldError::Domain(format!("tau must be >= 0, got {tau}")));
        }
        self.check_times(&batch.times)?;

        let points = g.constant(batch.points.clone());
        let probs = self.probabilities(g, points, &batch.times)?;
        let mask = self.config.ablation.mask();
        let pvals = g.value(probs).clone();

        let mut parts = Vec::with_capacity(3);
        for branch in 0..3 {
            if !mask[branch] {
                continue;
            }
            let rows: Vec<usize> = (0..n).filter(|&i| pvals.data()[i * 3 + branch] >= tau).collect();
            if rows.is_empty() {
                continue;
            }
            let all = rows.len() == n;
            let (sub_points, sub_times) = if all {
                (batch.points.clone(), batch.times.clone())
            } else {
                let mut pts = Vec::with_capacity(rows.len() * d);
                for &i in &rows {
                    pts.extend_from_slice(batch.points.row(i));
                }
                (Tensor::matrix(rows.len(), d, pts), rows.iter().map(|&i| batch.times[i]).collect())
            };
            let feature = match branch {
                0 => {
                    let p = if all { points } else { g.constant(sub_points) };
                    self.stationary_features(g, p, &sub_times)?
                }
                1 => self.deformed_features(g, &sub_points, &sub_times)?,
                _ => {
                    let p = if all { points } else { g.constant(sub_points) };
                    self.newness_features(g, p, &sub_times)?
                }
            };
            let col = g.columns(probs, branch, branch + 1)?;
            let weighted = if all {
                g.scale_rows(feature, col)?
            } else {
                let w = g.gather_rows(col, &rows)?;
                let scaled = g.scale_rows(feature, w)?;
                g.scatter_rows(scaled, &rows, n)?
            };
            parts.push(weighted);
        }
        let feature = match parts.split_first() {
            None => g.constant(Tensor::zeros(&[n, self.config.features])),
            Some((&first, rest)) => {
                let mut acc = first;
                for &p in rest {
                    acc = g.add(acc, p)?;
                }
                acc
            }
        };
        let (sigma, rgb) = self.decode(g, feature, batch.dirs.as_ref())?;
        Ok(FieldOutput { probs, feature, sigma, rgb })
    }

    /// Radiance decoder on `n x F` features. Returns `(sigma, rgb)`; sigma is
    /// `None` in the 2-D mode.
    pub fn decode(&self, g: &mut Graph<'_>, feature: Var, dirs: Option<&Tensor>) -> Result<(Option<Var>, Var)> {
        match self.config.mode {
            Mode::Direct2d => {
                let out = self.radiance.forward(g, feature)?;
                Ok((None, g.sigmoid(out)))
            }
            Mode::Volumetric => {
                let dirs = dirs.ok_or_else(|| FieldError::Domain("volumetric decode needs view directions".into()))?;
                let n = dirs.rows();
                let width = 3 * (1 + 2 * self.config.dir_levels);
                let mut data = Vec::with_capacity(n * width);
                for i in 0..n {
                    encode(dirs.row(i), self.config.dir_levels, &mut data);
                }
                let denc = g.constant(Tensor::matrix(n, width, data));
                let input = g.concat_cols(&[feature, denc])?;
                let out = self.radiance.forward(g, input)?;
                let s = g.columns(out, 0, 1)?;
                let c = g.columns(out, 1, 4)?;
                Ok((Some(g.softplus(s)), g.sigmoid(c)))
            }
        }
    }

    fn check_point(&self, p: &[f64], t: f64) -> Result<()> {
        let d = self.config.mode.spatial_dims();
        if p.len() != d || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FieldError::Domain(format!("point {p:?} not in [0,1]^{d}")));
        }
        self.check_times(&[t])
    }

    fn single<T>(&self, p: &[f64], t: f64, f: impl FnOnce(&mut Graph<'_>, Var, &Tensor) -> Result<T>) -> Result<T> {
        self.check_point(p, t)?;
        let mut g = Graph::new(&self.params);
        let pt = Tensor::matrix(1, p.len(), p.to_vec());
        let pv = g.constant(pt.clone());
        f(&mut g, pv, &pt)
    }

    pub fn decompose(&self, p: &[f64], t: f64) -> Result<Probabilities> {
        self.single(p, t, |g, pv, _| {
            let probs = self.probabilities(g, pv, &[t])?;
            let v = g.value(probs).data();
            Ok(Probabilities { p_static: v[0], p_deform: v[1], p_new: v[2] })
        })
    }

    pub fn stationary_feature(&self, p: &[f64], t: f64) -> Result<Vec<f64>> {
        self.single(p, t, |g, pv, _| {
            let v = self.stationary_features(g, pv, &[t])?;
            Ok(g.value(v).data().to_vec())
        })
    }

    pub fn deform(&self, p: &[f64], t: f64) -> Result<Vec<f64>> {
        self.single(p, t, |g, _, pt| {
            let v = self.displacements(g, pt, &[t])?;
            Ok(g.value(v).data().to_vec())
        })
    }

    pub fn newness_feature(&self, p: &[f64], t: f64) -> Result<Vec<f64>> {
        self.single(p, t, |g, pv, _| {
            let v = self.newness_features(g, pv, &[t])?;
            Ok(g.value(v).data().to_vec())
        })
    }

    pub fn blended_feature(&self, p: &[f64], t: f64, tau: f64) -> Result<Vec<f64>> {
        self.check_point(p, t)?;
        let batch = QueryBatch {
            points: Tensor::matrix(1, p.len(), p.to_vec()),
            times: vec![t],
            dirs: (self.config.mode == Mode::Volumetric).then(|| Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0])),
        };
        let mut g = Graph::new(&self.params);
        let out = self.eval(&mut g, &batch, tau)?;
        Ok(g.value(out.feature).data().to_vec())
    }

    pub fn decode_radiance(&self, v: &[f64], dir: [f64; 3]) -> Result<RadianceSample> {
        if self.config.mode != Mode::Volumetric {
            return Err(FieldError::WrongMode { expected: Mode::Volumetric });
        }
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(FieldError::NonUnitDirection(norm));
        }
        self.check_feature(v)?;
        let mut g = Graph::new(&self.params);
        let fv = g.constant(Tensor::matrix(1, v.len(), v.to_vec()));
        let (sigma, rgb) = self.decode(&mut g, fv, Some(&Tensor::matrix(1, 3, dir.to_vec())))?;
        let c = g.value(rgb).data();
        Ok(RadianceSample {
            sigma: g.value(sigma.expect("volumetric sigma")).item(),
            rgb: [c[0], c[1], c[2]],
        })
    }

    pub fn direct_color(&self, v: &[f64]) -> Result<[f64; 3]> {
        if self.config.mode != Mode::Direct2d {
            return Err(FieldError::WrongMode { expected: Mode::Direct2d });
        }
        self.check_feature(v)?;
        let mut g = Graph::new(&self.params);
        let fv = g.constant(Tensor::matrix(1, v.len(), v.to_vec()));
        let (_, rgb) = self.decode(&mut g, fv, None)?;
        let c = g.value(rgb).data();
        Ok([c[0], c[1], c[2]])
    }

    fn check_feature(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.features {
            return Err(FieldError::Domain(format!("feature length {} != F = {}", v.len(), self.config.features)));
        }
        Ok(())
    }

    /// Ids of the explicit grids (as opposed to MLP weights).
    pub fn grid_ids(&self) -> [ParamId; 3] {
        [self.decomposition_grid.id, self.static_grid.id, self.newness_grid.id]
    }

    /// Order-sensitive 64-bit hash of every parameter bit pattern.
    pub fn param_hash(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check, Probe};

    fn tiny_config(mode: Mode) -> ModelConfig {
        let mut c = match mode {
            Mode::Direct2d => ModelConfig::toy2d(5, 4, 4),
            Mode::Volumetric => ModelConfig::volumetric(3, 4),
        };
        c.features = 3;
        c.rate = "0.5".parse().unwrap();
        c.decomp_width = 5;
        c.static_width = 6;
        c.deform_width = 5;
        c.radiance_width = 6;
        c.deform_layers = 2;
        c.radiance_layers = 3;
        c.pos_levels = 2;
        c.dir_levels = 1;
        c.seed = 11;
        c
    }

    fn set_param(model: &mut SceneModel, name: &str, values: &[f64]) {
        let id = model.params.find(name).unwrap();
        model.params.get_mut(id).data_mut().copy_from_slice(values);
    }

    fn zero_param(model: &mut SceneModel, name: &str) {
        let id = model.params.find(name).unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    fn randomize(model: &mut SceneModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn last_bias(model: &SceneModel, mlp: &Mlp) -> String {
        model.params.name(mlp.layers.last().unwrap().1).to_string()
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = ModelConfig::volumetric(5, 7);
        c.set("backbone", "cp:3").unwrap();
        c.set("rate", "1/2").unwrap();
        c.set("canonical_time", "none").unwrap();
        c.set("ablation", "no-static").unwrap();
        c.grid_init = 0.25;
        let mut back = ModelConfig::volumetric(2, 7);
        for line in c.to_text("").lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, c);
        assert!(c.to_text("model.").lines().all(|l| l.starts_with("model.")));
    }

    #[test]
    fn config_keys_parse_and_reject_unknowns() {
        let mut c = ModelConfig::toy2d(8, 8, 4);
        for (k, v) in [
            ("grid_dims", "12x10"),
            ("rate", "1/2"),
            ("backbone", "cp:5"),
            ("ablation", "no-new"),
            ("canonical_time", "none"),
            ("features", "6"),
        ] {
            c.set(k, v).unwrap();
        }
        assert_eq!(c.grid_dims, vec![12, 10]);
        assert_eq!(c.rate, Rate::new(1, 2).unwrap());
        assert_eq!(c.backbone, Backbone::CpRank(5));
        assert_eq!(c.ablation, Ablation::NoNew);
        assert_eq!(c.canonical_time, None);
        c.set("resolution", "7").unwrap();
        assert_eq!((c.grid_dims.clone(), c.static_dims.clone()), (vec![7, 7], vec![7, 7]));
        assert!(ModelConfig::KEYS.contains(&"resolution"));
        for (k, v) in [("colour", "1"), ("features", "x"), ("backbone", "cp"), ("rate", "0")] {
            match c.set(k, v) {
                Err(FieldError::Key { key, .. }) => assert_eq!(key, k),
                other => panic!("{k}={v}: {other:?}"),
            }
        }
    }

    #[test]
    fn softmax_decomposition_values() {
        let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        // A zero V_f with zero biases gives uniform logits.
        zero_param(&mut m, "decomposition.grid");
        let p = m.decompose(&[0.3, 0.6], 1.5).unwrap();
        for v in p.as_array() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let bias = last_bias(&m, &m.decomposition.clone());
        set_param(&mut m, &bias, &[1.0, 0.0, 0.0]);
        let p = m.decompose(&[0.3, 0.6], 1.5).unwrap();
        let e = std::f64::consts::E;
        assert!((p.p_static - e / (e + 2.0)).abs() < 1e-15);
        assert!((p.p_deform - 1.0 / (e + 2.0)).abs() < 1e-15);
        set_param(&mut m, &bias, &[40.0, -800.0, -800.0]);
        assert!((m.decompose(&[0.3, 0.6], 0.0).unwrap().p_static - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_stationary_field_gives_zero_feature() {
        let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        zero_param(&mut m, "stationary.grid");
        for l in 0..m.stationary.layers.len() {
            zero_param(&mut m, &format!("stationary.{l}.weight"));
        }
        assert_eq!(m.stationary_feature(&[0.2, 0.9], 2.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn stationary_without_time_encoding_is_time_invariant() {
        let mut cfg = tiny_config(Mode::Direct2d);
        cfg.static_time_levels = 0;
        let mut m = SceneModel::new(cfg).unwrap();
        // With no frequencies only the raw normalized time enters; zero its weight row.
        let w = m.stationary.layers[0].0;
        let cols = m.params.get(w).shape()[1];
        let f = m.config.features;
        m.params.get_mut(w).data_mut()[f * cols..(f + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
        let a = m.stationary_feature(&[0.4, 0.4], 0.0).unwrap();
        let b = m.stationary_feature(&[0.4, 0.4], 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_stationary_decoder_returns_node_feature() {
        let mut cfg = tiny_config(Mode::Direct2d);
        cfg.static_layers = 1;
        let mut m = SceneModel::new(cfg).unwrap();
        let (w, _) = m.stationary.layers[0];
        let shape = m.params.get(w).shape().to_vec();
        let mut ident = vec![0.0; shape[0] * shape[1]];
        for j in 0..shape[1] {
            ident[j * shape[1] + j] = 1.0;
        }
        m.params.get_mut(w).data_mut().copy_from_slice(&ident);
        let grid = m.static_grid.grid.clone();
        let storage = m.params.get(m.static_grid.id).data().to_vec();
        // Node (x=2, y=1) of a 5x4 grid.
        let node = 2 + 5;
        let expected: Vec<f64> = (0..3).map(|c| storage[node * grid.channels() + c]).collect();
        let got = m.stationary_feature(&[0.5, 1.0 / 3.0], 1.0).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deformation_starts_at_identity() {
        let mut cfg = tiny_config(Mode::Volumetric);
        cfg.canonical_time = None;
        let m = SceneModel::new(cfg.clone()).unwrap();
        assert_eq!(m.deform(&[0.1, 0.5, 0.9], 2.5).unwrap(), vec![0.0; 3]);
        // The deformed branch therefore reads the static branch exactly.
        let pts = Tensor::matrix(1, 3, vec![0.1, 0.5, 0.9]);
        let mut g = Graph::new(&m.params);
        let pv = g.constant(pts.clone());
        let a = m.stationary_features(&mut g, pv, &[2.5]).unwrap();
        let b = m.deformed_features(&mut g, &pts, &[2.5]).unwrap();
        assert_eq!(g.value(a), g.value(b));

        // With a canonical time the lookup ignores the query time.
        cfg.canonical_time = Some(-1.0);
        let m = SceneModel::new(cfg).unwrap();
        let mut g = Graph::new(&m.params);
        let pv = g.constant(pts.clone());
        let tenc = SceneModel::encode_normalized(&[-1.0], m.config.static_time_levels);
        let a = m.stationary_encoded(&mut g, pv, tenc).unwrap();
        let b = m.deformed_features(&mut g, &pts, &[2.5]).unwrap();
        let c = m.deformed_features(&mut g, &pts, &[0.0]).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.value(b), g.value(c));
    }

    #[test]
    fn linear_deformation_in_time() {
        let mut cfg = tiny_config(Mode::Direct2d);
        cfg.deform_layers = 1;
        cfg.deform_time_levels = 0;
        let mut m = SceneModel::new(cfg).unwrap();
        let (w, _) = m.deformation.layers[0];
        let rows = m.params.get(w).shape()[0];
        // Only the raw time input (last row) feeds x displacement.
        let mut data = vec![0.0; rows * 2];
        data[(rows - 1) * 2] = 0.3;
        m.params.get_mut(w).data_mut().copy_from_slice(&data);
        let at = |t: f64| m.deform(&[0.5, 0.5], t).unwrap()[0];
        let (a, b, c) = (at(0.0), at(1.5), at(3.0));
        assert!((b - (a + c) / 2.0).abs() < 1e-15);
        assert!((c - 0.3).abs() < 1e-15);
    }

    #[test]
    fn newness_field_reads_frames() {
        let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        zero_param(&mut m, "newness.grid");
        assert_eq!(m.newness_feature(&[0.7, 0.2], 1.3).unwrap(), vec![0.0; 3]);
        randomize(&mut m, 3, 1.0);
        let storage = m.params.get(m.newness_grid.id).data().to_vec();
        let w = m.newness_grid.grid.window(2).unwrap();
        let expected = m.newness_grid.grid.sample_spatial(&storage, &[0.7, 0.2], &w);
        assert_eq!(m.newness_feature(&[0.7, 0.2], 2.0).unwrap(), expected);
    }

    fn pin(m: &mut SceneModel, logits: [f64; 3]) {
        let dec = m.decomposition.clone();
        for (l, (w, _)) in dec.layers.iter().enumerate() {
            if l + 1 == dec.layers.len() {
                m.params.get_mut(*w).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bias = last_bias(m, &dec);
        set_param(m, &bias, &logits);
    }

    #[test]
    fn one_hot_blends() {
        let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        randomize(&mut m, 5, 0.5);
        let p = [0.35, 0.8];
        pin(&mut m, [0.0, -1e4, -1e4]);
        assert_eq!(m.decompose(&p, 1.0).unwrap().p_static, 1.0);
        let v = m.blended_feature(&p, 1.0, 0.0).unwrap();
        assert_eq!(v, m.stationary_feature(&p, 1.0).unwrap());
        pin(&mut m, [-1e4, -1e4, 0.0]);
        let v = m.blended_feature(&p, 1.0, 0.0).unwrap();
        assert_eq!(v, m.newness_feature(&p, 1.0).unwrap());
    }

    #[test]
    fn skip_threshold_drops_small_branch() {
        let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        randomize(&mut m, 6, 0.5);
        // Logits chosen so P_new = 0.0005.
        let pn = 0.0005_f64;
        let rest = (1.0 - pn) / 2.0;
        pin(&mut m, [rest.ln(), rest.ln(), pn.ln()]);
        let p = [0.6, 0.1];
        let probs = m.decompose(&p, 2.0).unwrap();
        assert!((probs.p_new - pn).abs() < 1e-12);
        let full = m.blended_feature(&p, 2.0, 0.0).unwrap();
        let skipped = m.blended_feature(&p, 2.0, 0.001).unwrap();
        let vn = m.newness_feature(&p, 2.0).unwrap();
        for j in 0..3 {
            assert!((full[j] - skipped[j] - probs.p_new * vn[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_decoders() {
        let mut vol = SceneModel::new(tiny_config(Mode::Volumetric)).unwrap();
        for l in 0..vol.radiance.layers.len() {
            zero_param(&mut vol, &format!("radiance.{l}.weight"));
        }
        let s = vol.decode_radiance(&[0.3, -0.2, 0.9], [0.0, 0.6, 0.8]).unwrap();
        assert!((s.sigma - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(s.rgb, [0.5; 3]);
        assert!(matches!(
            vol.decode_radiance(&[0.0; 3], [0.0, 0.0, 2.0]),
            Err(FieldError::NonUnitDirection(_))
        ));
        assert!(matches!(vol.direct_color(&[0.0; 3]), Err(FieldError::WrongMode { .. })));

        let mut flat = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        for l in 0..flat.radiance.layers.len() {
            zero_param(&mut flat, &format!("radiance.{l}.weight"));
        }
        assert_eq!(flat.direct_color(&[1.0, 2.0, 3.0]).unwrap(), [0.5; 3]);
    }

    #[test]
    fn domain_checks() {
        let m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        assert!(matches!(m.decompose(&[1.2, 0.0], 0.0), Err(FieldError::Domain(_))));
        assert!(m.decompose(&[0.2, 0.0], 3.5).is_err());
        assert!(m.decompose(&[0.2, 0.0, 0.1], 0.0).is_err());
    }

    #[test]
    fn probabilities_on_simplex_and_outputs_in_range() {
        for seed in 0..20 {
            let mut m = SceneModel::new(tiny_config(Mode::Volumetric)).unwrap();
            randomize(&mut m, seed, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let n = 16;
            let pts: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let mut dirs = Vec::new();
            for _ in 0..n {
                let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                dirs.extend(v.iter().map(|x| x / l));
            }
            let batch = QueryBatch { points: Tensor::matrix(n, 3, pts), times, dirs: Some(Tensor::matrix(n, 3, dirs)) };
            let mut g = Graph::new(&m.params);
            let out = m.eval(&mut g, &batch, 0.0).unwrap();
            for row in g.value(out.probs).data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(g.value(out.sigma.unwrap()).data().iter().all(|&s| s >= 0.0));
            assert!(g.value(out.rgb).data().iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }

    #[test]
    fn skip_error_bound_on_random_models() {
        for seed in 0..10 {
            let mut m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
            randomize(&mut m, seed, 3.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                let t = rng.gen_range(0.0..3.0);
                let tau = 0.05;
                let probs = m.decompose(&p, t).unwrap().as_array();
                let full = m.blended_feature(&p, t, 0.0).unwrap();
                let skip = m.blended_feature(&p, t, tau).unwrap();
                let pts = Tensor::matrix(1, 2, p.to_vec());
                let mut g = Graph::new(&m.params);
                let pv = g.constant(pts.clone());
                let vs = m.stationary_features(&mut g, pv, &[t]).unwrap();
                let vd = m.deformed_features(&mut g, &pts, &[t]).unwrap();
                let vn = m.newness_features(&mut g, pv, &[t]).unwrap();
                let inf = |v: Var| g.value(v).data().iter().fold(0.0_f64, |a, b| a.max(b.abs()));
                let norms = [inf(vs), inf(vd), inf(vn)];
                let bound: f64 = (0..3).filter(|&b| probs[b] < tau).map(|b| probs[b] * norms[b]).sum();
                let diff = full.iter().zip(&skip).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
                assert!(diff <= bound + 1e-12, "{diff} > {bound}");
                assert!(bound <= 2.0 * tau * norms.iter().cloned().fold(0.0, f64::max) + 1e-12);
            }
        }
    }

    fn chain_loss(m: &SceneModel, g: &mut Graph<'_>, batch: &QueryBatch) -> std::result::Result<Var, GradError> {
        let out = m.eval(g, batch, 0.0).map_err(|e| match e {
            FieldError::Grad(e) => e,
            other => panic!("{other}"),
        })?;
        let mut terms = vec![out.rgb];
        if let Some(s) = out.sigma {
            terms.push(s);
        }
        let mut total = None;
        for t in terms {
            let sq = g.mul(t, t)?;
            let s = g.sum(sq);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let pn = g.columns(out.probs, 2, 3)?;
        let reg = g.mean(pn)?;
        g.add(total.unwrap(), reg)
    }

    #[test]
    fn full_chain_gradient_check() {
        for mode in [Mode::Direct2d, Mode::Volumetric] {
            let mut m = SceneModel::new(tiny_config(mode)).unwrap();
            randomize(&mut m, 21, 0.7);
            let d = mode.spatial_dims();
            let n = 5;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let pts: Vec<f64> = (0..n * d).map(|_| rng.gen_range(0.1..0.9)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let dirs = (mode == Mode::Volumetric).then(|| Tensor::matrix(n, 3, [0.0, 0.0, 1.0].repeat(n)));
            let batch = QueryBatch { points: Tensor::matrix(n, d, pts), times, dirs };
            let model = m.clone();
            let err = finite_diff_check(&mut m.params, 1e-5, Probe::Random { count: 300, seed: 1 }, |g| {
                chain_loss(&model, g, &batch)
            })
            .unwrap();
            assert!(err < 1e-5, "{mode:?}: {err}");
        }
    }

    #[test]
    fn with_params_rejects_mismatched_store() {
        let m = SceneModel::new(tiny_config(Mode::Direct2d)).unwrap();
        let again = SceneModel::with_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(again, m);
        let mut other = tiny_config(Mode::Direct2d);
        other.features = 2;
        assert!(SceneModel::with_params(other, m.params.clone()).is_err());
    }
}
