//! Losses, Adam, batch sampling and the clip-wise fitting loop.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fields::{FieldError, Mode, ModelConfig, QueryBatch, SceneModel};
use crate::grad::{GradError, Graph, ParamId, Tensor, Var};
use crate::image::Image;
use crate::render::{build_ray_batch, generate_ray, lattice_point, render_rays, Camera, RayBatch, RenderConfig, RenderError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{0}")]
    Invalid(String),
    #[error("config key {key:?}: {msg}")]
    Config { key: String, msg: String },
    #[error("non-finite loss at step {step}: rec={rec} reg={reg} total={total}, max |grad| = {max_grad}")]
    NonFinite { step: usize, rec: f64, reg: f64, total: f64, max_grad: f64 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

/// Geometric interpolation from `start` to `end`, constant afterward.
pub fn alpha_at(schedule: &AlphaSchedule, step: usize) -> f64 {
    if step >= schedule.decay_steps || schedule.start == schedule.end {
        return schedule.end;
    }
    let f = step as f64 / schedule.decay_steps as f64;
    if schedule.end == 0.0 {
        // Geometric decay toward zero is undefined; fall back to linear.
        return schedule.start * (1.0 - f);
    }
    schedule.start * (schedule.end / schedule.start).powf(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_end: f64,
    /// Multiplier on `lr` for the feature grids.
    pub grid_lr_scale: f64,
    /// Multiplier on `lr` for the deformation MLP.
    pub deform_lr_scale: f64,
    pub lambda: f64,
    /// Fraction of `steps` over which the parsimony weight ramps linearly
    /// from 0 up to `lambda`.
    pub lambda_warmup: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Defaults to 30% of `steps` when unset.
    pub alpha_decay_steps: Option<usize>,
    pub tau: f64,
    pub seed: u64,
    pub samples_per_ray: usize,
    pub clip_length: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            steps: 2000,
            lr: 5e-3,
            lr_end: 5e-4,
            grid_lr_scale: 4.0,
            deform_lr_scale: 0.1,
            lambda: 0.1,
            lambda_warmup: 0.2,
            alpha_start: 1.0,
            alpha_end: 0.01,
            alpha_decay_steps: None,
            tau: 0.001,
            seed: 0,
            samples_per_ray: 32,
            clip_length: 90,
            near: 0.0,
            far: 4.0,
            background: [1.0; 3],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| TrainError::Config { key: key.into(), msg: format!("{value:?}: {e}") })
}

pub(crate) fn parse_rgb(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 3 {
        return Err(TrainError::Config { key: key.into(), msg: format!("expected r,g,b, got {value:?}") });
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

impl TrainConfig {
    pub const KEYS: [&'static str; 18] = [
        "batch_size",
        "steps",
        "lr",
        "lr_end",
        "grid_lr_scale",
        "deform_lr_scale",
        "lambda",
        "lambda_warmup",
        "alpha_start",
        "alpha_end",
        "alpha_decay_steps",
        "tau",
        "seed",
        "samples_per_ray",
        "clip_length",
        "near",
        "far",
        "background",
    ];

    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "grid_lr_scale" => self.grid_lr_scale = parse(key, value)?,
            "deform_lr_scale" => self.deform_lr_scale = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_warmup" => self.lambda_warmup = parse(key, value)?,
            "alpha_start" => self.alpha_start = parse(key, value)?,
            "alpha_end" => self.alpha_end = parse(key, value)?,
            "alpha_decay_steps" => self.alpha_decay_steps = Some(parse(key, value)?),
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "samples_per_ray" => self.samples_per_ray = parse(key, value)?,
            "clip_length" => self.clip_length = parse(key, value)?,
            "near" => self.near = parse(key, value)?,
            "far" => self.far = parse(key, value)?,
            "background" => self.background = parse_rgb(key, value)?,
            _ => return Err(TrainError::Config { key: key.into(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(TrainError::Config { key: key.into(), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup) {
            return bad("lambda_warmup", "must be in [0, 1]");
        }
        if !(self.alpha_end >= 0.0) {
            return bad("alpha_end", "must be >= 0");
        }
        if !(self.alpha_start >= self.alpha_end) {
            return bad("alpha_start", "must be >= alpha_end");
        }
        if self.clip_length == 0 {
            return bad("clip_length", "must be >= 1");
        }
        if !(self.lr > 0.0) || !(self.lr_end > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if !(self.grid_lr_scale > 0.0) {
            return bad("grid_lr_scale", "must be positive");
        }
        if !(self.deform_lr_scale > 0.0) {
            return bad("deform_lr_scale", "must be positive");
        }
        if !(self.tau >= 0.0) {
            return bad("tau", "must be >= 0");
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray", "must be >= 2");
        }
        if !(self.near < self.far) {
            return bad("near", "must be below far");
        }
        Ok(())
    }

    /// Parsimony weight in effect at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        let ramp = self.lambda_warmup * self.steps as f64;
        if ramp <= 0.0 {
            self.lambda
        } else {
            self.lambda * (step as f64 / ramp).min(1.0)
        }
    }

    pub fn alpha_schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            start: self.alpha_start,
            end: self.alpha_end,
            decay_steps: self.alpha_decay_steps.unwrap_or((self.steps as f64 * 0.3).round() as usize),
        }
    }

    /// Exponential decay from `lr` to `lr_end` across `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let f = if self.steps > 1 { (step as f64 / (self.steps - 1) as f64).min(1.0) } else { 0.0 };
        self.lr * (self.lr_end / self.lr).powf(f)
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            samples: self.samples_per_ray,
            tau: self.tau,
            background: self.background,
            near: self.near,
            far: self.far,
            seed: self.seed,
            ..Default::default()
        }
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let s = self.alpha_schedule();
        let b = self.background;
        format!(
            "batch_size = {}\nsteps = {}\nlr = {}\nlr_end = {}\ngrid_lr_scale = {}\ndeform_lr_scale = {}\nlambda = {}\nlambda_warmup = {}\nalpha_start = {}\nalpha_end = {}\nalpha_decay_steps = {}\ntau = {}\nseed = {}\nsamples_per_ray = {}\nclip_length = {}\nnear = {}\nfar = {}\nbackground = {},{},{}\n",
            self.batch_size,
            self.steps,
            self.lr,
            self.lr_end,
            self.grid_lr_scale,
            self.deform_lr_scale,
            self.lambda,
            self.lambda_warmup,
            self.alpha_start,
            self.alpha_end,
            s.decay_steps,
            self.tau,
            self.seed,
            self.samples_per_ray,
            self.clip_length,
            self.near,
            self.far,
            b[0],
            b[1],
            b[2]
        )
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &crate::grad::ParamStore) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    /// Applies one Adam update; `lr_of` gives the step size per parameter.
    pub fn update(&mut self, params: &mut crate::grad::ParamStore, grads: &[(ParamId, &Tensor)], lr_of: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for &(id, g) in grads {
            let lr = lr_of(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn loss_err(op: &'static str, msg: String) -> TrainError {
    GradError::Invalid { op, msg }.into()
}

/// Mean over rays of the squared color error. Colors are interleaved RGB.
pub fn reconstruction_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 {
        return Err(loss_err("reconstruction_loss", format!("{} vs {} color values", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(loss_err("reconstruction_loss", "empty batch".into()));
    }
    let sq: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (pred.len() / 3) as f64)
}

/// `alpha * mean(P_deform) + mean(P_new)` over interleaved `(s, d, n)` rows.
pub fn parsimony_loss(probs: &[f64], alpha: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() % 3 != 0 {
        return Err(loss_err("parsimony_loss", format!("need a nonempty n x 3 batch, got {} values", probs.len())));
    }
    let n = (probs.len() / 3) as f64;
    let (d, nw) = probs.chunks(3).fold((0.0, 0.0), |(d, nw), p| (d + p[1], nw + p[2]));
    Ok(alpha * (d / n) + nw / n)
}

pub fn total_loss(rec: f64, reg: f64, lambda: f64) -> f64 {
    rec + lambda * reg
}

fn graph_losses(g: &mut Graph<'_>, pred: Var, gt: Var, probs: Var, alpha: f64, lambda: f64) -> Result<(Var, Var, Var)> {
    let rays = g.value(pred).rows();
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    let rec = g.scale(s, 1.0 / rays as f64);
    let pd = g.columns(probs, 1, 2)?;
    let pn = g.columns(probs, 2, 3)?;
    let md = g.mean(pd)?;
    let mn = g.mean(pn)?;
    let md = g.scale(md, alpha);
    let reg = g.add(md, mn)?;
    let weighted = g.scale(reg, lambda);
    let total = g.add(rec, weighted)?;
    Ok((rec, reg, total))
}

/// One training image with its model time and, for volumetric scenes, its
/// camera.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub image: Image,
    pub frame: usize,
    pub camera: Option<Camera>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub mode: Mode,
    pub frames: usize,
    pub views: Vec<TrainView>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.frames == 0 {
            return Err(TrainError::Invalid("dataset has no views".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.frame >= self.frames {
                return Err(TrainError::Invalid(format!("view {i} has frame {} >= {}", v.frame, self.frames)));
            }
            if v.image.pixels() == 0 {
                return Err(TrainError::Invalid(format!("view {i} is empty")));
            }
            match (self.mode, &v.camera) {
                (Mode::Volumetric, None) => return Err(TrainError::Invalid(format!("view {i} lacks a camera"))),
                (Mode::Volumetric, Some(c)) if (c.width, c.height) != (v.image.width, v.image.height) => {
                    return Err(TrainError::Invalid(format!("view {i}: camera and image sizes differ")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::with_capacity(self.views.len() + 1);
        out.push(0);
        for v in &self.views {
            acc += v.image.pixels();
            out.push(acc);
        }
        out
    }

    /// Views of frames `[start, end)`, re-based to start at frame 0.
    pub fn clip(&self, start: usize, end: usize) -> Dataset {
        let views = self
            .views
            .iter()
            .filter(|v| (start..end).contains(&v.frame))
            .map(|v| TrainView { frame: v.frame - start, ..v.clone() })
            .collect();
        Dataset { mode: self.mode, frames: end - start, views }
    }
}

#[derive(Clone, Debug)]
pub enum BatchInput {
    Pixels(QueryBatch),
    Rays(RayBatch),
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(view, pixel)` pairs in draw order.
    pub picks: Vec<(usize, usize)>,
    pub colors: Tensor,
    pub input: BatchInput,
}

/// Draws `size` (view, pixel) pairs uniformly over all training pixels.
pub fn sample_batch(dataset: &Dataset, rng: &mut ChaCha8Rng, size: usize, config: &TrainConfig) -> Result<Batch> {
    dataset.validate()?;
    let offsets = dataset.offsets();
    let total = *offsets.last().unwrap();
    let mut picks = Vec::with_capacity(size);
    let mut colors = Vec::with_capacity(size * 3);
    for _ in 0..size {
        let k = rng.gen_range(0..total);
        let view = offsets.partition_point(|&o| o <= k) - 1;
        let pixel = k - offsets[view];
        let img = &dataset.views[view].image;
        colors.extend(img.get(pixel % img.width, pixel / img.width));
        picks.push((view, pixel));
    }
    let times: Vec<f64> = picks.iter().map(|&(v, _)| dataset.views[v].frame as f64).collect();
    let input = match dataset.mode {
        Mode::Direct2d => {
            let mut pts = Vec::with_capacity(size * 2);
            for &(v, p) in &picks {
                let img = &dataset.views[v].image;
                pts.extend(lattice_point(p % img.width, p / img.width, img.width, img.height));
            }
            BatchInput::Pixels(QueryBatch { points: Tensor::matrix(size, 2, pts), times, dirs: None })
        }
        Mode::Volumetric => {
            let rays = picks
                .iter()
                .map(|&(v, p)| {
                    let cam = dataset.views[v].camera.as_ref().expect("validated");
                    generate_ray(cam, ((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5), config.near, config.far)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let seed = rng.gen::<u64>();
            let batch = build_ray_batch(&rays, &times, config.samples_per_ray, true, |r| {
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64))
            })?;
            BatchInput::Rays(batch)
        }
    };
    Ok(Batch { picks, colors: Tensor::matrix(size, 3, colors), input })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub step: usize,
    pub rec: f64,
    pub reg: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Forward pass, losses, backward pass and one Adam update. All branches are
/// evaluated (no skip threshold) so every field receives gradient.
pub fn train_step(model: &mut SceneModel, batch: &Batch, adam: &mut AdamState, config: &TrainConfig, step: usize) -> Result<LossParts> {
    let alpha = alpha_at(&config.alpha_schedule(), step);
    let (parts, grads) = {
        let mut g = Graph::new(&model.params);
        let (pred, probs) = match &batch.input {
            BatchInput::Pixels(q) => {
                let out = model.eval(&mut g, q, 0.0)?;
                (out.rgb, out.probs)
            }
            BatchInput::Rays(rb) => {
                let (color, out, _) = render_rays(&mut g, model, rb, 0.0, config.background)?;
                // Rays that miss the unit cube have zero-length segments; their
                // placeholder points do not enter the regularizer.
                let valid: Vec<usize> = (0..rb.deltas.len()).filter(|&i| rb.deltas[i] > 0.0).collect();
                let probs = if valid.len() == rb.deltas.len() || valid.is_empty() {
                    out.probs
                } else {
                    g.gather_rows(out.probs, &valid)?
                };
                (color, probs)
            }
        };
        let gt = g.constant(batch.colors.clone());
        let (rec, reg, total) = graph_losses(&mut g, pred, gt, probs, alpha, config.lambda_at(step))?;
        let parts = LossParts { step, rec: g.value(rec).item(), reg: g.value(reg).item(), total: g.value(total).item(), alpha };
        let grads = g.backward(total);
        (parts, grads)
    };
    if !parts.total.is_finite() {
        let max_grad = grads.as_ref().map(|g| g.max_abs()).unwrap_or(f64::NAN);
        return Err(TrainError::NonFinite { step, rec: parts.rec, reg: parts.reg, total: parts.total, max_grad });
    }
    let grads = grads?;
    let grid_ids = model.grid_ids();
    let lr = config.lr_at(step);
    let present: Vec<(ParamId, &Tensor)> = model.params.ids().filter_map(|id| grads.param(id).map(|t| (id, t))).collect();
    let deform_ids: Vec<ParamId> = model.deformation.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
    adam.update(&mut model.params, &present, |id| {
        if grid_ids.contains(&id) {
            lr * config.grid_lr_scale
        } else if deform_ids.contains(&id) {
            lr * config.deform_lr_scale
        } else {
            lr
        }
    });
    Ok(parts)
}

/// One trained clip: frames `[start, start + model.frames())` of the input.
#[derive(Clone, Debug)]
pub struct ClipFit {
    pub start: usize,
    pub model: SceneModel,
    pub losses: Vec<LossParts>,
}

/// Trains a single model on the whole dataset.
pub fn train_model(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<(SceneModel, Vec<LossParts>)> {
    config.validate()?;
    dataset.validate()?;
    let mut mc = model_config.clone();
    mc.frames = dataset.frames;
    mc.mode = dataset.mode;
    let mut model = SceneModel::new(mc)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(dataset, &mut rng, config.batch_size, config)?;
        losses.push(train_step(&mut model, &batch, &mut adam, config, step)?);
    }
    Ok((model, losses))
}

/// Splits the sequence into clips of `clip_length` frames and fits one
/// independent model per clip. `on_clip` sees each clip as soon as it is done,
/// so completed clips survive a later failure.
pub fn fit_with(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig, mut on_clip: impl FnMut(&ClipFit)) -> Result<Vec<ClipFit>> {
    config.validate()?;
    dataset.validate()?;
    let mut out = Vec::new();
    for start in (0..dataset.frames).step_by(config.clip_length) {
        let end = (start + config.clip_length).min(dataset.frames);
        let clip = dataset.clip(start, end);
        if clip.views.is_empty() {
            return Err(TrainError::Invalid(format!("clip {start}..{end} has no views")));
        }
        let (model, losses) = train_model(&clip, model_config, config)?;
        let fit = ClipFit { start, model, losses };
        on_clip(&fit);
        out.push(fit);
    }
    Ok(out)
}

pub fn fit(dataset: &Dataset, model_config: &ModelConfig, config: &TrainConfig) -> Result<Vec<ClipFit>> {
    fit_with(dataset, model_config, config, |_| {})
}

/// Loss curve as CSV with header `step,rec,reg,total,alpha`.
pub fn loss_csv(losses: &[LossParts]) -> String {
    let mut s = String::from("step,rec,reg,total,alpha\n");
    for l in losses {
        s.push_str(&format!("{},{},{},{},{}\n", l.step, l.rec, l.reg, l.total, l.alpha));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_check, ParamStore, Probe};

    #[test]
    fn loss_examples() {
        assert_eq!(reconstruction_loss(&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&[1.0, 0.0, 0.0, 0.5, 0.5, 0.5], &[0.0, 0.0, 0.0, 0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!(reconstruction_loss(&[0.0; 3], &[0.0; 6]).is_err());

        assert_eq!(parsimony_loss(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 0.3).unwrap(), 0.0);
        assert!((parsimony_loss(&[0.0, 1.0, 0.0], 0.01).unwrap() - 0.01).abs() < 1e-12);
        assert!((parsimony_loss(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 0.01).unwrap() - 0.505).abs() < 1e-12);
        assert!(parsimony_loss(&[], 0.01).is_err());

        assert_eq!(total_loss(1.0, 0.0, 7.0), 1.0);
        assert!((total_loss(0.5, 0.505, 0.1) - 0.5505).abs() < 1e-12);
        assert_eq!(total_loss(0.25, 3.0, 0.0), 0.25);
    }

    #[test]
    fn parsimony_is_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let probs: Vec<f64> = (0..20)
                .flat_map(|_| {
                    let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
                    let s = a + b + c;
                    [a / s, b / s, c / s]
                })
                .collect();
            let (lo, hi) = (rng.gen_range(0.0..1.0), rng.gen_range(1.0..2.0));
            assert!(parsimony_loss(&probs, hi).unwrap() >= parsimony_loss(&probs, lo).unwrap());
        }
    }

    #[test]
    fn alpha_schedule_examples() {
        let s = AlphaSchedule { start: 1.0, end: 0.01, decay_steps: 100 };
        assert_eq!(alpha_at(&s, 0), 1.0);
        assert_eq!(alpha_at(&s, 100), 0.01);
        assert_eq!(alpha_at(&s, 5000), 0.01);
        assert!((alpha_at(&s, 50) - 0.1).abs() < 1e-12);
        for i in 0..100 {
            assert!(alpha_at(&s, i + 1) <= alpha_at(&s, i));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.5, -2.0, 3.0]));
        let mut adam = AdamState::new(&store);
        let g = Tensor::vector(vec![1.0; 3]);
        adam.update(&mut store, &[(id, &g)], |_| 0.01);
        for (a, b) in store.get(id).data().iter().zip([0.49, -2.01, 2.99]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn graph_losses_match_scalar_losses() {
        let pred = vec![0.1, 0.9, 0.3, 0.5, 0.5, 0.2];
        let gt = vec![0.0, 1.0, 0.0, 0.7, 0.1, 0.2];
        let probs = vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.9, 0.05, 0.05];
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p = g.constant(Tensor::matrix(2, 3, pred.clone()));
        let t = g.constant(Tensor::matrix(2, 3, gt.clone()));
        let pr = g.constant(Tensor::matrix(3, 3, probs.clone()));
        let (rec, reg, total) = graph_losses(&mut g, p, t, pr, 0.37, 0.1).unwrap();
        let r = reconstruction_loss(&pred, &gt).unwrap();
        let q = parsimony_loss(&probs, 0.37).unwrap();
        assert!((g.value(rec).item() - r).abs() < 1e-12);
        assert!((g.value(reg).item() - q).abs() < 1e-12);
        assert!((g.value(total).item() - total_loss(r, q, 0.1)).abs() < 1e-12);
    }

    fn tiny_toy() -> (Dataset, ModelConfig) {
        let mut views = Vec::new();
        for f in 0..3 {
            let mut img = Image::new(6, 5);
            for y in 0..5 {
                for x in 0..6 {
                    let v = ((x + f) % 6) as f64 / 5.0;
                    img.set(x, y, [v, 0.5, 1.0 - v * y as f64 / 4.0]);
                }
            }
            views.push(TrainView { image: img, frame: f, camera: None });
        }
        let mut mc = ModelConfig::toy2d(6, 5, 3);
        mc.decomp_width = 8;
        mc.static_width = 8;
        mc.deform_width = 8;
        mc.radiance_width = 8;
        mc.pos_levels = 2;
        (Dataset { mode: Mode::Direct2d, frames: 3, views }, mc)
    }

    #[test]
    fn batch_sampling_is_seeded_and_uniform() {
        let (ds, _) = tiny_toy();
        let cfg = TrainConfig::default();
        let a = sample_batch(&ds, &mut ChaCha8Rng::seed_from_u64(5), 64, &cfg).unwrap();
        let b = sample_batch(&ds, &mut ChaCha8Rng::seed_from_u64(5), 64, &cfg).unwrap();
        assert_eq!(a.picks, b.picks);

        let single = Dataset {
            mode: Mode::Direct2d,
            frames: 1,
            views: vec![TrainView { image: Image::filled(1, 1, [0.1, 0.2, 0.3]), frame: 0, camera: None }],
        };
        let one = sample_batch(&single, &mut ChaCha8Rng::seed_from_u64(0), 1, &cfg).unwrap();
        assert_eq!((one.picks[0], one.colors.data()), ((0, 0), &[0.1, 0.2, 0.3][..]));

        let ten = Dataset {
            mode: Mode::Direct2d,
            frames: 10,
            views: (0..10).map(|f| TrainView { image: Image::new(4, 4), frame: f, camera: None }).collect(),
        };
        let big = sample_batch(&ten, &mut ChaCha8Rng::seed_from_u64(11), 100_000, &cfg).unwrap();
        let mut counts = [0usize; 10];
        for (v, _) in big.picks {
            counts[v] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
        }
    }

    #[test]
    fn zero_lambda_removes_parsimony_gradient() {
        let (ds, mc) = tiny_toy();
        let model = SceneModel::new(mc).unwrap();
        let cfg = TrainConfig::default();
        let batch = sample_batch(&ds, &mut ChaCha8Rng::seed_from_u64(2), 16, &cfg).unwrap();
        let BatchInput::Pixels(q) = &batch.input else { unreachable!() };
        let grads = |lambda: f64, with_reg: bool| {
            let mut g = Graph::new(&model.params);
            let out = model.eval(&mut g, q, 0.0).unwrap();
            let gt = g.constant(batch.colors.clone());
            let (rec, _, total) = graph_losses(&mut g, out.rgb, gt, out.probs, 0.5, lambda).unwrap();
            let gr = g.backward(if with_reg { total } else { rec }).unwrap();
            model.params.ids().map(|id| gr.param_or_zeros(id, &model.params).into_data()).collect::<Vec<_>>()
        };
        assert_eq!(grads(0.0, true), grads(0.0, false));
        assert_ne!(grads(0.1, true), grads(0.1, false));
    }

    #[test]
    fn total_loss_gradient_check() {
        let (ds, mc) = tiny_toy();
        let mut model = SceneModel::new(mc).unwrap();
        // Move every parameter off the ReLU kinks of the fresh initialization.
        let mut jitter = ChaCha8Rng::seed_from_u64(17);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += jitter.gen_range(-0.3..0.3));
        }
        let cfg = TrainConfig::default();
        let mut batch = sample_batch(&ds, &mut ChaCha8Rng::seed_from_u64(3), 12, &cfg).unwrap();
        let BatchInput::Pixels(mut q) = batch.input.clone() else { unreachable!() };
        // Keep queries off the clamp kinks at the domain border.
        q.points.data_mut().iter_mut().for_each(|v| *v = 0.1 + 0.8 * *v);
        q.times.iter_mut().for_each(|t| *t = (*t * 0.9 + 0.05).min(1.9));
        batch.input = BatchInput::Pixels(q.clone());
        let m2 = model.clone();
        let err = finite_diff_check(&mut model.params, 1e-6, Probe::Random { count: 32, seed: 4 }, |g| {
            let out = m2.eval(g, &q, 0.0).map_err(|e| match e {
                FieldError::Grad(e) => e,
                other => panic!("{other}"),
            })?;
            let gt = g.constant(batch.colors.clone());
            let (_, _, total) = graph_losses(g, out.rgb, gt, out.probs, 0.2, 0.1).map_err(|e| match e {
                TrainError::Grad(e) => e,
                other => panic!("{other}"),
            })?;
            Ok(total)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn fit_is_deterministic_and_splits_clips() {
        let (ds, mc) = tiny_toy();
        let cfg = TrainConfig { steps: 6, batch_size: 8, clip_length: 2, ..Default::default() };
        let a = fit(&ds, &mc, &cfg).unwrap();
        let b = fit(&ds, &mc, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].start, a[0].model.frames(), a[1].start, a[1].model.frames()), (0, 2, 2, 1));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.model.param_hash(), y.model.param_hash());
            assert_eq!(x.losses, y.losses);
        }
        let csv = loss_csv(&a[0].losses);
        assert!(csv.starts_with("step,rec,reg,total,alpha\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn config_text_round_trips_and_rejects_unknown_keys() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(TrainError::Config { key, .. }) if key == "nope"));
        assert!(matches!(c.set("lambda", "x"), Err(TrainError::Config { key, .. }) if key == "lambda"));
        c.set("background", "0.5,0.25,1").unwrap();
        c.set("steps", "100").unwrap();
        assert_eq!(c.alpha_schedule().decay_steps, 30);
        let mut d = TrainConfig::default();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            d.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(d.alpha_schedule(), c.alpha_schedule());
        assert_eq!(d.to_text(), c.to_text());
        assert_eq!(TrainConfig::KEYS.len(), c.to_text().lines().count());
    }

    #[test]
    fn invalid_configs_rejected() {
        for (k, v) in [("lambda", "-1"), ("clip_length", "0"), ("alpha_start", "0.001")] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(TrainError::Config { key, .. }) if key == k));
        }
    }
}
