//! Synthetic sequences with known ground truth, image metrics, and the
//! on-disk dataset layout.
//!
//! A dataset directory holds `manifest.txt` (`key = value` lines), one RGB
//! PNG per view under `frames/` and one palette mask PNG per view under
//! `masks/` (0 static, 1 deforming, 2 new). Views are named `f{frame:03}.png`
//! in 2-D and `c{camera:02}_f{frame:03}.png` for camera captures.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fields::Mode;
use crate::image::{read_mask_png, write_mask_png, Image, ImageError};
use crate::render::{generate_ray, Camera, Ray, RenderError};
use crate::train::{Dataset, TrainView};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest key {key:?}: {msg}")]
    Manifest { key: String, msg: String },
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

pub const STATIC: u8 = 0;
pub const DEFORMING: u8 = 1;
pub const NEW: u8 = 2;

const FONT: &[(char, [&str; 5])] = &[
    ('0', ["###", "#.#", "#.#", "#.#", "###"]),
    ('1', [".#.", "##.", ".#.", ".#.", "###"]),
    ('2', ["###", "..#", "###", "#..", "###"]),
    ('3', ["###", "..#", ".##", "..#", "###"]),
    ('4', ["#.#", "#.#", "###", "..#", "..#"]),
    ('5', ["###", "#..", "###", "..#", "###"]),
    ('6', ["###", "#..", "###", "#.#", "###"]),
    ('7', ["###", "..#", ".#.", ".#.", ".#."]),
    ('8', ["###", "#.#", "###", "#.#", "###"]),
    ('9', ["###", "#.#", "###", "..#", "###"]),
    ('E', ["###", "#..", "##.", "#..", "###"]),
    ('F', ["###", "#..", "##.", "#..", "#.."]),
    ('N', ["#.#", "###", "###", "#.#", "#.#"]),
    ('P', ["###", "#.#", "###", "#..", "#.."]),
    ('R', ["##.", "#.#", "##.", "#.#", "#.#"]),
    ('S', [".##", "#..", ".#.", "..#", "##."]),
    ('V', ["#.#", "#.#", "#.#", "#.#", ".#."]),
];

/// Binary block raster of `text` in a 3x5 font, one blank column between
/// glyphs, each font cell scaled to `scale x scale` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Glyph {
    pub fn text(text: &str, scale: usize) -> Result<Self> {
        if text.is_empty() || scale == 0 {
            return Err(SceneError::Invalid("glyph text must be nonempty with scale >= 1".into()));
        }
        let cols = text.chars().count() * 4 - 1;
        let (width, height) = (cols * scale, 5 * scale);
        let mut cells = vec![false; width * height];
        for (i, ch) in text.chars().enumerate() {
            let rows = FONT
                .iter()
                .find(|(c, _)| *c == ch)
                .map(|(_, r)| r)
                .ok_or_else(|| SceneError::Invalid(format!("no glyph for {ch:?}")))?;
            for (ry, row) in rows.iter().enumerate() {
                for (rx, b) in row.bytes().enumerate() {
                    if b != b'#' {
                        continue;
                    }
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let x = (i * 4 + rx) * scale + dx;
                            cells[(ry * scale + dy) * width + x] = true;
                        }
                    }
                }
            }
        }
        Ok(Self { width, height, cells })
    }

    pub fn covers(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.cells[y as usize * self.width + x as usize]
    }
}

/// Linear 0-to-1 opacity ramp between two frames; zero before, one after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ramp {
    pub start: usize,
    pub end: usize,
}

impl Ramp {
    pub fn at(&self, t: f64) -> f64 {
        if t <= self.start as f64 {
            0.0
        } else if t >= self.end as f64 {
            1.0
        } else {
            (t - self.start as f64) / (self.end - self.start) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub moving_text: String,
    pub moving_scale: usize,
    pub moving_color: [f64; 3],
    /// Top-left corner at frame 0.
    pub moving_start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub appearing_text: String,
    pub appearing_scale: usize,
    pub appearing_color: [f64; 3],
    pub appearing_pos: [i64; 2],
    /// `None` keeps the appearing glyph invisible.
    pub ramp: Option<Ramp>,
    /// Number of random flat rectangles over the background gradient.
    pub rectangles: usize,
    pub holdout: Vec<usize>,
}

impl Default for ToySpec {
    fn default() -> Self {
        let frames = 30;
        Self {
            width: 96,
            height: 96,
            frames,
            moving_text: "2022".into(),
            moving_scale: 2,
            moving_color: [0.98, 0.86, 0.12],
            moving_start: [4.0, 10.0],
            velocity: [2.0, 0.0],
            appearing_text: "VR".into(),
            appearing_scale: 3,
            appearing_color: [0.92, 0.12, 0.18],
            appearing_pos: [38, 58],
            ramp: Some(Ramp { start: 6, end: 24 }),
            rectangles: 4,
            holdout: (0..frames).filter(|t| t % 3 == 1).collect(),
        }
    }
}

impl ToySpec {
    fn moving_origin(&self, t: usize) -> (i64, i64) {
        (
            (self.moving_start[0] + self.velocity[0] * t as f64).round() as i64,
            (self.moving_start[1] + self.velocity[1] * t as f64).round() as i64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.frames == 0 {
            return Err(SceneError::Invalid("image must be at least 2x2 with >= 1 frame".into()));
        }
        let mg = Glyph::text(&self.moving_text, self.moving_scale)?;
        let ag = Glyph::text(&self.appearing_text, self.appearing_scale)?;
        let inside = |x: i64, y: i64, g: &Glyph| {
            x >= 0 && y >= 0 && x as usize + g.width <= self.width && y as usize + g.height <= self.height
        };
        for t in 0..self.frames {
            let (x, y) = self.moving_origin(t);
            if !inside(x, y, &mg) {
                return Err(SceneError::Invalid(format!("trajectory leaves the frame at t={t} (origin {x},{y})")));
            }
        }
        if !inside(self.appearing_pos[0], self.appearing_pos[1], &ag) {
            return Err(SceneError::Invalid("appearing glyph outside the frame".into()));
        }
        if let Some(r) = self.ramp {
            if r.start > r.end || r.end >= self.frames {
                return Err(SceneError::Invalid(format!("fade ramp {}..{} outside [0, {}]", r.start, r.end, self.frames - 1)));
            }
        }
        if let Some(h) = self.holdout.iter().find(|&&h| h >= self.frames) {
            return Err(SceneError::Invalid(format!("holdout frame {h} >= {}", self.frames)));
        }
        if self.holdout.len() >= self.frames {
            return Err(SceneError::Invalid("every frame is held out".into()));
        }
        Ok(())
    }
}

/// One image of a dataset: a frame, optionally seen from a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub frame: usize,
    pub camera: Option<usize>,
    pub image: Image,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub cameras: Vec<Camera>,
    pub holdout_frames: Vec<usize>,
    pub holdout_cameras: Vec<usize>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub views: Vec<View>,
}

pub fn gen_toy2d(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<SceneDataset> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut background = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
            background.set(x, y, [0.15 + 0.35 * u, 0.25 + 0.3 * v, 0.55 - 0.2 * u * v]);
        }
    }
    for _ in 0..spec.rectangles {
        let (rw, rh) = (rng.gen_range(w / 8..w / 3), rng.gen_range(h / 8..h / 3));
        let (x0, y0) = (rng.gen_range(0..w - rw), rng.gen_range(0..h - rh));
        let c = [rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8)];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                background.set(x, y, c);
            }
        }
    }
    let mg = Glyph::text(&spec.moving_text, spec.moving_scale)?;
    let ag = Glyph::text(&spec.appearing_text, spec.appearing_scale)?;
    let moves = spec.velocity != [0.0, 0.0];
    let mut views = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut img = background.clone();
        let mut mask = vec![STATIC; w * h];
        let opacity = spec.ramp.map_or(0.0, |r| r.at(t as f64));
        let (mx, my) = spec.moving_origin(t);
        let [ax, ay] = spec.appearing_pos;
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as i64, y as i64);
                if opacity > 0.0 && ag.covers(xi - ax, yi - ay) {
                    let bg = img.get(x, y);
                    img.set(x, y, std::array::from_fn(|c| opacity * spec.appearing_color[c] + (1.0 - opacity) * bg[c]));
                    mask[y * w + x] = NEW;
                }
                if mg.covers(xi - mx, yi - my) {
                    img.set(x, y, spec.moving_color);
                    mask[y * w + x] = if moves { DEFORMING } else { STATIC };
                }
            }
        }
        views.push(View { frame: t, camera: None, image: img, mask });
    }
    let mut holdout = spec.holdout.clone();
    holdout.sort_unstable();
    holdout.dedup();
    Ok(SceneDataset {
        mode: Mode::Direct2d,
        width: w,
        height: h,
        frames: spec.frames,
        cameras: Vec::new(),
        holdout_frames: holdout,
        holdout_cameras: Vec::new(),
        near: 0.0,
        far: 1.0,
        background: [0.0; 3],
        views,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingSphere {
    /// Center at frame 0 and at the last frame; linear in between.
    pub from: [f64; 3],
    pub to: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearingSphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
    pub ramp: Ramp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub focal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene3dSpec {
    pub boxes: Vec<BoxObject>,
    pub moving: MovingSphere,
    pub appearing: AppearingSphere,
    pub ring: CameraRing,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub holdout_cameras: Vec<usize>,
    pub near: f64,
    pub far: f64,
}

impl Default for Scene3dSpec {
    fn default() -> Self {
        Self {
            boxes: vec![
                BoxObject { min: [0.05, 0.05, 0.05], max: [0.95, 0.15, 0.95], albedo: [0.55, 0.38, 0.22] },
                BoxObject { min: [0.62, 0.15, 0.6], max: [0.85, 0.45, 0.85], albedo: [0.2, 0.45, 0.75] },
                BoxObject { min: [0.15, 0.15, 0.65], max: [0.3, 0.3, 0.8], albedo: [0.85, 0.85, 0.8] },
            ],
            moving: MovingSphere { from: [0.25, 0.27, 0.35], to: [0.6, 0.27, 0.35], radius: 0.12, albedo: [0.9, 0.75, 0.1] },
            appearing: AppearingSphere { center: [0.4, 0.25, 0.7], radius: 0.1, albedo: [0.85, 0.15, 0.15], ramp: Ramp { start: 8, end: 22 } },
            ring: CameraRing { count: 8, radius: 1.3, height: 0.55, target: [0.5, 0.3, 0.5], focal: 62.0 },
            frames: 30,
            width: 64,
            height: 64,
            background: [1.0, 1.0, 1.0],
            holdout_cameras: vec![3],
            near: 0.1,
            far: 3.5,
        }
    }
}

fn in_unit_cube(p: [f64; 3]) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v))
}

impl Scene3dSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 || self.ring.count == 0 {
            return Err(SceneError::Invalid("frames, image size and camera count must be positive".into()));
        }
        for b in &self.boxes {
            if !in_unit_cube(b.min) || !in_unit_cube(b.max) || (0..3).any(|a| b.min[a] >= b.max[a]) {
                return Err(SceneError::Invalid(format!("box {:?}..{:?} not a nonempty box in the unit cube", b.min, b.max)));
            }
        }
        let sphere_ok = |c: [f64; 3], r: f64| r > 0.0 && c.iter().all(|v| *v - r >= 0.0 && *v + r <= 1.0);
        if !sphere_ok(self.moving.from, self.moving.radius) || !sphere_ok(self.moving.to, self.moving.radius) {
            return Err(SceneError::Invalid("moving sphere leaves the unit cube".into()));
        }
        if !sphere_ok(self.appearing.center, self.appearing.radius) {
            return Err(SceneError::Invalid("appearing sphere leaves the unit cube".into()));
        }
        let r = self.appearing.ramp;
        if r.start > r.end || r.end >= self.frames {
            return Err(SceneError::Invalid("appearing ramp outside the sequence".into()));
        }
        if self.holdout_cameras.iter().any(|&c| c >= self.ring.count) || self.holdout_cameras.len() >= self.ring.count {
            return Err(SceneError::Invalid("holdout cameras must be a proper subset of the ring".into()));
        }
        if !(self.near < self.far) {
            return Err(SceneError::Invalid("near must be below far".into()));
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let r = &self.ring;
        (0..r.count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / r.count as f64;
                let eye = [0.5 + r.radius * a.cos(), r.target[1] + r.height, 0.5 + r.radius * a.sin()];
                Ok(Camera::look_at(eye, r.target, [0.0, 1.0, 0.0], self.width, self.height, r.focal)?)
            })
            .collect()
    }

    pub fn moving_center(&self, t: f64) -> [f64; 3] {
        let f = if self.frames > 1 { t / (self.frames - 1) as f64 } else { 0.0 };
        std::array::from_fn(|a| self.moving.from[a] + f * (self.moving.to[a] - self.moving.from[a]))
    }

    /// Color and category seen along a ray at frame `t`.
    pub fn trace(&self, ray: &Ray, t: f64) -> ([f64; 3], u8) {
        let mut best = (f64::INFINITY, self.background, STATIC);
        for b in &self.boxes {
            if let Some(d) = hit_box(ray, b.min, b.max) {
                if d < best.0 {
                    best = (d, b.albedo, STATIC);
                }
            }
        }
        if let Some(d) = hit_sphere(ray, self.moving_center(t), self.moving.radius) {
            if d < best.0 {
                best = (d, self.moving.albedo, DEFORMING);
            }
        }
        let a = &self.appearing;
        let opacity = a.ramp.at(t);
        if opacity > 0.0 {
            if let Some(d) = hit_sphere(ray, a.center, a.radius) {
                if d < best.0 {
                    let c = std::array::from_fn(|k| opacity * a.albedo[k] + (1.0 - opacity) * best.1[k]);
                    return (c, NEW);
                }
            }
        }
        (best.1, best.2)
    }
}

fn hit_sphere(ray: &Ray, center: [f64; 3], radius: f64) -> Option<f64> {
    let oc: [f64; 3] = std::array::from_fn(|a| ray.origin[a] - center[a]);
    let b: f64 = (0..3).map(|a| oc[a] * ray.dir[a]).sum();
    let c: f64 = (0..3).map(|a| oc[a] * oc[a]).sum::<f64>() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&d| d >= ray.near && d <= ray.far)
}

fn hit_box(ray: &Ray, min: [f64; 3], max: [f64; 3]) -> Option<f64> {
    let (mut lo, mut hi) = (ray.near, ray.far);
    for a in 0..3 {
        if ray.dir[a].abs() < 1e-15 {
            if ray.origin[a] < min[a] || ray.origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let t0 = (min[a] - ray.origin[a]) / ray.dir[a];
        let t1 = (max[a] - ray.origin[a]) / ray.dir[a];
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (lo <= hi).then_some(lo)
}

pub fn gen_scene3d(spec: &Scene3dSpec, _rng: &mut ChaCha8Rng) -> Result<SceneDataset> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let mut views = Vec::with_capacity(cameras.len() * spec.frames);
    for (ci, cam) in cameras.iter().enumerate() {
        let rays: Vec<Ray> = (0..spec.width * spec.height)
            .map(|i| generate_ray(cam, ((i % spec.width) as f64 + 0.5, (i / spec.width) as f64 + 0.5), spec.near, spec.far))
            .collect::<Result<_, _>>()?;
        for t in 0..spec.frames {
            let mut image = Image::new(spec.width, spec.height);
            let mut mask = vec![STATIC; rays.len()];
            for (i, ray) in rays.iter().enumerate() {
                let (c, m) = spec.trace(ray, t as f64);
                image.data[i * 3..i * 3 + 3].copy_from_slice(&c);
                mask[i] = m;
            }
            views.push(View { frame: t, camera: Some(ci), image, mask });
        }
    }
    Ok(SceneDataset {
        mode: Mode::Volumetric,
        width: spec.width,
        height: spec.height,
        frames: spec.frames,
        cameras,
        holdout_frames: Vec::new(),
        holdout_cameras: spec.holdout_cameras.clone(),
        near: spec.near,
        far: spec.far,
        background: spec.background,
        views,
    })
}

/// Model time of `frame` when a model is fit on `train_frames` only: each
/// training frame maps to its rank, frames in between interpolate linearly,
/// frames outside clamp to the ends.
pub fn model_time(train_frames: &[usize], frame: usize) -> f64 {
    match train_frames.binary_search(&frame) {
        Ok(rank) => rank as f64,
        Err(0) => 0.0,
        Err(i) if i == train_frames.len() => (train_frames.len() - 1) as f64,
        Err(i) => {
            let (a, b) = (train_frames[i - 1], train_frames[i]);
            (i - 1) as f64 + (frame - a) as f64 / (b - a) as f64
        }
    }
}

impl SceneDataset {
    pub fn is_holdout(&self, v: &View) -> bool {
        self.holdout_frames.contains(&v.frame) || v.camera.is_some_and(|c| self.holdout_cameras.contains(&c))
    }

    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.frames).filter(|f| !self.holdout_frames.contains(f)).collect()
    }

    /// Number of frames the fitted model spans.
    pub fn model_frames(&self) -> usize {
        self.train_frames().len()
    }

    pub fn model_time(&self, frame: usize) -> f64 {
        model_time(&self.train_frames(), frame)
    }

    pub fn camera_of(&self, v: &View) -> Option<&Camera> {
        v.camera.map(|c| &self.cameras[c])
    }

    /// Camera used to render a view; 2-D views get a nominal camera carrying
    /// the image size.
    pub fn render_camera(&self, v: &View) -> Camera {
        self.camera_of(v).cloned().unwrap_or_else(|| nominal_camera(self.width, self.height))
    }

    pub fn training_set(&self) -> Dataset {
        let train = self.train_frames();
        let views = self
            .views
            .iter()
            .filter(|v| !self.is_holdout(v))
            .map(|v| TrainView {
                image: v.image.clone(),
                frame: train.binary_search(&v.frame).expect("training frame"),
                camera: self.camera_of(v).cloned(),
            })
            .collect();
        Dataset { mode: self.mode, frames: train.len(), views }
    }

    pub fn holdout_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| self.is_holdout(v))
    }

    fn view_name(v: &View) -> String {
        match v.camera {
            Some(c) => format!("c{c:02}_f{:03}.png", v.frame),
            None => format!("f{:03}.png", v.frame),
        }
    }

    pub fn manifest_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mode = match self.mode {
            Mode::Direct2d => "direct2d",
            Mode::Volumetric => "volumetric",
        };
        s += &format!("mode = {mode}\nwidth = {}\nheight = {}\nframes = {}\n", self.width, self.height, self.frames);
        s += &format!("holdout_frames = {}\nholdout_cameras = {}\n", list(&self.holdout_frames), list(&self.holdout_cameras));
        s += &format!("near = {}\nfar = {}\n", self.near, self.far);
        let b = self.background;
        s += &format!("background = {},{},{}\ncameras = {}\n", b[0], b[1], b[2], self.cameras.len());
        for (i, c) in self.cameras.iter().enumerate() {
            let pose: Vec<String> = c.pose.iter().flatten().map(|v| v.to_string()).collect();
            s += &format!("camera.{i}.intrinsics = {},{},{},{}\n", c.fx, c.fy, c.cx, c.cy);
            s += &format!("camera.{i}.pose = {}\n", pose.join(","));
        }
        let views: Vec<String> = self.views.iter().map(Self::view_name).collect();
        s += &format!("views = {}\n", views.join(","));
        s
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        fs::create_dir_all(dir.join("masks"))?;
        fs::write(dir.join("manifest.txt"), self.manifest_text())?;
        for v in &self.views {
            let name = Self::view_name(v);
            v.image.write_png(&dir.join("frames").join(&name))?;
            write_mask_png(&dir.join("masks").join(&name), self.width, self.height, &v.mask)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let kv = parse_manifest(&text)?;
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| SceneError::Manifest { key: k.into(), msg: "missing".into() });
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|e| SceneError::Manifest { key: k.into(), msg: format!("{e}") })
        };
        let floats = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| SceneError::Manifest { key: k.into(), msg: format!("{e}") }))
                .collect()
        };
        let ints = |k: &str| -> Result<Vec<usize>> {
            let s = get(k)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| p.trim().parse().map_err(|e| SceneError::Manifest { key: k.into(), msg: format!("{e}") }))
                .collect()
        };
        let mode = match get("mode")? {
            "direct2d" => Mode::Direct2d,
            "volumetric" => Mode::Volumetric,
            other => return Err(SceneError::Manifest { key: "mode".into(), msg: format!("unknown mode {other:?}") }),
        };
        let (width, height) = (num("width")? as usize, num("height")? as usize);
        let bg = floats("background")?;
        if bg.len() != 3 {
            return Err(SceneError::Manifest { key: "background".into(), msg: "expected r,g,b".into() });
        }
        let mut cameras = Vec::new();
        for i in 0..num("cameras")? as usize {
            let k = floats(&format!("camera.{i}.intrinsics"))?;
            let p = floats(&format!("camera.{i}.pose"))?;
            if k.len() != 4 || p.len() != 12 {
                return Err(SceneError::Manifest { key: format!("camera.{i}"), msg: "expected 4 intrinsics and 12 pose values".into() });
            }
            let pose = std::array::from_fn(|r| std::array::from_fn(|c| p[r * 4 + c]));
            cameras.push(Camera::new(pose, k[0], k[1], k[2], k[3], width, height)?);
        }
        let mut views = Vec::new();
        for name in get("views")?.split(',').filter(|s| !s.is_empty()) {
            let (camera, frame) = parse_view_name(name).ok_or_else(|| SceneError::Manifest { key: "views".into(), msg: format!("bad view name {name:?}") })?;
            let image = Image::read_png(&dir.join("frames").join(name))?;
            let (mw, mh, mask) = read_mask_png(&dir.join("masks").join(name))?;
            if (image.width, image.height) != (width, height) || (mw, mh) != (width, height) {
                return Err(SceneError::Shape(format!("{name} is not {width}x{height}")));
            }
            views.push(View { frame, camera, image, mask });
        }
        Ok(Self {
            mode,
            width,
            height,
            frames: num("frames")? as usize,
            cameras,
            holdout_frames: ints("holdout_frames")?,
            holdout_cameras: ints("holdout_cameras")?,
            near: num("near")?,
            far: num("far")?,
            background: [bg[0], bg[1], bg[2]],
            views,
        })
    }
}

fn parse_view_name(name: &str) -> Option<(Option<usize>, usize)> {
    let stem = name.strip_suffix(".png")?;
    match stem.split_once('_') {
        Some((c, f)) => Some((Some(c.strip_prefix('c')?.parse().ok()?), f.strip_prefix('f')?.parse().ok()?)),
        None => Some((None, stem.strip_prefix('f')?.parse().ok()?)),
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SceneError::Manifest { key: format!("line {}", n + 1), msg: format!("expected key = value, got {line:?}") })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Camera whose only role is to carry an image size for 2-D rendering.
pub fn nominal_camera(width: usize, height: usize) -> Camera {
    let f = width.max(height) as f64;
    Camera::look_at([0.5, 0.5, 2.0], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0], width, height, f).expect("fixed pose is valid")
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(SceneError::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn mse_to_psnr(mse: f64) -> f64 {
    if mse < 1e-10 {
        99.0
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse_to_psnr(mse(a, b)?))
}

/// Squared error sum and channel-value count over the pixels where
/// `select(mask value)` holds.
pub fn masked_sq_error(a: &Image, b: &Image, mask: &[u8], select: impl Fn(u8) -> bool) -> Result<(f64, usize)> {
    check_same(a, b)?;
    if mask.len() != a.pixels() {
        return Err(SceneError::Shape(format!("mask has {} entries for {} pixels", mask.len(), a.pixels())));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &m) in mask.iter().enumerate() {
        if select(m) {
            for c in 0..3 {
                let d = a.data[i * 3 + c] - b.data[i * 3 + c];
                sum += d * d;
            }
            n += 3;
        }
    }
    Ok((sum, n))
}

/// Accumulates masked squared errors over several images into one PSNR.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionPsnr {
    pub sum: f64,
    pub count: usize,
}

impl RegionPsnr {
    pub fn add(&mut self, (sum, count): (f64, usize)) {
        self.sum += sum;
        self.count += count;
    }

    /// `None` when the region is empty.
    pub fn psnr(&self) -> Option<f64> {
        (self.count > 0).then(|| mse_to_psnr(self.sum / self.count as f64))
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian-weighted mean over every fully contained window ("valid" mode).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM values in valid mode, `(map, map_width, map_height)`.
/// Window `(x, y)` is centred on pixel `(x + 5, y + 5)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<(Vec<f64>, usize, usize)> {
    check_same(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(SceneError::Shape(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (x, y) = (a.gray(), b.gray());
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let map = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect();
    Ok((map, w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1))
}

/// Single-scale SSIM on the channel-mean grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Pools SSIM windows whose centre pixel lies in a mask region.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionSsim {
    pub sum: f64,
    pub count: usize,
}

impl RegionSsim {
    /// Adds the windows of `map` centred on pixels where `select(mask)` holds.
    pub fn add_map(&mut self, (map, mw, mh): (&[f64], usize, usize), width: usize, mask: &[u8], select: impl Fn(u8) -> bool) {
        let half = SSIM_WINDOW / 2;
        for y in 0..mh {
            for x in 0..mw {
                if select(mask[(y + half) * width + x + half]) {
                    self.sum += map[y * mw + x];
                    self.count += 1;
                }
            }
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Holdout metrics of one model, pooled over all held-out views.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub all: RegionPsnr,
    pub static_region: RegionPsnr,
    pub deforming: RegionPsnr,
    pub new: RegionPsnr,
    /// Mean SSIM over held-out views.
    pub ssim: f64,
    pub ssim_static: RegionSsim,
    pub ssim_deforming: RegionSsim,
    pub ssim_new: RegionSsim,
    pub views: usize,
}

/// One row of an evaluation table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionScore {
    pub region: &'static str,
    pub psnr: f64,
    /// `None` when no SSIM window is centred in the region.
    pub ssim: Option<f64>,
}

impl EvalReport {
    /// Rows of `(region, PSNR)`; empty regions are omitted.
    pub fn regions(&self) -> Vec<(&'static str, f64)> {
        self.scores().into_iter().map(|s| (s.region, s.psnr)).collect()
    }

    /// PSNR and SSIM per region; regions without pixels are omitted.
    pub fn scores(&self) -> Vec<RegionScore> {
        [
            ("all", &self.all, Some(self.ssim)),
            ("static", &self.static_region, self.ssim_static.mean()),
            ("deforming", &self.deforming, self.ssim_deforming.mean()),
            ("new", &self.new, self.ssim_new.mean()),
        ]
        .into_iter()
        .filter_map(|(region, r, ssim)| r.psnr().map(|psnr| RegionScore { region, psnr, ssim }))
        .collect()
    }
}

/// Compares rendered held-out views against ground truth, region by region.
/// `render` receives each held-out view and its model time.
pub fn evaluate_with(
    dataset: &SceneDataset,
    mut render: impl FnMut(&View, f64) -> Result<Image>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        all: RegionPsnr::default(),
        static_region: RegionPsnr::default(),
        deforming: RegionPsnr::default(),
        new: RegionPsnr::default(),
        ssim: 0.0,
        ssim_static: RegionSsim::default(),
        ssim_deforming: RegionSsim::default(),
        ssim_new: RegionSsim::default(),
        views: 0,
    };
    let mut ssim_sum = 0.0;
    for v in dataset.holdout_views() {
        let img = render(v, dataset.model_time(v.frame))?;
        report.all.add(masked_sq_error(&img, &v.image, &v.mask, |_| true)?);
        report.static_region.add(masked_sq_error(&img, &v.image, &v.mask, |m| m == STATIC)?);
        report.deforming.add(masked_sq_error(&img, &v.image, &v.mask, |m| m == DEFORMING)?);
        report.new.add(masked_sq_error(&img, &v.image, &v.mask, |m| m == NEW)?);
        let (map, mw, mh) = ssim_map(&img, &v.image)?;
        ssim_sum += map.iter().sum::<f64>() / map.len() as f64;
        let m = (map.as_slice(), mw, mh);
        report.ssim_static.add_map(m, img.width, &v.mask, |c| c == STATIC);
        report.ssim_deforming.add_map(m, img.width, &v.mask, |c| c == DEFORMING);
        report.ssim_new.add_map(m, img.width, &v.mask, |c| c == NEW);
        report.views += 1;
    }
    if report.views == 0 {
        return Err(SceneError::Invalid("dataset has no held-out views".into()));
    }
    report.ssim = ssim_sum / report.views as f64;
    Ok(report)
}

/// Renders every held-out view with `model` and scores it.
pub fn evaluate(model: &crate::fields::SceneModel, dataset: &SceneDataset, config: &crate::render::RenderConfig) -> Result<EvalReport> {
    evaluate_with(dataset, |v, t| Ok(crate::render::render_image(model, &dataset.render_camera(v), t, config)?.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::normalize;
    use rand::SeedableRng;

    fn toy(spec: &ToySpec, seed: u64) -> SceneDataset {
        gen_toy2d(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn bbox(mask: &[u8], w: usize, cat: u8) -> (usize, usize, usize, usize) {
        let pts: Vec<(usize, usize)> = mask.iter().enumerate().filter(|(_, &m)| m == cat).map(|(i, _)| (i % w, i / w)).collect();
        let xs = pts.iter().map(|p| p.0);
        let ys = pts.iter().map(|p| p.1);
        (xs.clone().min().unwrap(), ys.clone().min().unwrap(), xs.max().unwrap(), ys.max().unwrap())
    }

    #[test]
    fn toy_motion_ramp_and_masks() {
        let spec = ToySpec::default();
        let d = toy(&spec, 1);
        let w = spec.width;
        let b0 = bbox(&d.views[0].mask, w, DEFORMING);
        let b5 = bbox(&d.views[5].mask, w, DEFORMING);
        assert_eq!((b5.0 - b0.0, b5.1 - b0.1, b5.2 - b0.2), (10, 0, 10));
        // Before the ramp starts the appearing glyph is invisible.
        let ag = Glyph::text(&spec.appearing_text, spec.appearing_scale).unwrap();
        let [ax, ay] = spec.appearing_pos;
        for t in 0..=spec.ramp.unwrap().start {
            for y in 0..ag.height {
                for x in 0..ag.width {
                    let (px, py) = (ax as usize + x, ay as usize + y);
                    assert_eq!(d.views[t].image.get(px, py), d.views[0].image.get(px, py));
                    assert_eq!(d.views[t].mask[py * w + px], STATIC);
                }
            }
        }
        assert!(d.views[20].mask.contains(&NEW));
        for v in &d.views {
            assert!(v.mask.iter().all(|&m| m <= NEW));
        }
    }

    #[test]
    fn degenerate_toy_is_constant() {
        let spec = ToySpec { velocity: [0.0, 0.0], ramp: None, ..Default::default() };
        let d = toy(&spec, 4);
        for v in &d.views {
            assert_eq!(v.image, d.views[0].image);
            assert!(v.mask.iter().all(|&m| m == STATIC));
        }
    }

    #[test]
    fn toy_is_deterministic_per_seed_and_validated() {
        let spec = ToySpec::default();
        assert_eq!(toy(&spec, 7), toy(&spec, 7));
        assert_ne!(toy(&spec, 7).views[0].image, toy(&spec, 8).views[0].image);
        let bad = ToySpec { velocity: [5.0, 0.0], ..Default::default() };
        let err = gen_toy2d(&bad, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().to_string();
        assert!(err.contains("trajectory"), "{err}");
        let bad = ToySpec { ramp: Some(Ramp { start: 3, end: 30 }), ..Default::default() };
        assert!(gen_toy2d(&bad, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().to_string().contains("ramp"));
    }

    #[test]
    fn holdout_frames_map_between_neighbours() {
        let train = [0, 2, 3, 5, 6];
        assert_eq!(model_time(&train, 0), 0.0);
        assert_eq!(model_time(&train, 1), 0.5);
        assert_eq!(model_time(&train, 3), 2.0);
        assert_eq!(model_time(&train, 4), 2.5);
        assert_eq!(model_time(&train, 9), 4.0);
        let d = toy(&ToySpec::default(), 0);
        assert_eq!(d.model_frames(), 20);
        assert_eq!(d.training_set().views.len(), 20);
        assert_eq!(d.holdout_views().count(), 10);
        assert_eq!(d.model_time(29), 19.0);
    }

    #[test]
    fn scene3d_oracle_properties() {
        let spec = Scene3dSpec::default();
        let d = gen_scene3d(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.views.len(), 8 * 30);
        let miss = Ray { origin: [5.0, 5.0, 5.0], dir: normalize([1.0, 1.0, 1.0]), near: 0.0, far: 10.0 };
        assert_eq!(spec.trace(&miss, 0.0), (spec.background, STATIC));
        // Static pixels agree across frames for a fixed camera.
        for c in 0..8 {
            let views: Vec<&View> = d.views.iter().filter(|v| v.camera == Some(c)).collect();
            let stable: Vec<usize> = (0..spec.width * spec.height).filter(|&i| views.iter().all(|v| v.mask[i] == STATIC)).collect();
            assert!(!stable.is_empty());
            for v in &views {
                for &i in &stable {
                    assert_eq!(v.image.data[i * 3..i * 3 + 3], views[0].image.data[i * 3..i * 3 + 3]);
                }
            }
        }
    }

    #[test]
    fn camera_at_sphere_center_sees_albedo() {
        let spec = Scene3dSpec::default();
        let target = spec.moving_center(0.0);
        let cam = Camera::look_at([target[0], target[1] + 0.5, target[2] + 0.6], target, [0.0, 1.0, 0.0], 33, 33, 30.0).unwrap();
        let ray = generate_ray(&cam, (16.5, 16.5), 0.0, 3.0).unwrap();
        assert_eq!(spec.trace(&ray, 0.0), (spec.moving.albedo, DEFORMING));
    }

    #[test]
    fn opposing_cameras_see_opposite_motion() {
        let spec = Scene3dSpec::default();
        let cams = spec.cameras().unwrap();
        let (a, b) = (&cams[2], &cams[6]);
        let shift = |c: &Camera| c.project(spec.moving_center(29.0)).unwrap().0 - c.project(spec.moving_center(0.0)).unwrap().0;
        let (sa, sb) = (shift(a), shift(b));
        assert!(sa.abs() > 1.0 && sb.abs() > 1.0 && sa.signum() != sb.signum(), "{sa} {sb}");
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = Scene3dSpec { frames: 2, width: 16, height: 12, ..Default::default() };
        spec.appearing.ramp = Ramp { start: 0, end: 1 };
        let d = gen_scene3d(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = SceneDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.cameras, d.cameras);
        assert_eq!(back.holdout_cameras, d.holdout_cameras);
        assert_eq!(back.views.len(), d.views.len());
        for (x, y) in back.views.iter().zip(&d.views) {
            assert_eq!((x.frame, x.camera, &x.mask), (y.frame, y.camera, &y.mask));
            assert_eq!(x.image.to_rgb8(), y.image.to_rgb8());
        }
        let toy_dir = tempfile::tempdir().unwrap();
        let t = toy(&ToySpec::default(), 2);
        t.write_dir(toy_dir.path()).unwrap();
        let tb = SceneDataset::read_dir(toy_dir.path()).unwrap();
        assert_eq!((tb.mode, tb.holdout_frames.clone(), tb.views.len()), (Mode::Direct2d, t.holdout_frames.clone(), 30));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((mse_to_psnr(0.001) - 30.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::new(3, 4)).is_err());
    }

    /// Direct per-window evaluation with explicit 2-D weights.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (x, y) = (a.gray(), b.gray());
        let w = a.width;
        let half = 5.0;
        let mut k2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let r2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
                k2[i][j] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
                s += k2[i][j];
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=a.height - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (oy + i) * w + ox + j;
                        mx += k2[i][j] / s * x[p];
                        my += k2[i][j] / s * y[p];
                    }
                }
                let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (oy + i) * w + ox + j;
                        let kw = k2[i][j] / s;
                        vx += kw * (x[p] - mx) * (x[p] - mx);
                        vy += kw * (y[p] - my) * (y[p] - my);
                        cv += kw * (x[p] - mx) * (y[p] - my);
                    }
                }
                let c1 = 0.0001;
                let c2 = 0.0009;
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_examples_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = Image::new(23, 17);
        a.data.iter_mut().for_each(|v| *v = rng.gen());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(16, 16, [0.2; 3]);
        let d = Image::filled(16, 16, [0.7; 3]);
        let v = ssim(&c, &d).unwrap();
        assert!(v < 1.0 && v > 0.0);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = (*v * 0.7 + rng.gen::<f64>() * 0.3).clamp(0.0, 1.0));
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - ssim_reference(&a, &b)).abs() < 1e-6);
        assert_eq!(fast, ssim(&b, &a).unwrap());
        assert!(ssim(&Image::new(10, 30), &Image::new(10, 30)).is_err());
    }

    #[test]
    fn region_psnr_pools_masked_pixels() {
        let a = Image::filled(2, 1, [0.0; 3]);
        let mut b = a.clone();
        b.set(1, 0, [0.1, 0.1, 0.1]);
        let mask = [STATIC, NEW];
        let mut r = RegionPsnr::default();
        r.add(masked_sq_error(&a, &b, &mask, |m| m == NEW).unwrap());
        assert!((r.psnr().unwrap() - 20.0).abs() < 1e-9);
        let mut s = RegionPsnr::default();
        s.add(masked_sq_error(&a, &b, &mask, |m| m == STATIC).unwrap());
        assert_eq!(s.psnr(), Some(99.0));
        assert_eq!(RegionPsnr::default().psnr(), None);
    }

    #[test]
    fn region_ssim_selects_windows_by_centre() {
        let a = Image::filled(13, 12, [0.5; 3]);
        let mut b = a.clone();
        b.set(0, 0, [0.9; 3]);
        let (map, mw, mh) = ssim_map(&a, &b).unwrap();
        assert_eq!((mw, mh), (3, 2));
        let mut mask = vec![STATIC; 13 * 12];
        mask[5 * 13 + 5] = NEW;
        let mut new = RegionSsim::default();
        new.add_map((&map, mw, mh), 13, &mask, |m| m == NEW);
        assert_eq!(new.count, 1);
        assert_eq!(new.mean(), Some(map[0]));
        assert!(map[0] < 1.0 && map[5] == 1.0);
        let mut stat = RegionSsim::default();
        stat.add_map((&map, mw, mh), 13, &mask, |m| m == STATIC);
        assert_eq!(stat.count, 5);
        assert_eq!(RegionSsim::default().mean(), None);
    }
}
