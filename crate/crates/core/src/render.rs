//! Pinhole cameras, stratified ray sampling, and alpha-compositing quadrature
//! of the volume rendering integral.
//!
//! Sample `i` on a ray with density `sigma_i` over a segment of length
//! `delta_i` has opacity `alpha_i = 1 - exp(-sigma_i * delta_i)`, transmittance
//! `T_i = prod_{j<i} (1 - alpha_j)` and weight `w_i = T_i * alpha_i`. The ray
//! color is `sum_i w_i c_i` plus the residual transmittance times a constant
//! background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fields::{FieldError, FieldOutput, Mode, QueryBatch, RadianceSample, SceneModel};
use crate::grad::{CustomOp, GradError, Graph, Tensor, Var};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("pixel ({u}, {v}) outside {width}x{height}")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera looking down its local `-z` axis, `+y` up, `+x` right.
/// Pixel `v` grows downward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World-from-camera rigid transform, rows of `[R | t]`.
    pub pose: [[f64; 4]; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(pose: [[f64; 4]; 3], fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self { pose, fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `focal` in pixels, principal point
    /// at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        let fwd = sub(target, eye);
        if dot(fwd, fwd) < 1e-24 {
            return Err(RenderError::Camera("eye coincides with target".into()));
        }
        let fwd = normalize(fwd);
        let right = cross(fwd, up);
        if dot(right, right) < 1e-24 {
            return Err(RenderError::Camera("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let true_up = cross(right, fwd);
        let back = [-fwd[0], -fwd[1], -fwd[2]];
        let mut pose = [[0.0; 4]; 3];
        for r in 0..3 {
            pose[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        Self::new(pose, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| self.pose[r][i] * self.pose[r][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (d - expected).abs() > 1e-6 {
                    return Err(RenderError::Camera(format!("rotation not orthonormal (R^T R)[{i}][{j}] = {d}")));
                }
            }
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera("focal lengths and image size must be positive".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Continuous pixel coordinates of the projection of a world point, or
    /// `None` when it lies behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let d = sub(p, self.position());
        let local: Vec3 = std::array::from_fn(|c| (0..3).map(|r| self.pose[r][c] * d[r]).sum());
        if local[2] >= 0.0 {
            return None;
        }
        let z = -local[2];
        Some((self.cx + self.fx * local[0] / z, self.cy - self.fy * local[1] / z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vec3 {
        [
            self.origin[0] + depth * self.dir[0],
            self.origin[1] + depth * self.dir[1],
            self.origin[2] + depth * self.dir[2],
        ]
    }

    /// `[near, far]` intersected with the unit cube, `None` if empty.
    pub fn clip_to_unit_cube(&self) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (self.near, self.far);
        for a in 0..3 {
            if self.dir[a].abs() < 1e-12 {
                if !(0.0..=1.0).contains(&self.origin[a]) {
                    return None;
                }
                continue;
            }
            let t0 = (0.0 - self.origin[a]) / self.dir[a];
            let t1 = (1.0 - self.origin[a]) / self.dir[a];
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
        (lo < hi).then_some((lo, hi))
    }
}

/// Back-projects a continuous pixel position through the pinhole.
pub fn generate_ray(camera: &Camera, pixel: (f64, f64), near: f64, far: f64) -> Result<Ray> {
    let (u, v) = pixel;
    if !(0.0..=camera.width as f64).contains(&u) || !(0.0..=camera.height as f64).contains(&v) {
        return Err(RenderError::PixelOutOfBounds { u, v, width: camera.width, height: camera.height });
    }
    if !(near < far) {
        return Err(RenderError::Invalid(format!("near {near} must be below far {far}")));
    }
    let local = [(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -1.0];
    let dir: Vec3 = std::array::from_fn(|r| (0..3).map(|c| camera.pose[r][c] * local[c]).sum());
    Ok(Ray { origin: camera.position(), dir: normalize(dir), near, far })
}

/// `n` increasing depths in `[near, far]`: bin midpoints, or one uniform draw
/// per equal-length bin when `stratified`.
pub fn sample_points<R: Rng>(near: f64, far: f64, n: usize, stratified: bool, rng: &mut R) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(RenderError::Invalid(format!("need at least 2 samples, got {n}")));
    }
    let bin = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let off = if stratified { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + off) * bin
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Alpha-composites samples front to back (no background).
pub fn composite(samples: &[RadianceSample], deltas: &[f64]) -> Result<Composite> {
    if samples.len() != deltas.len() {
        return Err(RenderError::Invalid(format!("{} samples vs {} deltas", samples.len(), deltas.len())));
    }
    if let Some(d) = deltas.iter().find(|&&d| !(d > 0.0)) {
        return Err(RenderError::Invalid(format!("segment length {d} must be positive")));
    }
    if let Some(s) = samples.iter().find(|s| !(s.sigma >= 0.0)) {
        return Err(RenderError::Invalid(format!("negative density {}", s.sigma)));
    }
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(samples.len());
    for (s, &d) in samples.iter().zip(deltas) {
        let alpha = 1.0 - (-s.sigma * d).exp();
        let w = trans * alpha;
        for c in 0..3 {
            rgb[c] += w * s.rgb[c];
        }
        weights.push(w);
        trans *= 1.0 - alpha;
    }
    Ok(Composite { rgb, opacity: 1.0 - trans, weights })
}

/// Differentiable batched compositing: `sigma` is `(R*S) x 1`, `rgb` is
/// `(R*S) x 3`, output is `R x 3` including the background.
struct CompositeOp {
    samples: usize,
    deltas: Vec<f64>,
    background: [f64; 3],
}

impl CompositeOp {
    fn forward(&self, sigma: &[f64], rgb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.samples;
        let rays = sigma.len() / s;
        let mut out = vec![0.0; rays * 3];
        let mut weights = vec![0.0; sigma.len()];
        for r in 0..rays {
            let mut trans = 1.0;
            for i in r * s..(r + 1) * s {
                let alpha = 1.0 - (-sigma[i] * self.deltas[i]).exp();
                let w = trans * alpha;
                weights[i] = w;
                for c in 0..3 {
                    out[r * 3 + c] += w * rgb[i * 3 + c];
                }
                trans *= 1.0 - alpha;
            }
            for c in 0..3 {
                out[r * 3 + c] += trans * self.background[c];
            }
        }
        (out, weights)
    }
}

impl CustomOp for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor, needs_grad: &[bool]) -> Result<Vec<Option<Tensor>>, GradError> {
        let (sigma, rgb) = (inputs[0].data(), inputs[1].data());
        let s = self.samples;
        let rays = sigma.len() / s;
        let mut dsigma = vec![0.0; sigma.len()];
        let mut drgb = vec![0.0; rgb.len()];
        let g = grad_output.data();
        let mut trans_after = vec![0.0; s];
        let mut gc = vec![0.0; s];
        let mut w = vec![0.0; s];
        for r in 0..rays {
            let gr = &g[r * 3..r * 3 + 3];
            let mut trans = 1.0;
            for k in 0..s {
                let i = r * s + k;
                let alpha = 1.0 - (-sigma[i] * self.deltas[i]).exp();
                w[k] = trans * alpha;
                trans *= 1.0 - alpha;
                trans_after[k] = trans;
                gc[k] = (0..3).map(|c| gr[c] * rgb[i * 3 + c]).sum();
                for c in 0..3 {
                    drgb[i * 3 + c] = w[k] * gr[c];
                }
            }
            // Suffix of everything behind sample k: later weights and background.
            let mut behind = trans * (0..3).map(|c| gr[c] * self.background[c]).sum::<f64>();
            for k in (0..s).rev() {
                let i = r * s + k;
                dsigma[i] = self.deltas[i] * (trans_after[k] * gc[k] - behind);
                behind += w[k] * gc[k];
            }
        }
        Ok(vec![
            needs_grad[0].then(|| Tensor::new(inputs[0].shape().to_vec(), dsigma).unwrap()),
            needs_grad[1].then(|| Tensor::new(inputs[1].shape().to_vec(), drgb).unwrap()),
        ])
    }
}

/// Records batched compositing of `rays * samples` points into the graph.
/// Zero-length segments are allowed and contribute nothing.
pub fn composite_batch(g: &mut Graph<'_>, sigma: Var, rgb: Var, deltas: Vec<f64>, samples: usize, background: [f64; 3]) -> Result<(Var, Vec<f64>)> {
    let n = g.value(sigma).len();
    if samples == 0 || n % samples != 0 || deltas.len() != n || g.value(rgb).shape() != [n, 3] {
        return Err(RenderError::Invalid(format!(
            "composite batch: {n} densities, {} deltas, {samples} samples per ray",
            deltas.len()
        )));
    }
    let op = CompositeOp { samples, deltas, background };
    let (out, weights) = op.forward(g.value(sigma).data(), g.value(rgb).data());
    let rays = n / samples;
    let var = g.custom(Box::new(op), &[sigma, rgb], Tensor::matrix(rays, 3, out));
    Ok((var, weights))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub samples: usize,
    pub stratified: bool,
    pub tau: f64,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    /// Rays per graph evaluation.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            stratified: false,
            tau: 0.001,
            background: [1.0; 3],
            near: 0.0,
            far: 4.0,
            seed: 0,
            chunk: 512,
        }
    }
}

/// Points, directions, times and segment lengths for a set of rays.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub queries: QueryBatch,
    pub deltas: Vec<f64>,
    pub samples: usize,
}

/// Samples every ray inside the unit cube. Rays that miss it get zero-length
/// segments at the cube center so they composite to pure background.
pub fn build_ray_batch(rays: &[Ray], times: &[f64], samples: usize, stratified: bool, mut rng_for: impl FnMut(usize) -> ChaCha8Rng) -> Result<RayBatch> {
    let n = rays.len() * samples;
    let mut points = Vec::with_capacity(n * 3);
    let mut dirs = Vec::with_capacity(n * 3);
    let mut ts = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n);
    for (r, ray) in rays.iter().enumerate() {
        match ray.clip_to_unit_cube() {
            Some((near, far)) => {
                let mut rng = rng_for(r);
                let depths = sample_points(near, far, samples, stratified, &mut rng)?;
                let delta = (far - near) / samples as f64;
                for d in depths {
                    let p = ray.at(d);
                    points.extend(p.iter().map(|v| v.clamp(0.0, 1.0)));
                    deltas.push(delta);
                }
            }
            None => {
                for _ in 0..samples {
                    points.extend([0.5; 3]);
                    deltas.push(0.0);
                }
            }
        }
        for _ in 0..samples {
            dirs.extend(ray.dir);
            ts.push(times[r]);
        }
    }
    Ok(RayBatch {
        queries: QueryBatch { points: Tensor::matrix(n, 3, points), times: ts, dirs: Some(Tensor::matrix(n, 3, dirs)) },
        deltas,
        samples,
    })
}

/// Evaluates the model on a ray batch and composites to per-ray colors.
pub fn render_rays(g: &mut Graph<'_>, model: &SceneModel, batch: &RayBatch, tau: f64, background: [f64; 3]) -> Result<(Var, FieldOutput, Vec<f64>)> {
    if model.mode() != Mode::Volumetric {
        return Err(FieldError::WrongMode { expected: Mode::Volumetric }.into());
    }
    let out = model.eval(g, &batch.queries, tau)?;
    let sigma = out.sigma.expect("volumetric output has sigma");
    let (color, weights) = composite_batch(g, sigma, out.rgb, batch.deltas.clone(), batch.samples, background)?;
    Ok((color, out, weights))
}

fn pixel_rng(seed: u64, pixel: usize, t: f64) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [pixel as u64, t.to_bits()] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Renders one ray at time `t`.
pub fn render_ray(model: &SceneModel, ray: &Ray, t: f64, config: &RenderConfig) -> Result<[f64; 3]> {
    let batch = build_ray_batch(std::slice::from_ref(ray), &[t], config.samples, config.stratified, |_| pixel_rng(config.seed, 0, t))?;
    let mut g = Graph::new(&model.params);
    let (color, _, _) = render_rays(&mut g, model, &batch, config.tau, config.background)?;
    let c = g.value(color).data();
    Ok([c[0], c[1], c[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    /// Per-pixel accumulated opacity (volumetric mode only).
    pub opacity: Option<Vec<f64>>,
    /// Per-pixel decomposition probabilities, interleaved (static, deform, new).
    pub decomposition: Vec<f64>,
}

/// Pixel lattice coordinates of the 2-D mode: pixel `i` maps to `i / (W - 1)`.
pub fn lattice_point(x: usize, y: usize, width: usize, height: usize) -> [f64; 2] {
    let c = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    [c(x, width), c(y, height)]
}

/// Renders a full image at time `t`.
///
/// In the 2-D mode the camera only supplies the image size and the field is
/// evaluated on the pixel lattice. Pixels are independent: each ray's samples
/// depend only on `(config.seed, pixel, t)`.
pub fn render_image(model: &SceneModel, camera: &Camera, t: f64, config: &RenderConfig) -> Result<RenderedImage> {
    let (w, h) = (camera.width, camera.height);
    let npix = w * h;
    let mut image = Image::new(w, h);
    let mut decomposition = vec![0.0; npix * 3];
    let chunk = config.chunk.max(1);
    match model.mode() {
        Mode::Direct2d => {
            for start in (0..npix).step_by(chunk) {
                let end = (start + chunk).min(npix);
                let mut pts = Vec::with_capacity((end - start) * 2);
                for i in start..end {
                    pts.extend(lattice_point(i % w, i / w, w, h));
                }
                let batch = QueryBatch { points: Tensor::matrix(end - start, 2, pts), times: vec![t; end - start], dirs: None };
                let mut g = Graph::new(&model.params);
                let out = model.eval(&mut g, &batch, config.tau)?;
                image.data[start * 3..end * 3].copy_from_slice(g.value(out.rgb).data());
                decomposition[start * 3..end * 3].copy_from_slice(g.value(out.probs).data());
            }
            Ok(RenderedImage { image, opacity: None, decomposition })
        }
        Mode::Volumetric => {
            let mut opacity = vec![0.0; npix];
            let s = config.samples;
            for start in (0..npix).step_by(chunk) {
                let end = (start + chunk).min(npix);
                let rays = (start..end)
                    .map(|i| generate_ray(camera, ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5), config.near, config.far))
                    .collect::<Result<Vec<_>>>()?;
                let batch = build_ray_batch(&rays, &vec![t; rays.len()], s, config.stratified, |r| pixel_rng(config.seed, start + r, t))?;
                let mut g = Graph::new(&model.params);
                let (color, out, weights) = render_rays(&mut g, model, &batch, config.tau, config.background)?;
                image.data[start * 3..end * 3].copy_from_slice(g.value(color).data());
                let probs = g.value(out.probs).data();
                for r in 0..rays.len() {
                    let ws = &weights[r * s..(r + 1) * s];
                    let total: f64 = ws.iter().sum();
                    opacity[start + r] = total;
                    if total > 0.0 {
                        for c in 0..3 {
                            let acc: f64 = ws.iter().enumerate().map(|(k, wk)| wk * probs[(r * s + k) * 3 + c]).sum();
                            decomposition[(start + r) * 3 + c] = acc / total;
                        }
                    }
                }
            }
            Ok(RenderedImage { image, opacity: Some(opacity), decomposition })
        }
    }
}

/// Color-codes interleaved (static, deform, new) probabilities as
/// red = new, green = deform, blue = static.
pub fn decomposition_colors(width: usize, height: usize, probs: &[f64]) -> Image {
    let data = probs.chunks(3).flat_map(|p| [p[2], p[1], p[0]]).collect();
    Image { width, height, data }
}

/// Renders the color-coded decomposition map at time `t`.
pub fn render_decomposition_map(model: &SceneModel, camera: &Camera, t: f64, config: &RenderConfig) -> Result<Image> {
    let r = render_image(model, camera, t, config)?;
    Ok(decomposition_colors(camera.width, camera.height, &r.decomposition))
}

/// `(1 - amount) * base + amount * layer`, per channel.
pub fn blend(base: &Image, layer: &Image, amount: f64) -> Result<Image> {
    if (base.width, base.height) != (layer.width, layer.height) {
        return Err(RenderError::Invalid(format!(
            "cannot blend {}x{} with {}x{}",
            base.width, base.height, layer.width, layer.height
        )));
    }
    let data = base.data.iter().zip(&layer.data).map(|(a, b)| (1.0 - amount) * a + amount * b).collect();
    Ok(Image { width: base.width, height: base.height, data })
}
