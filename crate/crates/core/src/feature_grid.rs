//! Spatiotemporal feature grids with a sliding channel window.
//!
//! A grid stores `F + floor(k * (T - 1))` channels per entry. Frame `t` reads
//! the `F` consecutive channels starting at `floor(k * t)`, and global channel
//! `c` always lands in local slot `c % F`, so channels shared by neighbouring
//! frames keep their position in the feature vector.
//!
//! Coordinates are normalized to `[0, 1]^d`; node `i` of an axis with `N`
//! nodes sits at `i / (N - 1)`. Queries outside the unit cube are clamped and
//! counted in [`clamped_queries`].

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{CustomOp, GradError, Graph, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("frame {t} outside [0, {max}]")]
    FrameOutOfRange { t: f64, max: usize },
    #[error("frame 0 is the base payload and has no chunk")]
    BaseFrame,
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("invalid rate {0:?}")]
    BadRate(String),
}

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Number of spatial queries that fell outside `[0, 1]^d` and were clamped.
pub fn clamped_queries() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// New channels per frame, kept as an exact reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rate {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Rate {
    pub fn new(num: u32, den: u32) -> Result<Self, GridError> {
        if den == 0 || num == 0 {
            return Err(GridError::BadRate(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn integer(k: u32) -> Self {
        Self::new(k, 1).expect("k must be positive")
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(k * t)` in exact integer arithmetic.
    pub fn floor_mul(self, t: usize) -> usize {
        (self.num as u64 * t as u64 / self.den as u64) as usize
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rate {
    type Err = GridError;

    /// Accepts `"2"`, `"1/2"` or a terminating decimal such as `"0.25"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::BadRate(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Rate::new(n, d).map_err(|_| bad());
        }
        match s.split_once('.') {
            None => Rate::new(s.parse().map_err(|_| bad())?, 1).map_err(|_| bad()),
            Some((whole, frac)) => {
                if frac.len() > 6 || !frac.chars().all(|c| c.is_ascii_digit()) {
                    return Err(bad());
                }
                let den = 10u32.pow(frac.len() as u32);
                let whole: u32 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
                let frac: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
                Rate::new(whole * den + frac, den).map_err(|_| bad())
            }
        }
    }
}

/// `F + floor(k * (T - 1))`.
pub fn total_channels(features: usize, rate: Rate, frames: usize) -> usize {
    features + rate.floor_mul(frames.saturating_sub(1))
}

/// The `F` global channels used by one frame and their local slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelWindow {
    pub t: usize,
    pub start: usize,
    pub features: usize,
}

impl ChannelWindow {
    pub fn globals(&self) -> Range<usize> {
        self.start..self.start + self.features
    }

    /// Local slot of a global channel.
    pub fn local_of(&self, channel: usize) -> usize {
        channel % self.features
    }

    /// The global channel occupying local slot `slot`.
    pub fn slot_channel(&self, slot: usize) -> usize {
        let f = self.features;
        self.start + (slot + f - self.start % f) % f
    }

    /// Global channel per local slot, e.g. `[4, 5, 2, 3]` for `t=1, k=2, F=4`.
    pub fn slot_channels(&self) -> Vec<usize> {
        (0..self.features).map(|j| self.slot_channel(j)).collect()
    }
}

pub fn channel_window(t: usize, rate: Rate, features: usize, frames: usize) -> Result<ChannelWindow, GridError> {
    if t >= frames {
        return Err(GridError::FrameOutOfRange {
            t: t as f64,
            max: frames.saturating_sub(1),
        });
    }
    Ok(ChannelWindow {
        t,
        start: rate.floor_mul(t),
        features,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    Dense,
    CpRank(usize),
}

/// Layout of a channel-streamed feature grid. Storage lives separately in a
/// flat tensor of [`StreamGrid::storage_len`] values:
///
/// * `Dense`: node-major, `data[node * C + c]`, nodes in x-fastest order.
/// * `CpRank(R)`: channel-major, then rank, then axis; each axis factor is a
///   vector of that axis' extent, so one channel occupies `R * sum(dims)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamGrid {
    pub dims: Vec<usize>,
    pub features: usize,
    pub rate: Rate,
    pub frames: usize,
    pub backbone: Backbone,
}

/// Per-axis linear interpolation coordinates for one query point.
#[derive(Clone, Copy, Debug)]
struct AxisInterp {
    i0: usize,
    frac: f64,
    /// d(grid coordinate)/d(p); zero where the query was clamped.
    scale: f64,
}

/// Fractional-frame blend: `(1 - w) * frame(lo) + w * frame(hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMix {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

impl StreamGrid {
    pub fn new(dims: Vec<usize>, features: usize, rate: Rate, frames: usize, backbone: Backbone) -> Result<Self, GridError> {
        if !(2..=3).contains(&dims.len()) {
            return Err(GridError::Invalid(format!("need 2 or 3 axes, got {}", dims.len())));
        }
        if dims.iter().any(|&n| n < 2) {
            return Err(GridError::Invalid(format!("every axis needs >= 2 nodes: {dims:?}")));
        }
        if features == 0 || frames == 0 {
            return Err(GridError::Invalid("features and frames must be >= 1".into()));
        }
        if backbone == Backbone::CpRank(0) {
            return Err(GridError::Invalid("CP rank must be >= 1".into()));
        }
        Ok(Self {
            dims,
            features,
            rate,
            frames,
            backbone,
        })
    }

    /// A grid whose single window is channels `0..F`.
    pub fn static_grid(dims: Vec<usize>, features: usize, backbone: Backbone) -> Result<Self, GridError> {
        Self::new(dims, features, Rate::integer(1), 1, backbone)
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn channels(&self) -> usize {
        total_channels(self.features, self.rate, self.frames)
    }

    pub fn nodes(&self) -> usize {
        self.dims.iter().product()
    }

    /// Stored scalars for one channel.
    pub fn channel_len(&self) -> usize {
        match self.backbone {
            Backbone::Dense => self.nodes(),
            Backbone::CpRank(r) => r * self.dims.iter().sum::<usize>(),
        }
    }

    pub fn storage_len(&self) -> usize {
        self.channels() * self.channel_len()
    }

    pub fn window(&self, t: usize) -> Result<ChannelWindow, GridError> {
        channel_window(t, self.rate, self.features, self.frames)
    }

    /// Global channels that frame `t` needs and frame `t - 1` did not.
    pub fn frame_chunk_channels(&self, t: usize) -> Result<Range<usize>, GridError> {
        if t == 0 {
            return Err(GridError::BaseFrame);
        }
        if t >= self.frames {
            return Err(GridError::FrameOutOfRange {
                t: t as f64,
                max: self.frames - 1,
            });
        }
        let prev_end = self.rate.floor_mul(t - 1) + self.features;
        let end = self.rate.floor_mul(t) + self.features;
        Ok(prev_end..end)
    }

    /// Positions in storage that hold channel `c`, in a fixed order.
    pub fn channel_indices(&self, c: usize) -> Vec<usize> {
        match self.backbone {
            Backbone::Dense => {
                let ch = self.channels();
                (0..self.nodes()).map(|n| n * ch + c).collect()
            }
            Backbone::CpRank(_) => {
                let len = self.channel_len();
                (c * len..(c + 1) * len).collect()
            }
        }
    }

    pub fn frame_mix(&self, t: f64) -> Result<FrameMix, GridError> {
        let max = self.frames - 1;
        if !(t >= 0.0 && t <= max as f64) {
            return Err(GridError::FrameOutOfRange { t, max });
        }
        let lo = t.floor() as usize;
        let w = t - lo as f64;
        if w == 0.0 || lo >= max {
            Ok(FrameMix { lo: lo.min(max), hi: lo.min(max), w: 0.0 })
        } else {
            Ok(FrameMix { lo, hi: lo + 1, w })
        }
    }

    fn interp(&self, p: &[f64]) -> [AxisInterp; 3] {
        let mut out = [AxisInterp { i0: 0, frac: 0.0, scale: 0.0 }; 3];
        let mut clamped = false;
        for (a, &n) in self.dims.iter().enumerate() {
            let mut x = p[a];
            let inside = (0.0..=1.0).contains(&x);
            if !inside {
                clamped = true;
                x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            }
            let g = x * (n - 1) as f64;
            let i0 = (g.floor() as usize).min(n - 2);
            out[a] = AxisInterp {
                i0,
                frac: g - i0 as f64,
                scale: if inside { (n - 1) as f64 } else { 0.0 },
            };
        }
        if clamped {
            CLAMPED.fetch_add(1, Ordering::Relaxed);
        }
        out
    }

    /// Corner node indices and multilinear weights.
    fn corners(&self, ax: &[AxisInterp; 3]) -> ([usize; 8], [f64; 8], usize) {
        let d = self.ndim();
        let mut nodes = [0usize; 8];
        let mut weights = [0f64; 8];
        let count = 1 << d;
        for corner in 0..count {
            let mut node = 0;
            let mut stride = 1;
            let mut w = 1.0;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                node += (ax[a].i0 + bit) * stride;
                stride *= self.dims[a];
                w *= if bit == 1 { ax[a].frac } else { 1.0 - ax[a].frac };
            }
            nodes[corner] = node;
            weights[corner] = w;
        }
        (nodes, weights, count)
    }

    fn channel_value(&self, storage: &[f64], ax: &[AxisInterp; 3], corners: &([usize; 8], [f64; 8], usize), c: usize) -> f64 {
        match self.backbone {
            Backbone::Dense => {
                let ch = self.channels();
                let (nodes, weights, count) = corners;
                (0..*count).map(|k| weights[k] * storage[nodes[k] * ch + c]).sum()
            }
            Backbone::CpRank(rank) => {
                let len = self.channel_len();
                let sum_dims: usize = self.dims.iter().sum();
                let base = c * len;
                let mut total = 0.0;
                for r in 0..rank {
                    let mut prod = 1.0;
                    let mut off = base + r * sum_dims;
                    for (a, &n) in self.dims.iter().enumerate() {
                        let f = &storage[off..off + n];
                        prod *= f[ax[a].i0] * (1.0 - ax[a].frac) + f[ax[a].i0 + 1] * ax[a].frac;
                        off += n;
                    }
                    total += prod;
                }
                total
            }
        }
    }

    fn check_storage(&self, storage: &[f64]) {
        assert_eq!(storage.len(), self.storage_len(), "grid storage length");
    }

    /// Interpolates the window's channels at `p`, ordered by local slot.
    pub fn sample_spatial(&self, storage: &[f64], p: &[f64], window: &ChannelWindow) -> Vec<f64> {
        self.check_storage(storage);
        let ax = self.interp(p);
        let corners = self.corners(&ax);
        window
            .slot_channels()
            .into_iter()
            .map(|c| self.channel_value(storage, &ax, &corners, c))
            .collect()
    }

    /// Feature at continuous time `t`: the frame window for integer `t`,
    /// otherwise the linear blend of the two neighbouring frames in slot space.
    pub fn sample_spacetime(&self, storage: &[f64], p: &[f64], t: f64) -> Result<Vec<f64>, GridError> {
        let mix = self.frame_mix(t)?;
        self.check_storage(storage);
        let ax = self.interp(p);
        let corners = self.corners(&ax);
        let mut out = vec![0.0; self.features];
        self.mixed_features(storage, &ax, &corners, mix, &mut out);
        Ok(out)
    }

    fn mixed_features(
        &self,
        storage: &[f64],
        ax: &[AxisInterp; 3],
        corners: &([usize; 8], [f64; 8], usize),
        mix: FrameMix,
        out: &mut [f64],
    ) {
        let lo = ChannelWindow { t: mix.lo, start: self.rate.floor_mul(mix.lo), features: self.features };
        let hi = ChannelWindow { t: mix.hi, start: self.rate.floor_mul(mix.hi), features: self.features };
        for (j, o) in out.iter_mut().enumerate() {
            let c_lo = lo.slot_channel(j);
            let v_lo = self.channel_value(storage, ax, corners, c_lo);
            *o = if mix.w == 0.0 {
                v_lo
            } else {
                let c_hi = hi.slot_channel(j);
                let v_hi = if c_hi == c_lo { v_lo } else { self.channel_value(storage, ax, corners, c_hi) };
                mix.w * v_hi + (1.0 - mix.w) * v_lo
            };
        }
    }

    /// Samples a batch of points (`n x d`) at per-point times and records the
    /// result in `graph`, differentiable with respect to both the storage and
    /// the points.
    pub fn sample_batch(&self, graph: &mut Graph<'_>, storage: Var, points: Var, times: &[f64]) -> Result<Var, GradError> {
        let invalid = |msg: String| GradError::Invalid { op: "grid_sample", msg };
        let ts = graph.value(storage);
        if ts.len() != self.storage_len() {
            return Err(GradError::ShapeMismatch {
                op: "grid_sample",
                lhs: vec![self.storage_len()],
                rhs: ts.shape().to_vec(),
            });
        }
        let tp = graph.value(points);
        let d = self.ndim();
        if tp.shape().len() != 2 || tp.shape()[1] != d || tp.rows() != times.len() {
            return Err(GradError::ShapeMismatch {
                op: "grid_sample",
                lhs: vec![times.len(), d],
                rhs: tp.shape().to_vec(),
            });
        }
        let mixes = times
            .iter()
            .map(|&t| self.frame_mix(t).map_err(|e| invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let n = times.len();
        let f = self.features;
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let ax = self.interp(tp.row(i));
            let corners = self.corners(&ax);
            self.mixed_features(ts.data(), &ax, &corners, mixes[i], &mut out[i * f..(i + 1) * f]);
        }
        let op = GridSampleOp { grid: self.clone(), mixes };
        Ok(graph.custom(Box::new(op), &[storage, points], Tensor::matrix(n, f, out)))
    }

    /// Adds `scale * d(value of channel c)/d(storage)` into `grad`, and returns
    /// `d(value)/d(p)` per axis.
    fn channel_backward(
        &self,
        storage: &[f64],
        ax: &[AxisInterp; 3],
        corners: &([usize; 8], [f64; 8], usize),
        c: usize,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> [f64; 3] {
        let d = self.ndim();
        let mut dp = [0.0; 3];
        match self.backbone {
            Backbone::Dense => {
                let ch = self.channels();
                let (nodes, weights, count) = corners;
                if let Some(grad) = grad {
                    for k in 0..*count {
                        grad[nodes[k] * ch + c] += scale * weights[k];
                    }
                }
                for a in 0..d {
                    if ax[a].scale == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for k in 0..*count {
                        let mut w = 1.0;
                        for b in 0..d {
                            let bit = (k >> b) & 1;
                            w *= if b == a {
                                if bit == 1 { 1.0 } else { -1.0 }
                            } else if bit == 1 {
                                ax[b].frac
                            } else {
                                1.0 - ax[b].frac
                            };
                        }
                        acc += w * storage[nodes[k] * ch + c];
                    }
                    dp[a] = scale * acc * ax[a].scale;
                }
            }
            Backbone::CpRank(rank) => {
                let len = self.channel_len();
                let sum_dims: usize = self.dims.iter().sum();
                let mut grad = grad;
                for r in 0..rank {
                    let off0 = c * len + r * sum_dims;
                    let mut lerps = [1.0; 3];
                    let mut slopes = [0.0; 3];
                    let mut offs = [0usize; 3];
                    let mut off = off0;
                    for (a, &n) in self.dims.iter().enumerate() {
                        let f0 = storage[off + ax[a].i0];
                        let f1 = storage[off + ax[a].i0 + 1];
                        lerps[a] = f0 * (1.0 - ax[a].frac) + f1 * ax[a].frac;
                        slopes[a] = f1 - f0;
                        offs[a] = off;
                        off += n;
                    }
                    for a in 0..d {
                        let others: f64 = (0..d).filter(|&b| b != a).map(|b| lerps[b]).product();
                        if let Some(g) = grad.as_deref_mut() {
                            g[offs[a] + ax[a].i0] += scale * others * (1.0 - ax[a].frac);
                            g[offs[a] + ax[a].i0 + 1] += scale * others * ax[a].frac;
                        }
                        dp[a] += scale * others * slopes[a] * ax[a].scale;
                    }
                }
            }
        }
        dp
    }
}

struct GridSampleOp {
    grid: StreamGrid,
    mixes: Vec<FrameMix>,
}

impl CustomOp for GridSampleOp {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor, needs_grad: &[bool]) -> Result<Vec<Option<Tensor>>, GradError> {
        let grid = &self.grid;
        let (storage, points) = (inputs[0], inputs[1]);
        let f = grid.features;
        let d = grid.ndim();
        let mut g_storage = needs_grad[0].then(|| vec![0.0; storage.len()]);
        let mut g_points = needs_grad[1].then(|| vec![0.0; points.len()]);
        for (i, mix) in self.mixes.iter().enumerate() {
            let go = &grad_output.data()[i * f..(i + 1) * f];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            let ax = grid.interp_quiet(points.row(i));
            let corners = grid.corners(&ax);
            let lo = ChannelWindow { t: mix.lo, start: grid.rate.floor_mul(mix.lo), features: f };
            let hi = ChannelWindow { t: mix.hi, start: grid.rate.floor_mul(mix.hi), features: f };
            for (j, &gj) in go.iter().enumerate() {
                let c_lo = lo.slot_channel(j);
                let c_hi = hi.slot_channel(j);
                let parts: [(usize, f64); 2] = if mix.w == 0.0 || c_lo == c_hi {
                    [(c_lo, 1.0), (c_lo, 0.0)]
                } else {
                    [(c_lo, 1.0 - mix.w), (c_hi, mix.w)]
                };
                for (c, wt) in parts {
                    if wt == 0.0 {
                        continue;
                    }
                    let dp = grid.channel_backward(storage.data(), &ax, &corners, c, gj * wt, g_storage.as_deref_mut());
                    if let Some(gp) = g_points.as_mut() {
                        for a in 0..d {
                            gp[i * d + a] += dp[a];
                        }
                    }
                }
            }
        }
        Ok(vec![
            g_storage.map(|g| Tensor::new(storage.shape().to_vec(), g).expect("storage shape")),
            g_points.map(|g| Tensor::new(points.shape().to_vec(), g).expect("points shape")),
        ])
    }
}

impl StreamGrid {
    fn interp_quiet(&self, p: &[f64]) -> [AxisInterp; 3] {
        let before = CLAMPED.load(Ordering::Relaxed);
        let ax = self.interp(p);
        // Backward revisits forward queries; only count each clamp once.
        if CLAMPED.load(Ordering::Relaxed) != before {
            CLAMPED.fetch_sub(1, Ordering::Relaxed);
        }
        ax
    }
}
