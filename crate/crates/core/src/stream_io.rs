//! The NFPS container: a trained [`SceneModel`] split into a base payload and
//! one chunk per frame holding only the streamed-grid channels that frame
//! introduces. The byte layout is documented in `docs/format.md`.
//!
//! Chunk 0 spans the file prefix (header, manifest and base payload), so the
//! chunk lengths sum to the file size and a client that has fetched every
//! chunk has downloaded exactly the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::feature_grid::{Backbone, GridError, Rate, StreamGrid};
use crate::fields::{Ablation, FieldError, MlpSpec, Mode, ModelConfig, SceneModel};
use crate::grad::{ParamId, ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"NFPS";
pub const VERSION: u16 = 1;
/// Fixed-size prefix: magic, version, dtype, reserved byte, manifest length, T.
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an NFPS stream")]
    BadMagic,
    #[error("unsupported NFPS version {0}")]
    Version(u16),
    #[error("unknown {what} code {code}")]
    BadCode { what: &'static str, code: u64 },
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("manifest checksum mismatch")]
    ManifestChecksum,
    #[error("checksum mismatch in chunk {0}")]
    Checksum(usize),
    #[error("parameter {0} is not finite at the stream precision")]
    NonFinite(String),
    #[error("chunk {0} is out of range")]
    ChunkOutOfRange(usize),
    #[error("chunk {chunk} has {got} bytes, manifest says {expected}")]
    ChunkLength { chunk: usize, expected: u64, got: u64 },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T, E = StreamError> = std::result::Result<T, E>;

/// Scalar encoding of every stored value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Dtype {
    /// Little-endian IEEE binary32; the streaming format.
    F32,
    /// Little-endian IEEE binary64; lossless checkpoints.
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            c => Err(StreamError::BadCode { what: "dtype", code: c as u64 }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// The value as it survives a write/read cycle.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedMlp {
    pub name: String,
    pub sizes: Vec<usize>,
}

/// Where a parameter's base-payload values live. Streamed grids store only
/// their frame-0 channels here.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
    pub streamed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ChunkEntry {
    pub frame: usize,
    pub offset: u64,
    pub length: u64,
    /// CRC-32 of the chunk payload. For chunk 0 it covers the base payload
    /// only; the manifest carries its own checksum.
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamManifest {
    pub version: u16,
    pub dtype: Dtype,
    pub config: ModelConfig,
    pub mlps: Vec<NamedMlp>,
    pub params: Vec<ParamEntry>,
    pub chunks: Vec<ChunkEntry>,
    /// Bytes from the start of the file through the manifest checksum.
    pub manifest_len: u64,
    pub total_bytes: u64,
}

impl StreamManifest {
    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn streamed_grid(&self) -> Result<StreamGrid> {
        Ok(self.config.streamed_grid()?)
    }

    pub fn chunk(&self, i: usize) -> Result<&ChunkEntry> {
        self.chunks.get(i).ok_or(StreamError::ChunkOutOfRange(i))
    }

    /// Byte range of the base payload inside chunk 0.
    pub fn base_payload(&self) -> std::ops::Range<u64> {
        self.manifest_len..self.chunks[0].length
    }
}

/// Bytes chunk `t` (0 < t < T) must contain.
pub fn predicted_chunk_bytes(manifest: &StreamManifest, t: usize) -> Result<u64> {
    let grid = manifest.streamed_grid()?;
    let channels = grid.frame_chunk_channels(t)?.len();
    Ok((channels * grid.channel_len() * manifest.dtype.size() * STREAMED_GRIDS) as u64)
}

/// Total stream size divided by the frame count.
pub fn mean_bitrate(manifest: &StreamManifest) -> f64 {
    manifest.total_bytes as f64 / manifest.frames() as f64
}

const STREAMED_GRIDS: usize = 2;

fn streamed_ids(model: &SceneModel) -> [ParamId; STREAMED_GRIDS] {
    [model.decomposition_grid.id, model.newness_grid.id]
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| StreamError::Invalid(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<()> {
        let n = u8::try_from(s.len()).map_err(|_| StreamError::Invalid(format!("name too long: {s}")))?;
        self.u8(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn scalar(&mut self, dtype: Dtype, v: f64) {
        match dtype {
            Dtype::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => self.f64(v),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| StreamError::Truncated(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| StreamError::Invalid("name is not UTF-8".into()))
    }
}

fn read_scalars(bytes: &[u8], dtype: Dtype, out: &mut [f64]) {
    match dtype {
        Dtype::F32 => {
            for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = f32::from_le_bytes(b.try_into().unwrap()) as f64;
            }
        }
        Dtype::F64 => {
            for (o, b) in out.iter_mut().zip(bytes.chunks_exact(8)) {
                *o = f64::from_le_bytes(b.try_into().unwrap());
            }
        }
    }
}

fn mode_code(m: Mode) -> u8 {
    match m {
        Mode::Volumetric => 0,
        Mode::Direct2d => 1,
    }
}

fn ablation_code(a: Ablation) -> u8 {
    match a {
        Ablation::None => 0,
        Ablation::NoStatic => 1,
        Ablation::NoDeform => 2,
        Ablation::NoNew => 3,
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) -> Result<()> {
    w.u8(mode_code(c.mode));
    match c.backbone {
        Backbone::Dense => {
            w.u8(0);
            w.u32(0);
        }
        Backbone::CpRank(r) => {
            w.u8(1);
            w.usize32(r)?;
        }
    }
    w.u8(ablation_code(c.ablation));
    w.usize32(c.features)?;
    w.u32(c.rate.num());
    w.u32(c.rate.den());
    w.u8(c.grid_dims.len() as u8);
    for &d in c.grid_dims.iter().chain(&c.static_dims) {
        w.usize32(d)?;
    }
    for v in [c.pos_levels, c.deform_time_levels, c.static_time_levels, c.dir_levels] {
        w.usize32(v)?;
    }
    for v in [
        c.decomp_width,
        c.decomp_layers,
        c.static_width,
        c.static_layers,
        c.deform_width,
        c.deform_layers,
        c.radiance_width,
        c.radiance_layers,
    ] {
        w.usize32(v)?;
    }
    w.u8(c.canonical_time.is_some() as u8);
    w.f64(c.canonical_time.unwrap_or(0.0));
    w.f64(c.grid_init);
    w.u64(c.seed);
    Ok(())
}

fn read_config(r: &mut Reader<'_>, frames: usize) -> Result<ModelConfig> {
    let mode = match r.u8()? {
        0 => Mode::Volumetric,
        1 => Mode::Direct2d,
        c => return Err(StreamError::BadCode { what: "mode", code: c as u64 }),
    };
    let backbone = match (r.u8()?, r.usize()?) {
        (0, _) => Backbone::Dense,
        (1, rank) => Backbone::CpRank(rank),
        (c, _) => return Err(StreamError::BadCode { what: "backbone", code: c as u64 }),
    };
    let ablation = match r.u8()? {
        0 => Ablation::None,
        1 => Ablation::NoStatic,
        2 => Ablation::NoDeform,
        3 => Ablation::NoNew,
        c => return Err(StreamError::BadCode { what: "ablation", code: c as u64 }),
    };
    let features = r.usize()?;
    let rate = Rate::new(r.u32()?, r.u32()?)?;
    let ndim = r.u8()? as usize;
    let grid_dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let static_dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let mut next = || r.usize();
    let (pos_levels, deform_time_levels, static_time_levels, dir_levels) = (next()?, next()?, next()?, next()?);
    let (decomp_width, decomp_layers, static_width, static_layers) = (next()?, next()?, next()?, next()?);
    let (deform_width, deform_layers, radiance_width, radiance_layers) = (next()?, next()?, next()?, next()?);
    let has_canonical = r.u8()? != 0;
    let tc = r.f64()?;
    let config = ModelConfig {
        mode,
        grid_dims,
        static_dims,
        features,
        rate,
        frames,
        backbone,
        pos_levels,
        deform_time_levels,
        static_time_levels,
        dir_levels,
        decomp_width,
        decomp_layers,
        static_width,
        static_layers,
        deform_width,
        deform_layers,
        radiance_width,
        radiance_layers,
        ablation,
        grid_init: r.f64()?,
        canonical_time: has_canonical.then_some(tc),
        seed: r.u64()?,
    };
    config.validate()?;
    Ok(config)
}

/// Serializes `model` into a complete NFPS byte stream.
pub fn encode(model: &SceneModel, dtype: Dtype) -> Result<(StreamManifest, Vec<u8>)> {
    let config = &model.config;
    let grid = config.streamed_grid()?;
    let frames = config.frames;
    let streamed = streamed_ids(model);
    for (_, name, t) in model.params.iter() {
        if t.data().iter().any(|&v| !dtype.round(v).is_finite()) {
            return Err(StreamError::NonFinite(name.to_string()));
        }
    }

    // Base payload and chunk payloads first; offsets are fixed up once the
    // manifest length is known.
    let mut base = Writer { buf: Vec::new() };
    let mut entries = Vec::with_capacity(model.params.len());
    for (id, name, t) in model.params.iter() {
        let offset = base.buf.len() as u64;
        let is_streamed = streamed.contains(&id);
        let mut count = 0u64;
        if is_streamed {
            for c in 0..config.features.min(grid.channels()) {
                for i in grid.channel_indices(c) {
                    base.scalar(dtype, t.data()[i]);
                    count += 1;
                }
            }
        } else {
            for &v in t.data() {
                base.scalar(dtype, v);
            }
            count = t.len() as u64;
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            count,
            streamed: is_streamed,
        });
    }
    let mut chunk_payloads = Vec::with_capacity(frames.saturating_sub(1));
    for t in 1..frames {
        let mut w = Writer { buf: Vec::new() };
        for c in grid.frame_chunk_channels(t)? {
            for &id in &streamed {
                let data = model.params.get(id).data();
                for i in grid.channel_indices(c) {
                    w.scalar(dtype, data[i]);
                }
            }
        }
        chunk_payloads.push(w.buf);
    }

    let mlps: Vec<NamedMlp> = config
        .mlp_specs()
        .into_iter()
        .map(|(name, spec)| NamedMlp { name: name.to_string(), sizes: spec.sizes })
        .collect();

    let manifest_body = |manifest_len: u64, chunks: &[ChunkEntry], entries: &[ParamEntry]| -> Result<Vec<u8>> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        w.u8(dtype.code());
        w.u8(0);
        w.u32(manifest_len as u32);
        w.usize32(frames)?;
        write_config(&mut w, config)?;
        w.u8(mlps.len() as u8);
        for m in &mlps {
            w.name(&m.name)?;
            w.u8(m.sizes.len() as u8);
            for &s in &m.sizes {
                w.usize32(s)?;
            }
        }
        w.usize32(entries.len())?;
        for e in entries {
            w.name(&e.name)?;
            w.u8(e.streamed as u8);
            w.u8(e.shape.len() as u8);
            for &s in &e.shape {
                w.usize32(s)?;
            }
            w.u64(manifest_len + e.offset);
            w.u64(e.count);
        }
        for c in chunks {
            w.u64(c.offset);
            w.u64(c.length);
            w.u32(c.crc32);
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    };

    // The manifest size does not depend on the offsets it records.
    let placeholder = vec![
        ChunkEntry {
            frame: 0,
            offset: 0,
            length: 0,
            crc32: 0
        };
        frames
    ];
    let manifest_len = manifest_body(0, &placeholder, &entries)?.len() as u64;

    let mut chunks = Vec::with_capacity(frames);
    let base_end = manifest_len + base.buf.len() as u64;
    chunks.push(ChunkEntry {
        frame: 0,
        offset: 0,
        length: base_end,
        crc32: crc32fast::hash(&base.buf),
    });
    let mut offset = base_end;
    for (i, p) in chunk_payloads.iter().enumerate() {
        chunks.push(ChunkEntry {
            frame: i + 1,
            offset,
            length: p.len() as u64,
            crc32: crc32fast::hash(p),
        });
        offset += p.len() as u64;
    }
    let header = manifest_body(manifest_len, &chunks, &entries)?;
    debug_assert_eq!(header.len() as u64, manifest_len);

    let mut bytes = header;
    bytes.extend_from_slice(&base.buf);
    for p in &chunk_payloads {
        bytes.extend_from_slice(p);
    }
    for e in &mut entries {
        e.offset += manifest_len;
    }
    let manifest = StreamManifest {
        version: VERSION,
        dtype,
        config: config.clone(),
        mlps,
        params: entries,
        chunks,
        manifest_len,
        total_bytes: bytes.len() as u64,
    };
    Ok((manifest, bytes))
}

/// Writes a 32-bit stream.
pub fn pack(model: &SceneModel, path: &Path) -> Result<StreamManifest> {
    pack_with(model, path, Dtype::F32)
}

pub fn pack_with(model: &SceneModel, path: &Path, dtype: Dtype) -> Result<StreamManifest> {
    let (manifest, bytes) = encode(model, dtype)?;
    fs::write(path, bytes)?;
    Ok(manifest)
}

/// Lossless 64-bit save used for training checkpoints.
pub fn save_checkpoint(model: &SceneModel, path: &Path) -> Result<StreamManifest> {
    pack_with(model, path, Dtype::F64)
}

pub fn load_checkpoint(path: &Path) -> Result<SceneModel> {
    unpack(path, None)
}

/// Parses the header and manifest from the start of a stream.
pub fn read_manifest(bytes: &[u8]) -> Result<StreamManifest> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(StreamError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(StreamError::Version(version));
    }
    let dtype = Dtype::from_code(r.u8()?)?;
    r.u8()?;
    let manifest_len = r.u32()? as u64;
    let frames = r.usize()?;
    if (bytes.len() as u64) < manifest_len || manifest_len < HEADER_LEN as u64 + 4 {
        return Err(StreamError::Truncated("manifest".into()));
    }
    let body_end = manifest_len as usize - 4;
    let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(StreamError::ManifestChecksum);
    }
    let config = read_config(&mut r, frames)?;
    let mlps = (0..r.u8()?)
        .map(|_| {
            let name = r.name()?;
            let n = r.u8()? as usize;
            let sizes = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            Ok(NamedMlp { name, sizes })
        })
        .collect::<Result<Vec<_>>>()?;
    let expected: Vec<(&str, MlpSpec)> = config.mlp_specs().into_iter().collect();
    if mlps.len() != expected.len() || mlps.iter().zip(&expected).any(|(m, (n, s))| m.name != *n || m.sizes != s.sizes) {
        return Err(StreamError::Invalid("MLP table disagrees with the model config".into()));
    }
    let nparams = r.usize()?;
    let mut params = Vec::with_capacity(nparams);
    for _ in 0..nparams {
        let name = r.name()?;
        let streamed = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        params.push(ParamEntry { name, streamed, shape, offset: r.u64()?, count: r.u64()? });
    }
    let mut chunks = Vec::with_capacity(frames);
    for frame in 0..frames {
        chunks.push(ChunkEntry { frame, offset: r.u64()?, length: r.u64()?, crc32: r.u32()? });
    }
    if r.pos != body_end {
        return Err(StreamError::Invalid(format!("manifest length {manifest_len} but body ends at {}", r.pos + 4)));
    }
    let manifest = StreamManifest {
        version,
        dtype,
        config,
        mlps,
        params,
        chunks,
        manifest_len,
        total_bytes: 0,
    };
    validate_layout(manifest)
}

fn validate_layout(mut m: StreamManifest) -> Result<StreamManifest> {
    let frames = m.frames();
    if m.chunks.len() != frames || frames == 0 {
        return Err(StreamError::Invalid("chunk count must equal the frame count".into()));
    }
    let c0 = m.chunks[0];
    if c0.offset != 0 || c0.length < m.manifest_len {
        return Err(StreamError::Invalid("chunk 0 must span the header".into()));
    }
    let mut end = c0.length;
    for c in &m.chunks[1..] {
        if c.offset != end {
            return Err(StreamError::Invalid(format!("chunk {} is not contiguous", c.frame)));
        }
        end += c.length;
    }
    let size = m.dtype.size() as u64;
    let mut pos = m.manifest_len;
    for p in &m.params {
        if p.offset != pos {
            return Err(StreamError::Invalid(format!("parameter {} is not contiguous", p.name)));
        }
        pos += p.count * size;
    }
    if pos != c0.length {
        return Err(StreamError::Invalid("parameter table does not fill the base payload".into()));
    }
    for t in 1..frames {
        let want = predicted_chunk_bytes(&m, t)?;
        if m.chunks[t].length != want {
            return Err(StreamError::ChunkLength { chunk: t, expected: want, got: m.chunks[t].length });
        }
    }
    m.total_bytes = end;
    Ok(m)
}

/// Progressive decoder. Holds a renderable model whose streamed channels are
/// filled in as chunks arrive; chunks may arrive in any order but are applied
/// strictly in frame order.
#[derive(Clone, Debug)]
pub struct StreamReader {
    manifest: StreamManifest,
    model: SceneModel,
    grid: StreamGrid,
    streamed: [ParamId; STREAMED_GRIDS],
    loaded: usize,
    pending: BTreeMap<usize, Vec<u8>>,
}

impl StreamReader {
    /// Decodes chunk 0 (the file prefix).
    pub fn from_base(prefix: &[u8]) -> Result<Self> {
        let manifest = read_manifest(prefix)?;
        let c0 = manifest.chunks[0];
        if (prefix.len() as u64) < c0.length {
            return Err(StreamError::Truncated("base payload".into()));
        }
        let base = &prefix[manifest.manifest_len as usize..c0.length as usize];
        if crc32fast::hash(base) != c0.crc32 {
            return Err(StreamError::Checksum(0));
        }
        let mut store = ParamStore::new();
        let grid = manifest.streamed_grid()?;
        for p in &manifest.params {
            let n: usize = p.shape.iter().product();
            let mut data = vec![0.0; n];
            let start = (p.offset - manifest.manifest_len) as usize;
            let bytes = &base[start..start + p.count as usize * manifest.dtype.size()];
            if p.streamed {
                let mut vals = vec![0.0; p.count as usize];
                read_scalars(bytes, manifest.dtype, &mut vals);
                let idx = (0..manifest.config.features.min(grid.channels())).flat_map(|c| grid.channel_indices(c));
                for (i, v) in idx.zip(vals) {
                    data[i] = v;
                }
            } else {
                if p.count as usize != n {
                    return Err(StreamError::Invalid(format!("parameter {} count disagrees with its shape", p.name)));
                }
                read_scalars(bytes, manifest.dtype, &mut data);
            }
            let tensor = Tensor::new(p.shape.clone(), data).map_err(FieldError::from)?;
            store.add(p.name.clone(), tensor);
        }
        let model = SceneModel::with_params(manifest.config.clone(), store)?;
        let streamed = streamed_ids(&model);
        for (id, p) in model.params.ids().zip(&manifest.params) {
            if p.streamed != streamed.contains(&id) {
                return Err(StreamError::Invalid(format!("parameter {} has the wrong streaming flag", p.name)));
            }
        }
        Ok(Self {
            manifest,
            model,
            grid,
            streamed,
            loaded: 0,
            pending: BTreeMap::new(),
        })
    }

    pub fn manifest(&self) -> &StreamManifest {
        &self.manifest
    }

    pub fn model(&self) -> &SceneModel {
        &self.model
    }

    pub fn into_model(self) -> SceneModel {
        self.model
    }

    /// Highest frame whose channels are all present.
    pub fn loaded_frames(&self) -> usize {
        self.loaded
    }

    pub fn is_complete(&self) -> bool {
        self.loaded + 1 == self.manifest.frames()
    }

    /// Verifies and queues chunk `t`, then applies every chunk that is now
    /// contiguous with the loaded prefix. Re-sending a loaded chunk is a no-op.
    pub fn add_chunk(&mut self, t: usize, payload: &[u8]) -> Result<usize> {
        if t == 0 || t >= self.manifest.frames() {
            return Err(StreamError::ChunkOutOfRange(t));
        }
        let entry = self.manifest.chunks[t];
        if payload.len() as u64 != entry.length {
            return Err(StreamError::ChunkLength { chunk: t, expected: entry.length, got: payload.len() as u64 });
        }
        if crc32fast::hash(payload) != entry.crc32 {
            return Err(StreamError::Checksum(t));
        }
        if t > self.loaded {
            self.pending.insert(t, payload.to_vec());
        }
        while let Some(bytes) = self.pending.remove(&(self.loaded + 1)) {
            self.apply(self.loaded + 1, &bytes)?;
            self.loaded += 1;
        }
        Ok(self.loaded)
    }

    fn apply(&mut self, t: usize, bytes: &[u8]) -> Result<()> {
        let dtype = self.manifest.dtype;
        let per_channel = self.grid.channel_len();
        let mut vals = vec![0.0; per_channel];
        let mut at = 0;
        for c in self.grid.frame_chunk_channels(t)? {
            let idx = self.grid.channel_indices(c);
            for &id in &self.streamed {
                let n = per_channel * dtype.size();
                read_scalars(&bytes[at..at + n], dtype, &mut vals);
                at += n;
                let data = self.model.params.get_mut(id).data_mut();
                for (&i, &v) in idx.iter().zip(&vals) {
                    data[i] = v;
                }
            }
        }
        Ok(())
    }

    /// Reads chunks `1..=up_to` from a complete stream held in memory.
    pub fn load_through(&mut self, bytes: &[u8], up_to: usize) -> Result<()> {
        for t in self.loaded + 1..=up_to.min(self.manifest.frames() - 1) {
            let range = chunk_range(&self.manifest, t)?;
            let slice = bytes
                .get(range)
                .ok_or_else(|| StreamError::Truncated(format!("chunk {t}")))?;
            self.add_chunk(t, slice)?;
        }
        Ok(())
    }
}

/// Byte range of chunk `i` within the stream file.
pub fn chunk_range(manifest: &StreamManifest, i: usize) -> Result<std::ops::Range<usize>> {
    let c = manifest.chunk(i)?;
    Ok(c.offset as usize..(c.offset + c.length) as usize)
}

/// Loads a stream, applying chunks through `up_to_frame` (all when `None`).
pub fn unpack(path: &Path, up_to_frame: Option<usize>) -> Result<SceneModel> {
    let bytes = fs::read(path)?;
    unpack_bytes(&bytes, up_to_frame)
}

pub fn unpack_bytes(bytes: &[u8], up_to_frame: Option<usize>) -> Result<SceneModel> {
    let mut reader = StreamReader::from_base(bytes)?;
    let last = reader.manifest().frames() - 1;
    reader.load_through(bytes, up_to_frame.unwrap_or(last))?;
    Ok(reader.into_model())
}

/// The model as a stream of the given precision reproduces it.
pub fn rounded(model: &SceneModel, dtype: Dtype) -> SceneModel {
    let mut m = model.clone();
    let ids: Vec<ParamId> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v = dtype.round(*v);
        }
    }
    m
}
