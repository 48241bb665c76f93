//! Synthetic multi-modal face-video corpus, the raw-frame video container and
//! frame preprocessing.
//!
//! # Container
//!
//! All integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `SDVF` |
//! | 4 | 2 | version, `1` |
//! | 6 | 1 | modality tag, ASCII `R`, `D` or `I` |
//! | 7 | 1 | payload type: `0` = u8, `1` = f64 |
//! | 8 | 4 | width |
//! | 12 | 4 | height |
//! | 16 | 4 | channels |
//! | 20 | 4 | frame count |
//! | 24 | … | frames in order, each `height × width × channels` interleaved |
//!
//! The file must end exactly after the payload.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::dynimg::FrameSequence;
use crate::kv::{KvError, KvMap};
use crate::protocols::{write_manifest, AttackType, Collection, Ethnicity, ManifestEntry, ProtocolError};
use crate::Modality;

pub const MAGIC: &[u8; 4] = b"SDVF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a video container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("unknown modality tag {0:#04x}")]
    ModalityTag(u8),
    #[error("unknown payload type {0}")]
    PayloadType(u8),
    #[error("truncated container: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload")]
    Trailing,
    #[error("bad dimensions: {0}")]
    Dimensions(String),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    U8,
    F64,
}

impl Payload {
    fn code(self) -> u8 {
        match self {
            Payload::U8 => 0,
            Payload::F64 => 1,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Payload::U8 => 1,
            Payload::F64 => 8,
        }
    }

    /// Largest representable intensity.
    pub fn full_scale(self) -> f64 {
        match self {
            Payload::U8 => 255.0,
            Payload::F64 => 1.0,
        }
    }
}

/// Decoded container; frames are `[C, H, W]` in payload units.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub modality: Modality,
    pub payload: Payload,
    pub frames: Vec<Tensor>,
}

impl Video {
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(|f| (f.shape()[0], f.shape()[1], f.shape()[2]))
    }

    pub fn into_sequence(self) -> FrameSequence {
        FrameSequence::new(self.frames, self.modality)
    }
}

pub fn write_video<W: Write>(mut out: W, video: &Video) -> Result<(), DataError> {
    let (c, h, w) = video
        .dims()
        .ok_or_else(|| DataError::Dimensions("video has no frames".into()))?;
    if video.frames.iter().any(|f| f.shape() != [c, h, w]) {
        return Err(DataError::Dimensions("frames differ in shape".into()));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[video.modality.tag() as u8, video.payload.code()])?;
    for v in [w, h, c, video.frames.len()] {
        let v = u32::try_from(v).map_err(|_| DataError::Dimensions(format!("{v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(c * h * w * video.payload.bytes());
    for f in &video.frames {
        buf.clear();
        let d = f.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = d[(ch * h + y) * w + x];
                    match video.payload {
                        Payload::U8 => buf.push(v.round().clamp(0.0, 255.0) as u8),
                        Payload::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_video<R: Read>(mut input: R) -> Result<Video, DataError> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_fully(&mut input, &mut head)?;
    if got < 4 || &head[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if got < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: got,
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let modality = Modality::from_tag(head[6] as char)
        .filter(|_| head[6].is_ascii_uppercase())
        .ok_or(DataError::ModalityTag(head[6]))?;
    let payload = match head[7] {
        0 => Payload::U8,
        1 => Payload::F64,
        p => return Err(DataError::PayloadType(p)),
    };
    let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, c, n) = (u(8), u(12), u(16), u(20));
    if w == 0 || h == 0 || c == 0 || n == 0 {
        return Err(DataError::Dimensions(format!("{w}x{h}x{c}, {n} frames")));
    }
    let frame_bytes = w * h * c * payload.bytes();
    let expected = frame_bytes
        .checked_mul(n)
        .ok_or_else(|| DataError::Dimensions("payload size overflows".into()))?;
    let mut raw = vec![0u8; frame_bytes];
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let got = read_fully(&mut input, &mut raw)?;
        if got < frame_bytes {
            return Err(DataError::Truncated {
                expected,
                found: i * frame_bytes + got,
            });
        }
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let k = (y * w + x) * c + ch;
                    data[(ch * h + y) * w + x] = match payload {
                        Payload::U8 => raw[k] as f64,
                        Payload::F64 => f64::from_le_bytes(raw[8 * k..8 * k + 8].try_into().expect("8 bytes")),
                    };
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data).map_err(|e| DataError::Dimensions(e.to_string()))?);
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(DataError::Trailing);
    }
    Ok(Video {
        modality,
        payload,
        frames,
    })
}

fn read_fully<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn file_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_video(path: impl AsRef<Path>, video: &Video) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(file_err(path))?;
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(file_err(path))?);
    write_video(&mut out, video)?;
    out.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn read_video_file(path: impl AsRef<Path>) -> Result<Video, DataError> {
    let path = path.as_ref();
    read_video(BufReader::new(fs::File::open(path).map_err(file_err(path))?))
}

/// Frames of a container in payload units, tagged with the header modality.
pub fn load_video(path: impl AsRef<Path>) -> Result<FrameSequence, DataError> {
    Ok(read_video_file(path)?.into_sequence())
}

/// Loads a container and preprocesses every frame to `size × size`.
pub fn load_preprocessed(path: impl AsRef<Path>, size: usize) -> Result<FrameSequence, DataError> {
    let video = read_video_file(path)?;
    let frames = video
        .frames
        .iter()
        .map(|f| preprocess(f, video.payload, size))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameSequence::new(frames, video.modality))
}

/// Bilinear resize to `size × size` (half-pixel centres, edge clamped), then
/// scaling to `[0, 1]`.
pub fn preprocess(frame: &Tensor, payload: Payload, size: usize) -> Result<Tensor, DataError> {
    if frame.rank() != 3 || size == 0 {
        return Err(DataError::Dimensions(format!("cannot resize {:?} to {size}", frame.shape())));
    }
    let resized = resize_bilinear(frame, size, size);
    let scale = payload.full_scale();
    Ok(resized.map(|v| (v / scale).clamp(0.0, 1.0)))
}

pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return frame.clone();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let d = frame.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
}

/// Generator settings. Frames are square; clips hold at least `window`
/// frames so every trailing rank-pool window is filled by real frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects_per_ethnicity: u32,
    pub clip_len: usize,
    pub frame_size: usize,
    pub seed: u64,
    pub window: usize,
    /// Head-motion amplitude of bona fide clips, as a fraction of the frame.
    pub motion_amplitude: f64,
    /// Frames per replay flicker cycle.
    pub flicker_period: usize,
    pub flicker_amplitude: f64,
    /// Fixed-pattern sensor noise (frozen over time).
    pub noise: f64,
    /// Depth of print and replay media rendered as a constant plane.
    pub planar_attack_depth: bool,
    pub subjects_3d: u32,
    pub samples_3d: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects_per_ethnicity: 60,
            clip_len: 12,
            frame_size: 32,
            seed: 0,
            window: 7,
            motion_amplitude: 0.08,
            flicker_period: 4,
            flicker_amplitude: 0.25,
            noise: 0.01,
            planar_attack_depth: true,
            subjects_3d: 0,
            samples_3d: 10,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "subjects",
    "clip_len",
    "frame_size",
    "seed",
    "window",
    "motion",
    "flicker_period",
    "flicker_amp",
    "noise",
    "planar_attack_depth",
    "subjects_3d",
    "samples_3d",
];

impl SynthConfig {
    /// Full-size layout: 500 subjects per ethnicity, and a 3D collection of
    /// 1000 recordings per modality.
    pub fn canonical() -> Self {
        Self {
            subjects_per_ethnicity: 500,
            subjects_3d: 100,
            samples_3d: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.subjects_per_ethnicity < 5 {
            return bad("need at least 5 subjects per ethnicity");
        }
        if self.window < 2 || self.clip_len < self.window {
            return bad("clip length must be at least the rank-pool window (>= 2)");
        }
        if self.frame_size < 8 {
            return bad("frame size must be at least 8");
        }
        if self.flicker_period < 2 {
            return bad("flicker period must be at least 2 frames");
        }
        for (name, v) in [
            ("motion", self.motion_amplitude),
            ("flicker_amp", self.flicker_amplitude),
            ("noise", self.noise),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(DataError::Config(format!("{name} must lie in [0, 0.5]")));
            }
        }
        if self.subjects_3d > 0 && self.samples_3d < 2 {
            return bad("3D subjects need at least 2 samples");
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        SYNTH_KEYS
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), DataError> {
        kv.update("subjects", &mut self.subjects_per_ethnicity)?;
        kv.update("clip_len", &mut self.clip_len)?;
        kv.update("frame_size", &mut self.frame_size)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("window", &mut self.window)?;
        kv.update("motion", &mut self.motion_amplitude)?;
        kv.update("flicker_period", &mut self.flicker_period)?;
        kv.update("flicker_amp", &mut self.flicker_amplitude)?;
        kv.update("noise", &mut self.noise)?;
        kv.update("planar_attack_depth", &mut self.planar_attack_depth)?;
        kv.update("subjects_3d", &mut self.subjects_3d)?;
        kv.update("samples_3d", &mut self.samples_3d)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("subjects", self.subjects_per_ethnicity);
        kv.set("clip_len", self.clip_len);
        kv.set("frame_size", self.frame_size);
        kv.set("seed", self.seed);
        kv.set("window", self.window);
        kv.set("motion", self.motion_amplitude);
        kv.set("flicker_period", self.flicker_period);
        kv.set("flicker_amp", self.flicker_amplitude);
        kv.set("noise", self.noise);
        kv.set("planar_attack_depth", self.planar_attack_depth);
        kv.set("subjects_3d", self.subjects_3d);
        kv.set("samples_3d", self.samples_3d);
        kv
    }
}

const SAMPLES_2D: [AttackType; 4] = [
    AttackType::Real,
    AttackType::PrintIndoor,
    AttackType::PrintOutdoor,
    AttackType::Replay,
];

/// Manifest of the corpus `cfg` describes, without rendering anything.
pub fn synth_manifest(cfg: &SynthConfig) -> Vec<ManifestEntry> {
    let mut out = Vec::new();
    for eth in Ethnicity::ALL {
        for id in 1..=cfg.subjects_per_ethnicity {
            for (sample, attack) in SAMPLES_2D.into_iter().enumerate() {
                for m in Modality::ALL {
                    out.push(ManifestEntry {
                        subject_id: id,
                        ethnicity: Some(eth),
                        modality: m,
                        attack_type: attack,
                        collection: Collection::TwoD,
                        sample: sample as u32,
                        path: format!("2d/{eth}/{id:04}/{sample}_{attack}_{}.sdvf", m.tag()),
                    });
                }
            }
        }
    }
    for id in 1..=cfg.subjects_3d {
        for sample in 0..cfg.samples_3d {
            // the last two recordings of each 3D subject are silica-gel masks
            let attack = if sample + 2 >= cfg.samples_3d {
                AttackType::Silicagel
            } else {
                AttackType::Mask3d
            };
            for m in Modality::ALL {
                out.push(ManifestEntry {
                    subject_id: id,
                    ethnicity: None,
                    modality: m,
                    attack_type: attack,
                    collection: Collection::ThreeD,
                    sample,
                    path: format!("3d/{id:04}/{sample}_{attack}_{}.sdvf", m.tag()),
                });
            }
        }
    }
    out
}

/// Per-recording random scene shared by its three modalities.
struct Scene {
    tone: [f64; 3],
    waves: [(f64, f64, f64, f64); 3],
    phase: (f64, f64),
    period: f64,
    pattern: Vec<f64>,
}

fn recording_seed(cfg_seed: u64, e: &ManifestEntry) -> (u64, u64) {
    let eth = e.ethnicity.map_or(3, |x| x as u64);
    let coll = match e.collection {
        Collection::TwoD => 0,
        Collection::ThreeD => 1,
    };
    let stream = (((coll << 2 | eth) << 32 | e.subject_id as u64) << 16) | e.sample as u64;
    (cfg_seed, stream)
}

fn scene(cfg: &SynthConfig, e: &ManifestEntry) -> Scene {
    let (seed, stream) = recording_seed(cfg.seed, e);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let base = match e.ethnicity {
        Some(Ethnicity::A) => 0.35,
        Some(Ethnicity::C) => 0.55,
        Some(Ethnicity::E) => 0.65,
        None => 0.5,
    } + rng.gen_range(-0.05..0.05);
    let tone = [base * 1.05, base * 0.85, base * 0.75];
    let mut wave = || {
        (
            rng.gen_range(4.0..10.0),
            rng.gen_range(4.0..10.0),
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.03..0.08),
        )
    };
    let waves = [wave(), wave(), wave()];
    let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let period = rng.gen_range(8.0..14.0);
    let n = cfg.frame_size * cfg.frame_size;
    let pattern = (0..n).map(|_| rng.gen_range(-1.0..1.0) * cfg.noise).collect();
    Scene {
        tone,
        waves,
        phase,
        period,
        pattern,
    }
}

struct Pose {
    cx: f64,
    cy: f64,
}

impl Scene {
    fn pose(&self, cfg: &SynthConfig, t: usize, moving: bool) -> Pose {
        let s = cfg.frame_size as f64;
        if !moving {
            return Pose { cx: s / 2.0, cy: s / 2.0 };
        }
        let a = cfg.motion_amplitude * s;
        let w = 2.0 * PI * t as f64 / self.period;
        Pose {
            cx: s / 2.0 + a * (w + self.phase.0).sin(),
            cy: s / 2.0 + 0.5 * a * (w + self.phase.1).sin(),
        }
    }

    /// Face colour at face-local normalized coordinates, `None` off the face.
    fn face_rgb(&self, u: f64, v: f64, textured: bool) -> Option<[f64; 3]> {
        let rho2 = u * u + v * v;
        if rho2 > 1.0 {
            return None;
        }
        let mut tex = 0.0;
        if textured {
            for &(fu, fv, ph, amp) in &self.waves {
                tex += amp * (fu * u + fv * v + ph).sin();
            }
            for ex in [-0.35, 0.35] {
                if (u - ex).powi(2) + (v + 0.2).powi(2) < 0.012 {
                    tex -= 0.25;
                }
            }
        }
        Some(self.tone.map(|c| c + tex))
    }
}

fn render_frame(cfg: &SynthConfig, sc: &Scene, e: &ManifestEntry, t: usize) -> Tensor {
    let s = cfg.frame_size;
    let sf = s as f64;
    let radius = 0.3 * sf;
    let background = 0.2;
    let real = e.attack_type == AttackType::Real;
    let three_d = e.attack_type.is_3d();
    let pose = sc.pose(cfg, t, real || three_d);
    let flicker = if e.attack_type == AttackType::Replay {
        1.0 + cfg.flicker_amplitude * (2.0 * PI * t as f64 / cfg.flicker_period as f64).sin()
    } else {
        1.0
    };
    let medium = 1.3 * radius;
    let channels = e.modality.channels();
    let mut out = vec![0.0; channels * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = ((px - pose.cx) / radius, (py - pose.cy) / radius);
            let on_medium = !real && !three_d && (px - sf / 2.0).abs() < medium && (py - sf / 2.0).abs() < medium;
            let rgb = match sc.face_rgb(u, v, !three_d) {
                Some(c) => c,
                None if on_medium => [0.8, 0.8, 0.8],
                None => [background; 3],
            };
            let rgb = rgb.map(|c| c * flicker);
            let noise = sc.pattern[y * s + x];
            let k = y * s + x;
            match e.modality {
                Modality::Color => {
                    for ch in 0..3 {
                        out[ch * s * s + k] = rgb[ch] + noise;
                    }
                }
                Modality::Ir => {
                    out[k] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2] + noise;
                }
                Modality::Depth => {
                    let rho2 = u * u + v * v;
                    out[k] = if (real || three_d || !cfg.planar_attack_depth) && rho2 <= 1.0 {
                        0.4 + 0.5 * (1.0 - rho2).sqrt()
                    } else if on_medium {
                        0.5
                    } else {
                        0.1
                    } + noise;
                }
            }
        }
    }
    let data = out.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()).collect();
    Tensor::new(vec![channels, s, s], data).expect("frame shape")
}

/// Renders one manifest entry as an 8-bit clip.
pub fn render_clip(cfg: &SynthConfig, entry: &ManifestEntry) -> Video {
    let sc = scene(cfg, entry);
    let frames = (0..cfg.clip_len).map(|t| render_frame(cfg, &sc, entry, t)).collect();
    Video {
        modality: entry.modality,
        payload: Payload::U8,
        frames,
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes the manifest and, unless `manifest_only`, every clip under `out`.
/// Clips are rendered in parallel; each depends only on its own seed.
pub fn synth_dataset(
    cfg: &SynthConfig,
    out: &Path,
    manifest_only: bool,
    comment: Option<&str>,
) -> Result<Vec<ManifestEntry>, DataError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(file_err(out))?;
    let entries = synth_manifest(cfg);
    if !manifest_only {
        entries
            .par_iter()
            .try_for_each(|e| save_video(out.join(&e.path), &render_clip(cfg, e)))?;
    }
    let path = out.join(MANIFEST_FILE);
    let mut w = BufWriter::new(fs::File::create(&path).map_err(file_err(&path))?);
    write_manifest(&mut w, &entries, comment)?;
    w.flush().map_err(file_err(&path))?;
    Ok(entries)
}

/// Hand-crafted liveness features of a clip: mean temporal variance of the
/// pixels and spatial standard deviation of the central region of the first
/// frame (meaningful for depth clips).
pub fn clip_features(video: &Video) -> (f64, f64) {
    let n = video.frames.len() as f64;
    let len = video.frames[0].len();
    let mut tv = 0.0;
    for i in 0..len {
        let mean = video.frames.iter().map(|f| f.data()[i]).sum::<f64>() / n;
        tv += video.frames.iter().map(|f| (f.data()[i] - mean).powi(2)).sum::<f64>() / n;
    }
    tv /= len as f64;

    let f = &video.frames[0];
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let (lo_y, hi_y, lo_x, hi_x) = (3 * h / 10, 7 * h / 10, 3 * w / 10, 7 * w / 10);
    let vals: Vec<f64> = (lo_y..hi_y)
        .flat_map(|y| (lo_x..hi_x).map(move |x| (y, x)))
        .map(|(y, x)| f.data()[y * w + x])
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    (tv, sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects_per_ethnicity: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn manifest_counts() {
        let m = synth_manifest(&SynthConfig::canonical());
        let two_d = m.iter().filter(|e| e.collection == Collection::TwoD).count();
        assert_eq!(two_d, 18000);
        assert_eq!(m.iter().filter(|e| e.modality == Modality::Ir && e.collection == Collection::TwoD).count(), 6000);
        assert_eq!(m.len() - two_d, 3000);
    }

    #[test]
    fn container_round_trip_and_truncation() {
        let cfg = small();
        let e = &synth_manifest(&cfg)[0];
        let v = render_clip(&cfg, e);
        let mut buf = Vec::new();
        write_video(&mut buf, &v).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf.len(), HEADER_LEN + cfg.clip_len * 3 * 32 * 32);
        assert_eq!(read_video(buf.as_slice()).unwrap(), v);
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_video(cut), Err(DataError::Truncated { .. })));
        buf.push(0);
        assert!(matches!(read_video(buf.as_slice()), Err(DataError::Trailing)));
    }

    #[test]
    fn f64_payload_round_trip_and_depth_tag() {
        let frames = vec![Tensor::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(); 2];
        let v = Video {
            modality: Modality::Depth,
            payload: Payload::F64,
            frames,
        };
        let mut buf = Vec::new();
        write_video(&mut buf, &v).unwrap();
        let back = read_video(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.into_sequence().modality, Modality::Depth);
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(read_video(&b"NOPE"[..]), Err(DataError::BadMagic)));
        let mut buf = Vec::new();
        let v = Video {
            modality: Modality::Ir,
            payload: Payload::U8,
            frames: vec![Tensor::zeros(&[1, 1, 1])],
        };
        write_video(&mut buf, &v).unwrap();
        buf[6] = b'Q';
        assert!(matches!(read_video(buf.as_slice()), Err(DataError::ModalityTag(b'Q'))));
    }

    #[test]
    fn preprocess_examples() {
        let f = Tensor::filled(&[1, 112, 112], 255.0);
        let p = preprocess(&f, Payload::U8, 112).unwrap();
        assert_eq!(p.shape(), &[1, 112, 112]);
        assert!(p.data().iter().all(|&v| v == 1.0));

        let n = 224;
        let data = (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect();
        let board = Tensor::new(vec![1, n, n], data).unwrap();
        let small = resize_bilinear(&board, 112, 112);
        let (a, b) = (board.sum() / board.len() as f64, small.sum() / small.len() as f64);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn print_clips_are_static_and_real_clips_move() {
        let cfg = small();
        for e in synth_manifest(&cfg).iter().take(12) {
            let v = render_clip(&cfg, e);
            let moving = v.frames.windows(2).any(|w| w[0] != w[1]);
            match e.attack_type {
                AttackType::PrintIndoor | AttackType::PrintOutdoor => assert!(!moving),
                AttackType::Real => assert!(moving),
                AttackType::Replay if e.modality != Modality::Depth => assert!(moving),
                _ => {}
            }
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = SynthConfig::default();
        cfg.seed = 42;
        cfg.noise = 0.0;
        let mut back = SynthConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = SynthConfig::default();
        bad.clip_len = 3;
        assert!(bad.validate().is_err());
    }
}
