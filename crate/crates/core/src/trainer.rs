//! Training loop, optimizer, schedule, augmentation and scoring.
//!
//! Each training sample is a uniformly drawn frame of a recording together
//! with the dynamic image of the trailing window ending at that frame, for
//! every modality the network consumes. Per-sample random streams are derived
//! from `(seed, epoch, position)`, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasyn::{load_preprocessed, DataError};
use crate::diffcore::{self, DiffError, Gradients, ParamStore, Tensor};
use crate::dynimg::{dynamic_image_at, FrameSequence, RankPoolConfig, RankPoolError};
use crate::kv::{KvError, KvMap};
use crate::metrics::{self, Label, MetricsError, ScoredEntry, ScoredSet};
use crate::netgraph::{GroupLoss, InitConfig, LossBundle, NetConfig, NetError, Network, SampleInput, ATTACK, REAL};
use crate::protocols::{Collection, ManifestEntry};
use crate::Modality;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },
    #[error("recording `{0}` lacks modality {1}")]
    MissingModality(String, Modality),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    RankPool(#[from] RankPoolError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, aligned with the parameter store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before any parameter changes.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config("optimizer state does not match parameters".into()));
    }
    for i in 0..params.len() {
        if grads.by_index(i).shape() != params.by_index(i).shape() {
            return Err(TrainError::Config(format!("gradient shape mismatch for `{}`", params.name(i))));
        }
        if !grads.by_index(i).is_finite() {
            return Err(TrainError::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.by_index(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.by_index_mut(i).data_mut();
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub flip_prob: f64,
    /// Side of the crop window relative to the frame, drawn uniformly.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Colour distortion magnitudes for RGB static frames.
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 180.0,
            flip_prob: 0.5,
            crop_min: 0.9,
            crop_max: 1.0,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            flip_prob: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return bad("rotation must lie in [0, 180] degrees");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 1]");
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return bad("crop scales must satisfy 0 < min <= max <= 1");
        }
        if !(self.brightness >= 0.0 && self.contrast >= 0.0 && self.contrast < 1.0) {
            return bad("colour magnitudes must be non-negative (contrast < 1)");
        }
        Ok(())
    }

    /// Draws the per-sample transform; every draw happens so the stream
    /// position does not depend on the configuration.
    pub fn sample(&self, rng: &mut impl Rng) -> Augmentation {
        let (a, f, c, ox, oy, b, k) = (
            rng.gen_range(-1.0..=1.0),
            rng.gen::<f64>(),
            rng.gen::<f64>(),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        let scale = self.crop_min + c * (self.crop_max - self.crop_min);
        Augmentation {
            geo: GeoTransform {
                angle: a * self.rotation_deg * PI / 180.0,
                flip: f < self.flip_prob,
                scale,
                shift_x: ox * (1.0 - scale),
                shift_y: oy * (1.0 - scale),
            },
            brightness: b * self.brightness,
            contrast: k * self.contrast,
        }
    }
}

/// Crop, flip and rotation around the image centre, in normalized
/// coordinates `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub angle: f64,
    pub flip: bool,
    /// Crop side relative to the frame.
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform {
        angle: 0.0,
        flip: false,
        scale: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && !self.flip && self.scale == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }

    /// Source location (normalized) of output location `(x, y)`.
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flip { -x } else { x };
        let (s, c) = self.angle.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        (self.scale * rx + self.shift_x, self.scale * ry + self.shift_y)
    }

    /// Resamples `[C, H, W]` bilinearly; samples outside the frame read 0.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        if self.is_identity() {
            return img.clone();
        }
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let d = img.data();
        let mut out = vec![0.0; d.len()];
        for y in 0..h {
            for x in 0..w {
                let nx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let ny = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let (sx, sy) = self.source_of(nx, ny);
                let px = (sx + 1.0) / 2.0 * w as f64 - 0.5;
                let py = (sy + 1.0) / 2.0 * h as f64 - 0.5;
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                for ch in 0..c {
                    let at = |yy: f64, xx: f64| -> f64 {
                        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                            0.0
                        } else {
                            d[(ch * h + yy as usize) * w + xx as usize]
                        }
                    };
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
                    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
                    out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Tensor::new(img.shape().to_vec(), out).expect("same shape")
    }
}

/// Horizontal mirror of `[C, H, W]`.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (row, x) = (i / w, i % w);
            d[row * w + (w - 1 - x)]
        })
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub geo: GeoTransform,
    pub brightness: f64,
    pub contrast: f64,
}

impl Augmentation {
    /// Geometry applies to both images; colour only to an RGB static frame.
    pub fn apply_pair(&self, modality: Modality, static_img: &Tensor, dynamic_img: &Tensor) -> (Tensor, Tensor) {
        let mut s = self.geo.apply(static_img);
        if modality == Modality::Color && (self.brightness != 0.0 || self.contrast != 0.0) {
            let mean = s.sum() / s.len() as f64;
            let (b, k) = (self.brightness, self.contrast);
            s = s.map(|v| ((v - mean) * (1.0 + k) + mean + b).clamp(0.0, 1.0));
        }
        (s, self.geo.apply(dynamic_img))
    }
}

/// Convenience wrapper matching the per-pair contract.
pub fn augment(
    modality: Modality,
    static_img: &Tensor,
    dynamic_img: &Tensor,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> (Tensor, Tensor) {
    cfg.sample(rng).apply_pair(modality, static_img, dynamic_img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub window: usize,
    pub seed: u64,
    /// Sum per-sample gradients in a fixed order. When false, a parallel
    /// tree reduction is used.
    pub deterministic: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 1e-3,
            decay_epochs: vec![15, 20],
            decay_factor: 10.0,
            adam: AdamConfig::default(),
            batch_size: 64,
            window: 7,
            seed: 0,
            deterministic: true,
            augment: AugmentConfig::default(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "preset",
    "epochs",
    "lr",
    "decay_epochs",
    "decay_factor",
    "beta1",
    "beta2",
    "adam_eps",
    "batch",
    "window",
    "seed",
    "deterministic",
    "rotation",
    "flip",
    "crop_min",
    "crop_max",
    "brightness",
    "contrast",
];

impl TrainConfig {
    /// Full-scale schedule: initial learning rate 0.1, otherwise the defaults.
    pub fn full() -> Self {
        Self {
            lr: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay epochs must precede the last epoch".into());
        }
        if !(self.decay_factor >= 1.0) {
            return bad("decay factor must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.window < 2 {
            return bad("rank-pool window must be at least 2".into());
        }
        self.augment.validate()
    }

    pub fn keys() -> &'static [&'static str] {
        TRAIN_KEYS
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), TrainError> {
        match kv.get("preset") {
            None | Some("desk") => {}
            Some("full") => *self = Self::full(),
            Some(other) => return Err(TrainError::Config(format!("unknown preset `{other}`"))),
        }
        kv.update("epochs", &mut self.epochs)?;
        kv.update("lr", &mut self.lr)?;
        if let Some(d) = kv.list("decay_epochs")? {
            self.decay_epochs = d;
        }
        kv.update("decay_factor", &mut self.decay_factor)?;
        kv.update("beta1", &mut self.adam.beta1)?;
        kv.update("beta2", &mut self.adam.beta2)?;
        kv.update("adam_eps", &mut self.adam.eps)?;
        kv.update("batch", &mut self.batch_size)?;
        kv.update("window", &mut self.window)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("deterministic", &mut self.deterministic)?;
        let a = &mut self.augment;
        kv.update("rotation", &mut a.rotation_deg)?;
        kv.update("flip", &mut a.flip_prob)?;
        kv.update("crop_min", &mut a.crop_min)?;
        kv.update("crop_max", &mut a.crop_max)?;
        kv.update("brightness", &mut a.brightness)?;
        kv.update("contrast", &mut a.contrast)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        let d: Vec<String> = self.decay_epochs.iter().map(|e| e.to_string()).collect();
        kv.set("decay_epochs", d.join(","));
        kv.set("decay_factor", self.decay_factor);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("batch", self.batch_size);
        kv.set("window", self.window);
        kv.set("seed", self.seed);
        kv.set("deterministic", self.deterministic);
        let a = &self.augment;
        kv.set("rotation", a.rotation_deg);
        kv.set("flip", a.flip_prob);
        kv.set("crop_min", a.crop_min);
        kv.set("crop_max", a.crop_max);
        kv.set("brightness", a.brightness);
        kv.set("contrast", a.contrast);
        kv
    }
}

/// Learning rate of `epoch`: `lr / factor^k` with `k` the number of decay
/// epochs at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let k = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.lr / cfg.decay_factor.powi(k as i32))
}

/// Which modality's clips feed a network input slot. Identity unless a
/// cross-modality evaluation substitutes one modality for another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotMap {
    pub slots: Vec<(Modality, Modality)>,
}

impl SlotMap {
    pub fn identity(modalities: &[Modality]) -> Self {
        Self {
            slots: modalities.iter().map(|&m| (m, m)).collect(),
        }
    }

    /// Every slot reads `source`.
    pub fn all_from(modalities: &[Modality], source: Modality) -> Self {
        Self {
            slots: modalities.iter().map(|&m| (m, source)).collect(),
        }
    }
}

/// Repeats a single channel or averages three to match `channels`.
pub fn adapt_channels(img: &Tensor, channels: usize) -> Tensor {
    let c = img.shape()[0];
    if c == channels {
        return img.clone();
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let data: Vec<f64> = if c == 1 {
        (0..channels).flat_map(|_| d.iter().copied()).collect()
    } else {
        let mean: Vec<f64> = (0..plane).map(|i| (0..c).map(|ch| d[ch * plane + i]).sum::<f64>() / c as f64).collect();
        (0..channels).flat_map(|_| mean.iter().copied()).collect()
    };
    Tensor::new(vec![channels, h, w], data).expect("adapted shape")
}

/// Scales by the largest magnitude so the image lies in `[-1, 1]`; an
/// all-zero image stays zero.
pub fn normalize_dynamic(d: &Tensor) -> Tensor {
    let m = d.max_abs();
    if m > 0.0 {
        d.scale(1.0 / m)
    } else {
        d.clone()
    }
}

/// Preprocessed clips of one recording, keyed by network slot.
#[derive(Clone, Debug)]
pub struct Recording {
    pub video_id: String,
    pub label: Label,
    pub pai: Option<String>,
    pub clips: BTreeMap<Modality, FrameSequence>,
    /// Normalized dynamic image ending at each frame, per slot.
    dynamic: BTreeMap<Modality, Vec<Tensor>>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.clips.values().map(FrameSequence::len).min().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self) -> usize {
        match self.label {
            Label::BonaFide => REAL,
            Label::Attack => ATTACK,
        }
    }

    /// Network input at frame `index`.
    pub fn input(&self, index: usize, channels: &BTreeMap<Modality, usize>) -> SampleInput {
        let mut inp = SampleInput::new();
        for (&slot, clip) in &self.clips {
            let c = channels[&slot];
            let st = adapt_channels(&clip.frames[index], c);
            let dy = adapt_channels(&self.dynamic[&slot][index], c);
            inp.insert(slot, st, dy);
        }
        inp
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
}

impl Dataset {
    /// Groups manifest entries into recordings and loads the clips each slot
    /// needs, resized to `size`. Dynamic images for every frame are computed
    /// up front.
    pub fn load(
        root: &Path,
        entries: &[ManifestEntry],
        slots: &SlotMap,
        size: usize,
        window: usize,
    ) -> Result<Self, TrainError> {
        let mut groups: BTreeMap<_, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in entries {
            groups.entry(e.recording_key()).or_default().push(e);
        }
        let rp = RankPoolConfig::new(window)?;
        let groups: Vec<Vec<&ManifestEntry>> = groups.into_values().collect();
        let recordings = groups
            .par_iter()
            .filter(|g| slots.slots.iter().all(|(_, src)| g.iter().any(|e| e.modality == *src)))
            .map(|g| -> Result<Recording, TrainError> {
                let first = g[0];
                let mut clips = BTreeMap::new();
                let mut dynamic = BTreeMap::new();
                for &(slot, src) in &slots.slots {
                    let e = g.iter().find(|e| e.modality == src).expect("filtered");
                    let clip = load_preprocessed(root.join(&e.path), size)?;
                    let dyn_imgs = (0..clip.len())
                        .map(|i| Ok(normalize_dynamic(&dynamic_image_at(&clip, i, &rp)?.d)))
                        .collect::<Result<Vec<_>, RankPoolError>>()?;
                    dynamic.insert(slot, dyn_imgs);
                    clips.insert(slot, clip);
                }
                Ok(Recording {
                    video_id: first.video_id(),
                    label: first.label(),
                    pai: match first.collection {
                        Collection::ThreeD => Some("3d".into()),
                        Collection::TwoD => first.attack_type.pai().map(|p| format!("{p:?}").to_lowercase()),
                    },
                    clips,
                    dynamic,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if recordings.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self { recordings })
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    /// Keeps only the given slots of every recording.
    pub fn restrict(&self, slots: &[Modality]) -> Result<Dataset, TrainError> {
        let recordings = self
            .recordings
            .iter()
            .map(|r| {
                let mut out = Recording {
                    video_id: r.video_id.clone(),
                    label: r.label,
                    pai: r.pai.clone(),
                    clips: BTreeMap::new(),
                    dynamic: BTreeMap::new(),
                };
                for &m in slots {
                    let clip = r.clips.get(&m).ok_or_else(|| TrainError::MissingModality(r.video_id.clone(), m))?;
                    out.clips.insert(m, clip.clone());
                    out.dynamic.insert(m, r.dynamic[&m].clone());
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Dataset { recordings })
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
}

pub const MODEL_CONFIG: &str = "model.cfg";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";

impl Model {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, TrainError> {
        let net = Network::new(config)?;
        let params = net.init_params(InitConfig::new(seed));
        Ok(Self { net, params })
    }

    fn channels(&self) -> BTreeMap<Modality, usize> {
        self.net.config().modalities.iter().map(|&m| (m, m.channels())).collect()
    }

    /// Writes `model.cfg` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_CONFIG), self.net.config().to_kv().render())?;
        diffcore::save_checkpoint(dir.join(MODEL_CHECKPOINT), &self.params)?;
        Ok(())
    }

    pub fn load(config_path: &Path, checkpoint_path: &Path) -> Result<Self, TrainError> {
        let kv = KvMap::parse(&fs::read_to_string(config_path)?)?;
        let net = Network::new(NetConfig::from_kv(&kv)?)?;
        let params = diffcore::load_checkpoint(checkpoint_path)?;
        for (name, shape) in net.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(TrainError::Config(format!("checkpoint lacks `{name}` with shape {shape:?}"))),
            }
        }
        Ok(Self { net, params })
    }

    pub fn load_dir(dir: &Path) -> Result<Self, TrainError> {
        Self::load(&dir.join(MODEL_CONFIG), &dir.join(MODEL_CHECKPOINT))
    }

    /// Liveness score of one sample.
    pub fn score(&self, input: &SampleInput) -> Result<f64, TrainError> {
        Ok(self.net.score(&self.params, input)?)
    }

    /// Scores every recording at its last frame.
    pub fn score_dataset(&self, data: &Dataset, subprotocol: Option<&str>) -> Result<ScoredSet, TrainError> {
        let channels = self.channels();
        let entries = data
            .recordings
            .par_iter()
            .map(|r| -> Result<ScoredEntry, TrainError> {
                let score = self.score(&r.input(r.len() - 1, &channels))?;
                Ok(ScoredEntry {
                    video_id: r.video_id.clone(),
                    score,
                    label: r.label,
                    pai: r.pai.clone(),
                    subprotocol: subprotocol.map(str::to_string),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScoredSet::new(entries))
    }
}

/// Mean loss bundle over a batch or an epoch.
fn mean_bundle(bundles: &[LossBundle]) -> LossBundle {
    let n = bundles.len() as f64;
    let avg = |f: &dyn Fn(&LossBundle) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = bundles.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    let groups = (0..bundles[0].groups.len())
        .map(|i| {
            GroupLoss::from_components(
                bundles[0].groups[i].modality,
                avg(&|b| b.groups[i].s),
                avg(&|b| b.groups[i].d),
                avg(&|b| b.groups[i].f),
                avg(&|b| b.groups[i].sdf),
            )
        })
        .collect();
    LossBundle::from_parts(avg(&|b| b.whole), groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBundle,
    pub valid_acer: Option<f64>,
    pub valid_auc: Option<f64>,
    /// File name inside the output directory.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
}

/// Where per-epoch artifacts go; `None` keeps training in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Prefixed to the epoch log as a `#` comment line.
    pub header: Option<String>,
}

fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Trains `model` in place on `train`, evaluating on `valid` after each
/// epoch.
pub fn train(
    mut model: Model,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let channels = model.channels();
    for r in &train.recordings {
        for &m in channels.keys() {
            if !r.clips.contains_key(&m) {
                return Err(TrainError::MissingModality(r.video_id.clone(), m));
            }
        }
    }
    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
            if let Some(h) = &out.header {
                writeln!(f, "# {h}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::new();
    let mut step = 0;
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut shuffler);
        let mut epoch_bundles = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &ri)| {
                    let rec = &train.recordings[ri];
                    let mut rng = sample_rng(cfg.seed, epoch, b * cfg.batch_size + j);
                    let index = rng.gen_range(0..rec.len());
                    let aug = cfg.augment.sample(&mut rng);
                    let raw = rec.input(index, &channels);
                    let mut inp = SampleInput::new();
                    for m in raw.modalities().collect::<Vec<_>>() {
                        let (s, d) = raw.get(m).expect("present");
                        let (s, d) = aug.apply_pair(m, s, d);
                        inp.insert(m, s, d);
                    }
                    model.net.loss_and_grads(&model.params, &inp, rec.class())
                })
                .collect::<Result<Vec<_>, _>>();
            let results = match results {
                Ok(r) => r,
                Err(NetError::Diff(DiffError::NonFinite(_))) => {
                    return Err(TrainError::NonFiniteLoss { epoch, step, last_good })
                }
                Err(e) => return Err(e.into()),
            };
            let (bundles, grads): (Vec<LossBundle>, Vec<Gradients>) = results.into_iter().unzip();
            if bundles.iter().any(|l| !l.total.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, step, last_good });
            }
            let mut total = if cfg.deterministic {
                let mut it = grads.into_iter();
                let mut acc = it.next().expect("non-empty batch");
                for g in it {
                    acc.accumulate(&g);
                }
                acc
            } else {
                grads
                    .into_par_iter()
                    .reduce_with(|mut a, b| {
                        a.accumulate(&b);
                        a
                    })
                    .expect("non-empty batch")
            };
            total.scale(1.0 / batch.len() as f64);
            adam_step(&mut model.params, &total, &mut adam, lr, &cfg.adam)?;
            step += 1;
            epoch_bundles.extend(bundles);
        }

        let (valid_acer, valid_auc) = match valid {
            Some(v) => {
                let set = model.score_dataset(v, None)?;
                match (metrics::rates_at(&set, 0.5), metrics::roc(&set)) {
                    (Ok(r), Ok(c)) => (Some(r.acer), Some(c.auc())),
                    _ => (None, None),
                }
            }
            None => (None, None),
        };
        let checkpoint = match &out.dir {
            Some(dir) => {
                let name = format!("epoch_{:03}.ckpt", epoch + 1);
                let path = dir.join(&name);
                diffcore::save_checkpoint(&path, &model.params)?;
                last_good = Some(path);
                Some(name)
            }
            None => None,
        };
        let log = EpochLog {
            epoch: epoch + 1,
            step,
            lr,
            loss: mean_bundle(&epoch_bundles),
            valid_acer,
            valid_auc,
            checkpoint,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&log)?)?;
            f.flush()?;
        }
        logs.push(log);
    }
    if let Some(dir) = &out.dir {
        model.save(dir)?;
    }
    Ok(TrainOutcome { model, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::BackboneSpec;

    fn one_param(v: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(v)).unwrap();
        p
    }

    fn grads_of(p: &ParamStore, g: Vec<f64>) -> Gradients {
        let mut out = Gradients::zeros_like(p);
        *out.by_index_mut(0) = Tensor::vector(g);
        out
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::full();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.1);
        assert!((lr_at(15, &cfg).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(24, &cfg).unwrap() - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(14, &cfg).unwrap(), 0.1);
        assert!(lr_at(25, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.decay_epochs = vec![20, 15];
        assert!(cfg.validate().is_err());
        cfg.decay_epochs = vec![15, 25];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut back = TrainConfig::default();
        back.apply_kv(&TrainConfig::full().to_kv()).unwrap();
        assert_eq!(back, TrainConfig::full());
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = one_param(vec![1.0, -2.0, 0.5]);
        let g = grads_of(&p, vec![3.0, -0.001, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] - (-1.99)).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = one_param(vec![1.0]);
        let g = grads_of(&p, vec![f64::NAN]);
        let mut st = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn flip_is_an_involution_and_identity_is_exact() {
        let img = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, d) = augment(Modality::Color, &img, &img, &mut rng, &AugmentConfig::none());
        assert_eq!((s, d), (img.clone(), img));
    }

    #[test]
    fn flip_transform_matches_mirror() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let t = GeoTransform {
            flip: true,
            ..GeoTransform::IDENTITY
        };
        let a = t.apply(&img);
        let b = flip_horizontal(&img);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_adaptation() {
        let one = Tensor::new(vec![1, 1, 2], vec![0.2, 0.4]).unwrap();
        let three = adapt_channels(&one, 3);
        assert_eq!(three.shape(), &[3, 1, 2]);
        let back = adapt_channels(&three, 1);
        assert_eq!(back.shape(), one.shape());
        for (a, b) in back.data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn init_scores_half() {
        let model = Model::init(
            NetConfig {
                spec: BackboneSpec::tiny(),
                variant: crate::netgraph::FusionVariant::SdnetOnly,
                modalities: vec![Modality::Depth],
                branches: crate::netgraph::BranchMode::Both,
            },
            0,
        )
        .unwrap();
        let z = Tensor::zeros(&[1, 16, 16]);
        let s = model
            .score(&SampleInput::new().with(Modality::Depth, z.clone(), z))
            .unwrap();
        assert_eq!(s, 0.5);
    }
}
