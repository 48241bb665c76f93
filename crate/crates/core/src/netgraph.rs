//! SD-Net and PSMM-Net computation graphs.
//!
//! A network is a static description ([`Network`]) plus a [`ParamStore`];
//! every forward pass records a fresh [`Graph`]. Each modality owns a static
//! branch and a dynamic branch (stem + levels 1–4) and a static-dynamic
//! branch (levels 2–4, seeded with `X_s¹ + X_d¹`). PSMM variants add a shared
//! branch (levels 2–4) that receives the summed static and dynamic features
//! of every modality and, for the full model, feeds its output back into the
//! static and dynamic branches at levels 2 and 3.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{grad_check, grad_check_sampled, softmax, Sampling, DiffError, GradCheckReport, Gradients, Graph, NodeId, ParamStore, Tensor};
use crate::kv::{KvError, KvMap};
use crate::Modality;

/// Class index of bona fide presentations in every 2-logit head.
pub const REAL: usize = 1;
/// Class index of attacks.
pub const ATTACK: usize = 0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid backbone: {0}")]
    Spec(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("missing input for modality {0}")]
    MissingModality(Modality),
    #[error("{modality} {stream} input: expected {expected:?}, got {got:?}")]
    InputShape {
        modality: Modality,
        stream: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("fusion at level {level} ({modality}): {source}")]
    Fusion {
        level: usize,
        modality: String,
        source: DiffError,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Stem plus four down-sampling levels.
///
/// Each level is `conv3x3/2 → ReLU → conv3x3 → ReLU`; the stem is a single
/// stride-1 conv with ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub kernel: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneSpec {
    /// 32×32 inputs, widths (8, 16, 32, 64).
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            stem_width: 8,
            widths: [8, 16, 32, 64],
            kernel: 3,
        }
    }

    /// Smallest useful configuration; used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            stem_width: 2,
            widths: [2, 3, 3, 4],
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(NetError::Spec(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(NetError::Spec(format!("kernel {} must be odd", self.kernel)));
        }
        if self.stem_width == 0 || self.widths.contains(&0) {
            return Err(NetError::Spec("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// `[C, H, W]` of the stem output (`t = 0`) or of level `t` in 1..=4.
    pub fn level_shape(&self, t: usize) -> [usize; 3] {
        let side = self.input_size >> t;
        let c = if t == 0 { self.stem_width } else { self.widths[t - 1] };
        [c, side, side]
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionVariant {
    /// Independent SD-Nets; a whole-network head only for several modalities.
    SdnetOnly,
    /// Per-modality stem and level 1, then one summed stream per branch type.
    Nhf,
    /// Shared branch with forward feeding only.
    PsmmWobf,
    /// Shared branch with forward and backward feeding.
    Psmm,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [Self::SdnetOnly, Self::Nhf, Self::PsmmWobf, Self::Psmm];

    pub fn has_shared(self) -> bool {
        matches!(self, Self::Psmm | Self::PsmmWobf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SdnetOnly => "sdnet",
            Self::Nhf => "nhf",
            Self::PsmmWobf => "psmm-wobf",
            Self::Psmm => "psmm",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "sdnet" | "sdnet-only" => Ok(Self::SdnetOnly),
            "nhf" => Ok(Self::Nhf),
            "psmm-wobf" | "wobf" => Ok(Self::PsmmWobf),
            "psmm" => Ok(Self::Psmm),
            other => Err(NetError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Which of the static / dynamic branches are instantiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchMode {
    Static,
    Dynamic,
    #[default]
    Both,
}

impl BranchMode {
    pub fn has_static(self) -> bool {
        self != Self::Dynamic
    }

    pub fn has_dynamic(self) -> bool {
        self != Self::Static
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Dynamic => "dynamic",
            Self::Both => "both",
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchMode {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" | "s" => Ok(Self::Static),
            "dynamic" | "d" => Ok(Self::Dynamic),
            "both" | "sd" => Ok(Self::Both),
            other => Err(NetError::Config(format!("unknown branch mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub spec: BackboneSpec,
    pub variant: FusionVariant,
    pub modalities: Vec<Modality>,
    pub branches: BranchMode,
}

const NET_KEYS: &[&str] = &["variant", "modalities", "branches", "input_size", "stem_width", "widths", "kernel"];

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        self.spec.validate()?;
        if self.modalities.is_empty() {
            return Err(NetError::Config("at least one modality is required".into()));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.modalities {
            return Err(NetError::Config("modalities must be sorted and distinct".into()));
        }
        Ok(())
    }

    /// Reads a network config, starting from the desk defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self, NetError> {
        let mut cfg = Self {
            spec: BackboneSpec::desk(),
            variant: FusionVariant::Psmm,
            modalities: Modality::ALL.to_vec(),
            branches: BranchMode::Both,
        };
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    /// Applies the network keys present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), NetError> {
        if let Some(v) = kv.get("variant") {
            self.variant = v.parse()?;
        }
        if let Some(v) = kv.get("modalities") {
            self.modalities =
                Modality::parse_set(v).ok_or_else(|| NetError::Config(format!("bad modality set `{v}`")))?;
        }
        if let Some(v) = kv.get("branches") {
            self.branches = v.parse()?;
        }
        kv.update("input_size", &mut self.spec.input_size)?;
        kv.update("stem_width", &mut self.spec.stem_width)?;
        kv.update("kernel", &mut self.spec.kernel)?;
        if let Some(w) = kv.list::<usize>("widths")? {
            self.spec.widths = w
                .try_into()
                .map_err(|_| NetError::Spec("exactly four level widths are required".into()))?;
        }
        self.validate()
    }

    pub fn keys() -> &'static [&'static str] {
        NET_KEYS
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("variant", self.variant);
        kv.set("modalities", Modality::set_tag(&self.modalities));
        kv.set("branches", self.branches);
        kv.set("input_size", self.spec.input_size);
        kv.set("stem_width", self.spec.stem_width);
        let w = self.spec.widths;
        kv.set("widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3]));
        kv.set("kernel", self.spec.kernel);
        kv
    }
}

/// How heads and biases are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    pub seed: u64,
    /// Zero heads give uniform logits at step 0.
    pub zero_heads: bool,
    /// Standard deviation of conv biases (0 gives zero biases).
    pub bias_std: f64,
}

impl InitConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            zero_heads: true,
            bias_std: 0.0,
        }
    }

    /// Random heads and biases, keeping pre-activations away from ReLU kinks.
    pub fn generic(seed: u64) -> Self {
        Self {
            seed,
            zero_heads: false,
            bias_std: 0.1,
        }
    }
}

/// Static and dynamic image for each modality of one sample, `[C, H, W]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleInput {
    streams: BTreeMap<Modality, (Tensor, Tensor)>,
}

impl SampleInput {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, modality: Modality, static_img: Tensor, dynamic_img: Tensor) {
        self.streams.insert(modality, (static_img, dynamic_img));
    }

    pub fn with(mut self, modality: Modality, static_img: Tensor, dynamic_img: Tensor) -> Self {
        self.insert(modality, static_img, dynamic_img);
        self
    }

    pub fn get(&self, modality: Modality) -> Option<(&Tensor, &Tensor)> {
        self.streams.get(&modality).map(|(s, d)| (s, d))
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.streams.keys().copied()
    }
}

/// Node ids of the fused feature maps recorded during one forward pass.
/// Per-level vectors are indexed by `t - 1`.
#[derive(Clone, Debug, Default)]
pub struct FusionState {
    pub x_s: BTreeMap<Modality, Vec<NodeId>>,
    pub x_d: BTreeMap<Modality, Vec<NodeId>>,
    /// Static-dynamic branch; level 1 is the seed `X_s¹ + X_d¹`.
    pub x_f: BTreeMap<Modality, Vec<NodeId>>,
    /// Shared outputs `S¹..S⁴`, with `S¹` a zero constant.
    pub s: Vec<NodeId>,
    /// Shared-branch inputs `S̃¹..S̃³`.
    pub s_tilde: Vec<NodeId>,
    /// Backward-fed inputs `X̃` at levels 2 and 3 (index 0 is level 2).
    pub xt_s: BTreeMap<Modality, Vec<NodeId>>,
    pub xt_d: BTreeMap<Modality, Vec<NodeId>>,
    /// Summed streams of the halfway-fusion baseline (levels 1–4).
    pub merged_s: Vec<NodeId>,
    pub merged_d: Vec<NodeId>,
    pub merged_f: Vec<NodeId>,
}

/// Logit nodes of one group of heads; `modality` is `None` for the merged
/// streams of the halfway-fusion baseline.
#[derive(Clone, Debug)]
pub struct HeadSet {
    pub modality: Option<Modality>,
    pub s: Option<NodeId>,
    pub d: Option<NodeId>,
    pub f: Option<NodeId>,
    pub sdf: Option<NodeId>,
}

impl HeadSet {
    pub fn present(&self) -> impl Iterator<Item = NodeId> + '_ {
        [self.s, self.d, self.f, self.sdf].into_iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub state: FusionState,
    pub heads: Vec<HeadSet>,
    pub whole: Option<NodeId>,
    /// Head whose softmax gives the liveness score.
    pub score_logits: NodeId,
}

/// Loss values of one head group: `total = s + d + f + sdf` over the heads
/// present, summed in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub modality: Option<Modality>,
    pub s: Option<f64>,
    pub d: Option<f64>,
    pub f: Option<f64>,
    pub sdf: Option<f64>,
    pub total: f64,
}

impl GroupLoss {
    pub fn from_components(
        modality: Option<Modality>,
        s: Option<f64>,
        d: Option<f64>,
        f: Option<f64>,
        sdf: Option<f64>,
    ) -> Self {
        let total = sum_in_order([s, d, f, sdf].into_iter().flatten());
        Self {
            modality,
            s,
            d,
            f,
            sdf,
            total,
        }
    }

    pub fn components(&self) -> impl Iterator<Item = f64> {
        [self.s, self.d, self.f, self.sdf].into_iter().flatten()
    }
}

/// Every loss term of a forward pass: `total = whole + Σ groups`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub groups: Vec<GroupLoss>,
    pub whole: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn from_parts(whole: Option<f64>, groups: Vec<GroupLoss>) -> Self {
        let total = sum_in_order(whole.into_iter().chain(groups.iter().map(|g| g.total)));
        Self { groups, whole, total }
    }

    pub fn group(&self, modality: Modality) -> Option<&GroupLoss> {
        self.groups.iter().find(|g| g.modality == Some(modality))
    }
}

// Matches the accumulation order of `Graph::sum`, so graph and bundle agree bitwise.
fn sum_in_order(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut it = values.into_iter();
    let Some(first) = it.next() else { return 0.0 };
    it.fold(first * 1.0, |acc, v| acc + 1.0 * v)
}

/// Loss node ids matching a [`LossBundle`].
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub groups: Vec<(Option<Modality>, NodeId)>,
    pub whole: Option<NodeId>,
    pub total: NodeId,
}

/// Static structure of an SD-Net / PSMM-Net instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    config: NetConfig,
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Single-modality SD-Net.
    pub fn build_sdnet(spec: BackboneSpec, modality: Modality) -> Result<Self, NetError> {
        Self::new(NetConfig {
            spec,
            variant: FusionVariant::SdnetOnly,
            modalities: vec![modality],
            branches: BranchMode::Both,
        })
    }

    /// Multi-modal network over all three modalities.
    pub fn build_psmm(spec: BackboneSpec, variant: FusionVariant) -> Result<Self, NetError> {
        Self::new(NetConfig {
            spec,
            variant,
            modalities: Modality::ALL.to_vec(),
            branches: BranchMode::Both,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.config.spec
    }

    pub fn has_whole_head(&self) -> bool {
        match self.config.variant {
            FusionVariant::Psmm | FusionVariant::PsmmWobf => true,
            FusionVariant::SdnetOnly => self.config.modalities.len() > 1,
            FusionVariant::Nhf => false,
        }
    }

    fn has_fused_branch(&self) -> bool {
        self.config.branches == BranchMode::Both
    }

    /// Parameter names and shapes in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let spec = &self.config.spec;
        let k = spec.kernel;
        let mut out = Vec::new();
        let level = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, t: usize| {
            let cin = spec.level_shape(t - 1)[0];
            let c = spec.level_shape(t)[0];
            out.push((format!("{prefix}.l{t}.c1.w"), vec![c, cin, k, k]));
            out.push((format!("{prefix}.l{t}.c1.b"), vec![c]));
            out.push((format!("{prefix}.l{t}.c2.w"), vec![c, c, k, k]));
            out.push((format!("{prefix}.l{t}.c2.b"), vec![c]));
        };
        let head = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.head.w"), vec![2, spec.feature_dim()]));
            out.push((format!("{prefix}.head.b"), vec![2]));
        };
        let b = self.config.branches;
        let nhf = self.config.variant == FusionVariant::Nhf;
        for &m in &self.config.modalities {
            let tag = m.tag();
            for (on, kind) in [(b.has_static(), 's'), (b.has_dynamic(), 'd')] {
                if !on {
                    continue;
                }
                let p = format!("{tag}.{kind}");
                out.push((format!("{p}.stem.w"), vec![spec.stem_width, m.channels(), k, k]));
                out.push((format!("{p}.stem.b"), vec![spec.stem_width]));
                let last = if nhf { 1 } else { 4 };
                for t in 1..=last {
                    level(&mut out, &p, t);
                }
                if !nhf {
                    head(&mut out, &p);
                }
            }
            if !nhf && self.has_fused_branch() {
                let p = format!("{tag}.f");
                for t in 2..=4 {
                    level(&mut out, &p, t);
                }
                head(&mut out, &p);
                head(&mut out, &format!("{tag}.sdf"));
            }
        }
        if nhf {
            for (on, kind) in [(b.has_static(), 's'), (b.has_dynamic(), 'd'), (self.has_fused_branch(), 'f')] {
                if on {
                    let p = format!("M.{kind}");
                    for t in 2..=4 {
                        level(&mut out, &p, t);
                    }
                    head(&mut out, &p);
                }
            }
            if self.has_fused_branch() {
                head(&mut out, "M.sdf");
            }
        }
        if self.config.variant.has_shared() {
            for t in 2..=4 {
                level(&mut out, "shared", t);
            }
        }
        if self.has_whole_head() {
            head(&mut out, "whole");
        }
        out
    }

    /// He-normal conv weights; heads and biases per `init`.
    pub fn init_params(&self, init: InitConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let is_head = name.contains(".head.");
            let std = if name.ends_with(".b") {
                if is_head && init.zero_heads {
                    0.0
                } else {
                    init.bias_std
                }
            } else if is_head {
                if init.zero_heads {
                    0.0
                } else {
                    (1.0 / shape[1] as f64).sqrt()
                }
            } else {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            };
            let data: Vec<f64> = if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            let t = Tensor::new(shape, data).expect("shape from spec");
            store.insert(name, t).expect("unique parameter names");
        }
        store
    }

    fn check_input(&self, input: &SampleInput) -> Result<(), NetError> {
        let s = self.config.spec.input_size;
        for &m in &self.config.modalities {
            let (st, dy) = input.get(m).ok_or(NetError::MissingModality(m))?;
            let expected = vec![m.channels(), s, s];
            for (stream, t) in [("static", st), ("dynamic", dy)] {
                if t.shape() != expected.as_slice() {
                    return Err(NetError::InputShape {
                        modality: m,
                        stream,
                        expected,
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    fn conv_relu(&self, g: &mut Graph<'_>, name: &str, x: NodeId, stride: usize) -> Result<NodeId, NetError> {
        let w = g.param(&format!("{name}.w"))?;
        let b = g.param(&format!("{name}.b"))?;
        let y = g.conv2d(name, x, w, b, stride)?;
        Ok(g.relu(&format!("{name}.relu"), y))
    }

    fn level(&self, g: &mut Graph<'_>, prefix: &str, t: usize, x: NodeId) -> Result<NodeId, NetError> {
        let h = self.conv_relu(g, &format!("{prefix}.l{t}.c1"), x, 2)?;
        self.conv_relu(g, &format!("{prefix}.l{t}.c2"), h, 1)
    }

    fn head(&self, g: &mut Graph<'_>, prefix: &str, x: NodeId) -> Result<NodeId, NetError> {
        let w = g.param(&format!("{prefix}.head.w"))?;
        let b = g.param(&format!("{prefix}.head.b"))?;
        Ok(g.linear(&format!("{prefix}.logits"), x, w, b)?)
    }

    fn gap(&self, g: &mut Graph<'_>, label: &str, x: NodeId) -> Result<NodeId, NetError> {
        Ok(g.global_avg_pool(label, x)?)
    }

    /// Stem and level 1 of one modality's static or dynamic branch.
    fn entry(&self, g: &mut Graph<'_>, prefix: &str, img: &Tensor) -> Result<NodeId, NetError> {
        let x = g.input(&format!("{prefix}.input"), img.clone())?;
        let stem = self.conv_relu(g, &format!("{prefix}.stem"), x, 1)?;
        self.level(g, prefix, 1, stem)
    }

    /// Records one forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, input: &SampleInput) -> Result<Forward, NetError> {
        self.check_input(input)?;
        match self.config.variant {
            FusionVariant::Nhf => self.forward_nhf(g, input),
            _ => self.forward_standard(g, input),
        }
    }

    fn forward_standard(&self, g: &mut Graph<'_>, input: &SampleInput) -> Result<Forward, NetError> {
        let cfg = &self.config;
        let (bs, bd, bf) = (cfg.branches.has_static(), cfg.branches.has_dynamic(), self.has_fused_branch());
        let feed_back = cfg.variant == FusionVariant::Psmm;
        let mut st = FusionState::default();

        for &m in &cfg.modalities {
            let (simg, dimg) = input.get(m).expect("checked");
            let tag = m.tag();
            if bs {
                let x = self.entry(g, &format!("{tag}.s"), simg)?;
                st.x_s.insert(m, vec![x]);
            }
            if bd {
                let x = self.entry(g, &format!("{tag}.d"), dimg)?;
                st.x_d.insert(m, vec![x]);
            }
            if bf {
                let seed = g
                    .add(&format!("{tag}.f.seed"), st.x_s[&m][0], st.x_d[&m][0])
                    .map_err(|e| fusion(1, m.name(), e))?;
                st.x_f.insert(m, vec![seed]);
            }
        }

        if cfg.variant.has_shared() {
            let s1 = g.constant("S1", Tensor::zeros(&cfg.spec.level_shape(1)));
            st.s.push(s1);
        }

        for t in 1..=3 {
            if cfg.variant.has_shared() {
                let mut terms: Vec<NodeId> = Vec::new();
                terms.extend(st.x_s.values().map(|v| v[t - 1]));
                terms.extend(st.x_d.values().map(|v| v[t - 1]));
                terms.push(st.s[t - 1]);
                let s_tilde = g
                    .sum(&format!("S~{t}"), &terms)
                    .map_err(|e| fusion(t, "shared", e))?;
                st.s_tilde.push(s_tilde);
                let next = self.level(g, "shared", t + 1, s_tilde)?;
                st.s.push(next);
            }
            for &m in &cfg.modalities {
                let tag = m.tag();
                for (kind, xs, xts) in [('s', &mut st.x_s, &mut st.xt_s), ('d', &mut st.x_d, &mut st.xt_d)] {
                    let Some(levels) = xs.get_mut(&m) else { continue };
                    let mut x = levels[t - 1];
                    if feed_back && t >= 2 {
                        x = g
                            .add(&format!("{tag}.X{kind}~{t}"), x, st.s[t - 1])
                            .map_err(|e| fusion(t, m.name(), e))?;
                        xts.entry(m).or_default().push(x);
                    }
                    let next = self.level(g, &format!("{tag}.{kind}"), t + 1, x)?;
                    levels.push(next);
                }
                if let Some(levels) = st.x_f.get_mut(&m) {
                    let next = self.level(g, &format!("{tag}.f"), t + 1, levels[t - 1])?;
                    levels.push(next);
                }
            }
        }

        let mut heads = Vec::new();
        let mut whole_terms = Vec::new();
        for &m in &cfg.modalities {
            let tag = m.tag();
            let mut set = HeadSet {
                modality: Some(m),
                s: None,
                d: None,
                f: None,
                sdf: None,
            };
            let mut gaps = Vec::new();
            for (kind, map) in [('s', &st.x_s), ('d', &st.x_d), ('f', &st.x_f)] {
                if let Some(levels) = map.get(&m) {
                    let p = format!("{tag}.{kind}");
                    let v = self.gap(g, &format!("{p}.gap"), levels[3])?;
                    let logits = self.head(g, &p, v)?;
                    match kind {
                        's' => set.s = Some(logits),
                        'd' => set.d = Some(logits),
                        _ => set.f = Some(logits),
                    }
                    gaps.push(v);
                }
            }
            if bf {
                let summed = g.sum(&format!("{tag}.sdf.sum"), &gaps)?;
                set.sdf = Some(self.head(g, &format!("{tag}.sdf"), summed)?);
            }
            whole_terms.extend(gaps);
            heads.push(set);
        }

        let whole = if self.has_whole_head() {
            if cfg.variant.has_shared() {
                let v = self.gap(g, "shared.gap", st.s[3])?;
                whole_terms.push(v);
            }
            let summed = g.sum("whole.sum", &whole_terms)?;
            Some(self.head(g, "whole", summed)?)
        } else {
            None
        };

        let score_logits = whole.unwrap_or_else(|| {
            let h = &heads[0];
            h.sdf.or(h.s).or(h.d).expect("at least one branch")
        });
        Ok(Forward {
            state: st,
            heads,
            whole,
            score_logits,
        })
    }

    fn forward_nhf(&self, g: &mut Graph<'_>, input: &SampleInput) -> Result<Forward, NetError> {
        let cfg = &self.config;
        let (bs, bd, bf) = (cfg.branches.has_static(), cfg.branches.has_dynamic(), self.has_fused_branch());
        let mut st = FusionState::default();
        for &m in &cfg.modalities {
            let (simg, dimg) = input.get(m).expect("checked");
            if bs {
                let x = self.entry(g, &format!("{}.s", m.tag()), simg)?;
                st.x_s.insert(m, vec![x]);
            }
            if bd {
                let x = self.entry(g, &format!("{}.d", m.tag()), dimg)?;
                st.x_d.insert(m, vec![x]);
            }
        }
        if bs {
            let terms: Vec<NodeId> = st.x_s.values().map(|v| v[0]).collect();
            st.merged_s.push(g.sum("M.s.merge", &terms).map_err(|e| fusion(1, "merged", e))?);
        }
        if bd {
            let terms: Vec<NodeId> = st.x_d.values().map(|v| v[0]).collect();
            st.merged_d.push(g.sum("M.d.merge", &terms).map_err(|e| fusion(1, "merged", e))?);
        }
        if bf {
            let seed = g
                .add("M.f.seed", st.merged_s[0], st.merged_d[0])
                .map_err(|e| fusion(1, "merged", e))?;
            st.merged_f.push(seed);
        }
        let mut set = HeadSet {
            modality: None,
            s: None,
            d: None,
            f: None,
            sdf: None,
        };
        let mut gaps = Vec::new();
        for (kind, levels) in [('s', &mut st.merged_s), ('d', &mut st.merged_d), ('f', &mut st.merged_f)] {
            if levels.is_empty() {
                continue;
            }
            let p = format!("M.{kind}");
            for t in 1..=3 {
                let next = self.level(g, &p, t + 1, levels[t - 1])?;
                levels.push(next);
            }
            let v = self.gap(g, &format!("{p}.gap"), levels[3])?;
            let logits = self.head(g, &p, v)?;
            match kind {
                's' => set.s = Some(logits),
                'd' => set.d = Some(logits),
                _ => set.f = Some(logits),
            }
            gaps.push(v);
        }
        if bf {
            let summed = g.sum("M.sdf.sum", &gaps)?;
            set.sdf = Some(self.head(g, "M.sdf", summed)?);
        }
        let score_logits = set.sdf.or(set.s).or(set.d).expect("at least one branch");
        Ok(Forward {
            state: st,
            heads: vec![set],
            whole: None,
            score_logits,
        })
    }

    /// Softmax cross-entropy on every head, summed per group and overall.
    pub fn loss(&self, g: &mut Graph<'_>, fwd: &Forward, label: usize) -> Result<(LossNodes, LossBundle), NetError> {
        let mut group_nodes = Vec::new();
        let mut group_values = Vec::new();
        for set in &fwd.heads {
            let name = set.modality.map_or('M', Modality::tag);
            let mut ce = |kind: &str, logits: Option<NodeId>| -> Result<Option<NodeId>, NetError> {
                logits
                    .map(|z| g.softmax_cross_entropy(&format!("{name}.{kind}.loss"), z, label))
                    .transpose()
                    .map_err(NetError::from)
            };
            let s = ce("s", set.s)?;
            let d = ce("d", set.d)?;
            let f = ce("f", set.f)?;
            let sdf = ce("sdf", set.sdf)?;
            let terms: Vec<NodeId> = [s, d, f, sdf].into_iter().flatten().collect();
            let total = g.sum(&format!("{name}.loss"), &terms)?;
            let val = |n: Option<NodeId>| n.map(|n| g.value(n).data()[0]);
            group_values.push(GroupLoss::from_components(set.modality, val(s), val(d), val(f), val(sdf)));
            group_nodes.push((set.modality, total));
        }
        let whole = fwd
            .whole
            .map(|z| g.softmax_cross_entropy("whole.loss", z, label))
            .transpose()?;
        let mut terms: Vec<NodeId> = whole.into_iter().collect();
        terms.extend(group_nodes.iter().map(|(_, n)| *n));
        let total = g.sum("loss", &terms)?;
        let bundle = LossBundle::from_parts(whole.map(|n| g.value(n).data()[0]), group_values);
        debug_assert_eq!(bundle.total.to_bits(), g.value(total).data()[0].to_bits());
        Ok((
            LossNodes {
                groups: group_nodes,
                whole,
                total,
            },
            bundle,
        ))
    }

    /// Loss bundle and parameter gradients of one labelled sample.
    pub fn loss_and_grads(
        &self,
        params: &ParamStore,
        input: &SampleInput,
        label: usize,
    ) -> Result<(LossBundle, Gradients), NetError> {
        let mut g = Graph::new(params);
        let fwd = self.forward(&mut g, input)?;
        let (nodes, bundle) = self.loss(&mut g, &fwd, label)?;
        let grads = g.backward(nodes.total)?;
        Ok((bundle, grads))
    }

    /// Central-difference check of the total loss over every parameter.
    pub fn grad_check(
        &self,
        params: &ParamStore,
        input: &SampleInput,
        label: usize,
        epsilon: f64,
    ) -> Result<GradCheckReport, NetError> {
        self.check_input(input)?;
        let report = grad_check(params, epsilon, |g| {
            let fwd = self.forward(g, input).map_err(into_diff)?;
            let (nodes, _) = self.loss(g, &fwd, label).map_err(into_diff)?;
            Ok(nodes.total)
        })?;
        Ok(report)
    }

    /// [`Network::grad_check`] restricted to sampled coordinates of every
    /// parameter tensor; practical for desk-scale networks.
    pub fn grad_check_sampled(
        &self,
        params: &ParamStore,
        input: &SampleInput,
        label: usize,
        epsilon: f64,
        sampling: Sampling,
    ) -> Result<GradCheckReport, NetError> {
        self.check_input(input)?;
        let report = grad_check_sampled(params, epsilon, sampling, |g| {
            let fwd = self.forward(g, input).map_err(into_diff)?;
            let (nodes, _) = self.loss(g, &fwd, label).map_err(into_diff)?;
            Ok(nodes.total)
        })?;
        Ok(report)
    }

    /// Probability of the bona fide class from the scoring head.
    pub fn score(&self, params: &ParamStore, input: &SampleInput) -> Result<f64, NetError> {
        let mut g = Graph::new(params);
        let fwd = self.forward(&mut g, input)?;
        Ok(score_from_logits(g.value(fwd.score_logits).data()))
    }
}

fn fusion(level: usize, modality: &str, source: DiffError) -> NetError {
    NetError::Fusion {
        level,
        modality: modality.to_string(),
        source,
    }
}

fn into_diff(e: NetError) -> DiffError {
    match e {
        NetError::Diff(d) => d,
        other => DiffError::InvalidShape(other.to_string()),
    }
}

/// `softmax(z)[REAL]` for a 2-logit head.
pub fn score_from_logits(z: &[f64]) -> f64 {
    softmax(z)[REAL]
}
