//! Recurrent navigation policy: per-stream convolutional encoders, goal
//! embedding, GPS/compass encoder, a GRU core and a linear action head,
//! with exact full-episode backpropagation through time.
//!
//! All learnable weights live in one flat vector described by a [`Layout`].
//! Activations are stored HWC, convolution kernels as `[out][ky][kx][in]`,
//! dense weights as `[out][in]`.

pub mod gradcheck;
mod real;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use real::{matmul, Real};

use crate::fnv::fnv1a;
use crate::seed;
use crate::simcore::{Action, Observation, IMG_H, IMG_PIXELS, IMG_W};
use crate::taxonomy::{Granularity, Taxonomy};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Semantic frames only.
    Os,
    /// Color frames only.
    Rgb,
    /// Both, each through its own encoder.
    Rgbs,
}

impl InputMode {
    pub fn uses_semantic(self) -> bool {
        matches!(self, InputMode::Os | InputMode::Rgbs)
    }

    pub fn uses_color(self) -> bool {
        matches!(self, InputMode::Rgb | InputMode::Rgbs)
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Os => "os",
            InputMode::Rgb => "rgb",
            InputMode::Rgbs => "rgbs",
        })
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "os" => Ok(InputMode::Os),
            "rgb" => Ok(InputMode::Rgb),
            "rgbs" => Ok(InputMode::Rgbs),
            other => Err(format!("unknown input mode `{other}`")),
        }
    }
}

/// How semantic frames enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoding {
    /// One channel per label id.
    #[default]
    OneHot,
    /// Three channels: the label's palette color.
    PaletteColor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub encoding: ImageEncoding,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub visual_dim: usize,
    pub goal_dim: usize,
    pub gps_dim: usize,
    pub hidden_dim: usize,
    pub actions: usize,
    /// Extra semantic input channel marking pixels of the goal category.
    pub goal_mask: bool,
    /// Per-goal scale and shift of the first conv layer's channels.
    pub goal_film: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoding: ImageEncoding::OneHot,
            conv_filters: vec![8, 16],
            kernel: 3,
            stride: 2,
            visual_dim: 128,
            goal_dim: 32,
            gps_dim: 32,
            hidden_dim: 128,
            actions: Action::COUNT,
            goal_mask: true,
            goal_film: true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("observation does not match the network input: {0}")]
    Dimension(String),
    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("parameter vector has {got} entries, layout expects {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("probabilities do not sum to one (sum {0})")]
    NotNormalized(String),
}

pub const GPS_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl TensorSpec {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named slices of the flat parameter vector. Slices partition the vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    fn build(entries: Vec<(String, Vec<usize>)>) -> Layout {
        let mut offset = 0;
        let tensors = entries
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let t = TensorSpec {
                    name,
                    shape,
                    offset,
                    len,
                };
                offset += len;
                t
            })
            .collect();
        Layout {
            tensors,
            total: offset,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.get(name).unwrap_or_else(|| panic!("layout has no tensor `{name}`")).range()
    }

    pub fn descriptor(&self) -> String {
        self.tensors
            .iter()
            .map(|t| format!("{}:{:?}", t.name, t.shape))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.descriptor().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }
}

#[derive(Debug, Clone)]
struct StreamDesc {
    convs: Vec<ConvGeom>,
    conv_w: Vec<Range<usize>>,
    conv_b: Vec<Range<usize>>,
    fc_w: Range<usize>,
    fc_b: Range<usize>,
    flat: usize,
    /// First layer consumes label ids directly (one-hot input).
    onehot: bool,
    /// Last input channel of the first layer flags goal-category pixels.
    goal_mask: bool,
    /// `[goal][channel]` scale and shift tables for the first layer.
    film: Option<(Range<usize>, Range<usize>)>,
}

#[derive(Debug, Clone)]
struct Offsets {
    sem: Option<StreamDesc>,
    rgb: Option<StreamDesc>,
    goal_embed: Range<usize>,
    gps_w: Range<usize>,
    gps_b: Range<usize>,
    gru_w: Range<usize>,
    gru_u: Range<usize>,
    gru_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
    x_dim: usize,
}

/// A network architecture bound to a label space. Parameters are separate.
#[derive(Debug, Clone)]
pub struct Policy {
    arch: ArchConfig,
    mode: InputMode,
    granularity: Granularity,
    n_labels: usize,
    n_goal_classes: usize,
    layout: Arc<Layout>,
    /// Palette color per label id, scaled to [0, 1].
    label_colors: Vec<[f64; 3]>,
    /// Coarse category of each label id.
    label_coarse: Vec<usize>,
    off: Offsets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.values[t.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(dim: usize) -> HiddenState {
        HiddenState(vec![0.0; dim])
    }
}

impl Policy {
    pub fn new(arch: ArchConfig, mode: InputMode, tax: &Taxonomy, granularity: Granularity) -> Result<Policy, PolicyError> {
        let n_labels = tax.num_labels(granularity);
        let label_colors = (0..n_labels)
            .map(|l| {
                let c = tax.label_color(l, granularity);
                [f64::from(c[0]) / 255.0, f64::from(c[1]) / 255.0, f64::from(c[2]) / 255.0]
            })
            .collect();
        let label_coarse = (0..n_labels).map(|l| tax.coarse_of_label(l, granularity)).collect();
        Policy::with_label_space(arch, mode, granularity, tax.num_coarse(), label_colors, label_coarse)
    }

    pub fn with_label_space(
        arch: ArchConfig,
        mode: InputMode,
        granularity: Granularity,
        n_goal_classes: usize,
        label_colors: Vec<[f64; 3]>,
        label_coarse: Vec<usize>,
    ) -> Result<Policy, PolicyError> {
        let n_labels = label_colors.len();
        let bad = |m: &str| Err(PolicyError::Arch(m.to_string()));
        if arch.conv_filters.is_empty() || arch.conv_filters.contains(&0) {
            return bad("conv layers need at least one filter each");
        }
        if arch.kernel == 0 || arch.stride == 0 {
            return bad("kernel and stride must be positive");
        }
        if [arch.visual_dim, arch.goal_dim, arch.gps_dim, arch.hidden_dim].contains(&0) {
            return bad("all dims must be positive");
        }
        if arch.actions != Action::COUNT {
            return bad("action count must be 5");
        }
        if n_labels == 0 || n_labels > 256 || n_goal_classes == 0 || label_coarse.len() != n_labels {
            return bad("label space must have 1..=256 labels with one color and category each");
        }

        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        let mut stream_geoms = Vec::new();
        let streams: Vec<(&str, usize, bool)> = [
            (mode.uses_semantic(), "sem", arch.encoding == ImageEncoding::OneHot),
            (mode.uses_color(), "rgb", false),
        ]
        .into_iter()
        .filter(|s| s.0)
        .map(|(_, name, onehot)| {
            let base = if onehot { n_labels } else { 3 };
            let mask = name == "sem" && arch.goal_mask;
            (name, base + usize::from(mask), onehot)
        })
        .collect();
        for &(name, in_c, onehot) in &streams {
            let (mut h, mut w, mut c) = (IMG_H, IMG_W, in_c);
            let mut convs = Vec::new();
            for (i, &f) in arch.conv_filters.iter().enumerate() {
                let pad = arch.kernel / 2;
                if h + 2 * pad < arch.kernel || w + 2 * pad < arch.kernel {
                    return bad("too many conv layers for a 32x32 frame");
                }
                let g = ConvGeom {
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    out_h: (h + 2 * pad - arch.kernel) / arch.stride + 1,
                    out_w: (w + 2 * pad - arch.kernel) / arch.stride + 1,
                    out_c: f,
                    k: arch.kernel,
                    stride: arch.stride,
                    pad,
                };
                entries.push((format!("{name}.conv{i}.w"), vec![f, arch.kernel, arch.kernel, c]));
                entries.push((format!("{name}.conv{i}.b"), vec![f]));
                if i == 0 && arch.goal_film {
                    entries.push((format!("{name}.film.scale"), vec![n_goal_classes, f]));
                    entries.push((format!("{name}.film.shift"), vec![n_goal_classes, f]));
                }
                (h, w, c) = (g.out_h, g.out_w, f);
                convs.push(g);
            }
            let flat = h * w * c;
            entries.push((format!("{name}.fc.w"), vec![arch.visual_dim, flat]));
            entries.push((format!("{name}.fc.b"), vec![arch.visual_dim]));
            stream_geoms.push((name, convs, flat, onehot));
        }
        let n_streams = streams.len();
        let x_dim = n_streams * arch.visual_dim + arch.goal_dim + arch.gps_dim;
        let hd = arch.hidden_dim;
        entries.push(("goal.embed".into(), vec![n_goal_classes, arch.goal_dim]));
        entries.push(("gps.w".into(), vec![arch.gps_dim, GPS_FEATURES]));
        entries.push(("gps.b".into(), vec![arch.gps_dim]));
        for gate in ["z", "r", "h"] {
            entries.push((format!("gru.w{gate}"), vec![hd, x_dim]));
        }
        for gate in ["z", "r", "h"] {
            entries.push((format!("gru.u{gate}"), vec![hd, hd]));
        }
        for gate in ["z", "r", "h"] {
            entries.push((format!("gru.b{gate}"), vec![hd]));
        }
        entries.push(("head.w".into(), vec![arch.actions, hd]));
        entries.push(("head.b".into(), vec![arch.actions]));
        let layout = Layout::build(entries);

        let span = |a: &str, b: &str| layout.range(a).start..layout.range(b).end;
        let mut sem = None;
        let mut rgb = None;
        for (name, convs, flat, onehot) in stream_geoms {
            let desc = StreamDesc {
                conv_w: (0..convs.len()).map(|i| layout.range(&format!("{name}.conv{i}.w"))).collect(),
                conv_b: (0..convs.len()).map(|i| layout.range(&format!("{name}.conv{i}.b"))).collect(),
                fc_w: layout.range(&format!("{name}.fc.w")),
                fc_b: layout.range(&format!("{name}.fc.b")),
                convs,
                flat,
                onehot,
                goal_mask: name == "sem" && arch.goal_mask,
                film: arch
                    .goal_film
                    .then(|| (layout.range(&format!("{name}.film.scale")), layout.range(&format!("{name}.film.shift")))),
            };
            if name == "sem" {
                sem = Some(desc);
            } else {
                rgb = Some(desc);
            }
        }
        let off = Offsets {
            sem,
            rgb,
            goal_embed: layout.range("goal.embed"),
            gps_w: layout.range("gps.w"),
            gps_b: layout.range("gps.b"),
            gru_w: span("gru.wz", "gru.wh"),
            gru_u: span("gru.uz", "gru.uh"),
            gru_b: span("gru.bz", "gru.bh"),
            head_w: layout.range("head.w"),
            head_b: layout.range("head.b"),
            x_dim,
        };
        Ok(Policy {
            arch,
            mode,
            granularity,
            n_labels,
            n_goal_classes,
            layout: Arc::new(layout),
            label_colors,
            label_coarse,
            off,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn hidden_dim(&self) -> usize {
        self.arch.hidden_dim
    }

    /// Layout hash folded with everything else that changes the meaning of
    /// the parameter vector.
    pub fn layout_hash(&self) -> u64 {
        let desc = format!(
            "{}|mode={}|enc={:?}|mask={}|film={}|labels={}|goals={}|k={}|s={}",
            self.layout.descriptor(),
            self.mode,
            self.arch.encoding,
            self.arch.goal_mask,
            self.arch.goal_film,
            self.n_labels,
            self.n_goal_classes,
            self.arch.kernel,
            self.arch.stride
        );
        fnv1a(desc.as_bytes())
    }

    pub fn zero_params(&self) -> PolicyParams {
        PolicyParams {
            layout: Arc::clone(&self.layout),
            values: vec![0.0; self.layout.total()],
        }
    }

    /// Uniform fan-in initialization (He bound for ReLU layers, 1/sqrt(fan_in)
    /// otherwise); biases zero. Deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> PolicyParams {
        let mut rng = seed::rng(seed, 0x1417);
        let mut values = vec![0.0; self.layout.total()];
        for t in self.layout.tensors() {
            let name = t.name.as_str();
            if name.ends_with(".b") || name.starts_with("gru.b") || name.contains(".film.") {
                continue;
            }
            let fan_in: usize = if name == "goal.embed" { 1 } else { t.shape[1..].iter().product() };
            let relu = name.contains(".conv") || name.ends_with("fc.w") || name == "gps.w";
            let bound = if relu { (6.0 / fan_in as f64).sqrt() } else { 1.0 / (fan_in as f64).sqrt() };
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in &mut values[t.range()] {
                *v = dist.sample(&mut rng);
            }
        }
        PolicyParams {
            layout: Arc::clone(&self.layout),
            values,
        }
    }

    fn check_params(&self, len: usize) -> Result<(), PolicyError> {
        if len != self.layout.total() {
            return Err(PolicyError::ParamCount {
                got: len,
                expected: self.layout.total(),
            });
        }
        Ok(())
    }

    fn check_obs(&self, obs: &Observation) -> Result<(), PolicyError> {
        if self.mode.uses_semantic() {
            if obs.semantic.len() != IMG_PIXELS {
                return Err(PolicyError::Dimension(format!("semantic frame has {} labels", obs.semantic.len())));
            }
            if let Some(&bad) = obs.semantic.iter().find(|&&l| l as usize >= self.n_labels) {
                return Err(PolicyError::Dimension(format!("label {bad} outside the {}-label space", self.n_labels)));
            }
        }
        if self.mode.uses_color() {
            match &obs.color {
                Some(c) if c.len() == IMG_PIXELS => {}
                Some(c) => return Err(PolicyError::Dimension(format!("color frame has {} pixels", c.len()))),
                None => return Err(PolicyError::Dimension(format!("{} mode needs color frames", self.mode))),
            }
        }
        Ok(())
    }

    fn check_goal(&self, goal: usize) -> Result<(), PolicyError> {
        if goal >= self.n_goal_classes {
            return Err(PolicyError::Dimension(format!("goal {goal} outside {} classes", self.n_goal_classes)));
        }
        Ok(())
    }

    /// Check that a trajectory can be fed to this network.
    pub fn validate_trajectory(&self, traj: &Trajectory) -> Result<(), PolicyError> {
        if traj.is_empty() {
            return Err(PolicyError::EmptyTrajectory);
        }
        self.check_goal(traj.meta.goal)?;
        traj.steps.iter().try_for_each(|s| self.check_obs(&s.obs))
    }

    /// One inference step: action probabilities and the next hidden state.
    pub fn forward_step(&self, params: &PolicyParams, obs: &Observation, goal: usize, h: &HiddenState) -> Result<([f64; 5], HiddenState), PolicyError> {
        self.check_params(params.values.len())?;
        self.check_obs(obs)?;
        self.check_goal(goal)?;
        if h.0.len() != self.arch.hidden_dim {
            return Err(PolicyError::Dimension(format!("hidden state has {} entries", h.0.len())));
        }
        let cache = self.forward(&params.values, &[obs], goal, &h.0);
        if let Some(step) = cache.first_non_finite() {
            return Err(PolicyError::NonFinite { step });
        }
        let mut probs = [0.0; 5];
        probs.copy_from_slice(&cache.probs[..5]);
        Ok((probs, HiddenState(cache.hs[self.arch.hidden_dim..].to_vec())))
    }

    /// Hidden states h_1..h_T obtained by running the observations from a
    /// zero state.
    pub fn hidden_trace(&self, params: &PolicyParams, obs: &[&Observation], goal: usize) -> Result<Vec<HiddenState>, PolicyError> {
        self.check_params(params.values.len())?;
        for o in obs {
            self.check_obs(o)?;
        }
        self.check_goal(goal)?;
        let hd = self.arch.hidden_dim;
        let cache = self.forward(&params.values, obs, goal, &vec![0.0; hd]);
        Ok(cache.hs.chunks(hd).skip(1).map(|c| HiddenState(c.to_vec())).collect())
    }

    /// Sum over steps of -log p(a_t | o_<=t) with the hidden state carried
    /// through the episode, and its gradient (full BPTT).
    pub fn bptt_backward(&self, params: &PolicyParams, traj: &Trajectory) -> Result<(f64, Vec<f64>), PolicyError> {
        let mut grad = vec![0.0; self.layout.total()];
        let loss = self.loss_and_grad(&params.values, traj, &mut grad)?;
        Ok((loss, grad))
    }

    /// Precision-generic loss and gradient; the gradient is added to `grad`.
    pub fn loss_and_grad<T: Real>(&self, params: &[T], traj: &Trajectory, grad: &mut [T]) -> Result<f64, PolicyError> {
        self.check_params(params.len())?;
        self.check_params(grad.len())?;
        if traj.is_empty() {
            return Err(PolicyError::EmptyTrajectory);
        }
        let obs: Vec<&Observation> = traj.steps.iter().map(|s| &s.obs).collect();
        for o in &obs {
            self.check_obs(o)?;
        }
        self.check_goal(traj.meta.goal)?;
        let actions: Vec<usize> = traj.steps.iter().map(|s| s.action.id() as usize).collect();
        let cache = self.forward(params, &obs, traj.meta.goal, &vec![T::zero(); self.arch.hidden_dim]);
        if let Some(step) = cache.first_non_finite() {
            return Err(PolicyError::NonFinite { step });
        }
        let loss = cache.nll(&actions);
        self.backward(params, &cache, &actions, grad);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let _ = i;
            return Err(PolicyError::NonFinite { step: actions.len() - 1 });
        }
        Ok(loss)
    }

    /// Loss only (used by finite-difference checks).
    pub fn loss<T: Real>(&self, params: &[T], traj: &Trajectory) -> Result<f64, PolicyError> {
        self.check_params(params.len())?;
        if traj.is_empty() {
            return Err(PolicyError::EmptyTrajectory);
        }
        let obs: Vec<&Observation> = traj.steps.iter().map(|s| &s.obs).collect();
        for o in &obs {
            self.check_obs(o)?;
        }
        self.check_goal(traj.meta.goal)?;
        let actions: Vec<usize> = traj.steps.iter().map(|s| s.action.id() as usize).collect();
        let cache = self.forward(params, &obs, traj.meta.goal, &vec![T::zero(); self.arch.hidden_dim]);
        if let Some(step) = cache.first_non_finite() {
            return Err(PolicyError::NonFinite { step });
        }
        Ok(cache.nll(&actions))
    }

    /// Per-step logits together with a hash of the on/off pattern of every
    /// ReLU unit. Two parameter vectors with equal signatures lie in the
    /// same linear region of the encoders, so a central difference between
    /// them is free of kinks.
    pub fn probe<T: Real>(&self, params: &[T], traj: &Trajectory) -> Result<(u64, Vec<f64>), PolicyError> {
        self.check_params(params.len())?;
        let obs: Vec<&Observation> = traj.steps.iter().map(|s| &s.obs).collect();
        for o in &obs {
            self.check_obs(o)?;
        }
        self.check_goal(traj.meta.goal)?;
        let cache = self.forward(params, &obs, traj.meta.goal, &vec![T::zero(); self.arch.hidden_dim]);
        if let Some(step) = cache.first_non_finite() {
            return Err(PolicyError::NonFinite { step });
        }
        let mut h = crate::fnv::Fnv1a::new();
        let units: Vec<&T> = cache
            .streams()
            .flat_map(|s| s.pre.iter().flatten().chain(&s.fc_pre))
            .chain(&cache.gps_pre)
            .collect();
        for chunk in units.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |b, (i, v)| b | (u8::from(**v > T::zero()) << i));
            h.write(&[byte]);
        }
        Ok((h.finish(), cache.logits.iter().map(|v| v.f64()).collect()))
    }

    fn goal_labels(&self, goal: usize) -> Vec<bool> {
        self.label_coarse.iter().map(|&c| c == goal).collect()
    }

    fn frame_input<T: Real>(&self, stream: &StreamDesc, is_sem: bool, obs: &[&Observation], goal: usize) -> Vec<T> {
        if stream.onehot {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(obs.len() * IMG_PIXELS * 4);
        for o in obs {
            if is_sem {
                for &l in &o.semantic {
                    out.extend(self.label_colors[l as usize].iter().map(|&v| T::of(v)));
                    if stream.goal_mask {
                        out.push(if self.label_coarse[l as usize] == goal { T::one() } else { T::zero() });
                    }
                }
            } else {
                let color = o.color.as_ref().expect("checked color frame");
                for px in color {
                    out.extend(px.iter().map(|&v| T::of(f64::from(v) / 255.0)));
                }
            }
        }
        out
    }

    fn forward<T: Real>(&self, p: &[T], obs: &[&Observation], goal: usize, h0: &[T]) -> Cache<T> {
        let steps = obs.len();
        let hd = self.arch.hidden_dim;
        let off = &self.off;
        let labels: Vec<u8> = if self.mode.uses_semantic() {
            obs.iter().flat_map(|o| o.semantic.iter().copied()).collect()
        } else {
            Vec::new()
        };

        let goal_labels = self.goal_labels(goal);
        let sem = off.sem.as_ref().map(|d| {
            let input = self.frame_input(d, true, obs, goal);
            stream_forward(d, p, steps, &labels, goal, &goal_labels, input)
        });
        let rgb = off.rgb.as_ref().map(|d| {
            let input = self.frame_input(d, false, obs, goal);
            stream_forward(d, p, steps, &labels, goal, &goal_labels, input)
        });

        let gd = self.arch.goal_dim;
        let embed = &p[off.goal_embed.clone()][goal * gd..(goal + 1) * gd];
        let gps_in: Vec<T> = obs
            .iter()
            .flat_map(|o| [o.gps[0], o.gps[1], o.gps[2], o.compass].map(T::of))
            .collect();
        let gps_pre = dense(&gps_in, &p[off.gps_w.clone()], &p[off.gps_b.clone()], steps, GPS_FEATURES, self.arch.gps_dim);
        let gps_post = relu(&gps_pre);

        let xd = off.x_dim;
        let vd = self.arch.visual_dim;
        let mut x = vec![T::zero(); steps * xd];
        for t in 0..steps {
            let row = &mut x[t * xd..(t + 1) * xd];
            let mut at = 0;
            for s in [&sem, &rgb].into_iter().flatten() {
                row[at..at + vd].copy_from_slice(&s.fc_post[t * vd..(t + 1) * vd]);
                at += vd;
            }
            row[at..at + gd].copy_from_slice(embed);
            at += gd;
            row[at..].copy_from_slice(&gps_post[t * self.arch.gps_dim..(t + 1) * self.arch.gps_dim]);
        }
        let aw = dense(&x, &p[off.gru_w.clone()], &p[off.gru_b.clone()], steps, xd, 3 * hd);

        let u = &p[off.gru_u.clone()];
        let (u_zr, u_h) = u.split_at(2 * hd * hd);
        let mut hs = vec![T::zero(); (steps + 1) * hd];
        hs[..hd].copy_from_slice(h0);
        let mut z = vec![T::zero(); steps * hd];
        let mut r = vec![T::zero(); steps * hd];
        let mut n = vec![T::zero(); steps * hd];
        let mut rh = vec![T::zero(); steps * hd];
        let mut uzr = vec![T::zero(); 2 * hd];
        let mut uhv = vec![T::zero(); hd];
        for t in 0..steps {
            let (done, rest) = hs.split_at_mut((t + 1) * hd);
            let h_prev = &done[t * hd..];
            let h_next = &mut rest[..hd];
            matvec(u_zr, h_prev, &mut uzr);
            let a = &aw[t * 3 * hd..(t + 1) * 3 * hd];
            let zt = &mut z[t * hd..(t + 1) * hd];
            let rt = &mut r[t * hd..(t + 1) * hd];
            let rht = &mut rh[t * hd..(t + 1) * hd];
            for i in 0..hd {
                zt[i] = sigmoid(a[i] + uzr[i]);
                rt[i] = sigmoid(a[hd + i] + uzr[hd + i]);
                rht[i] = rt[i] * h_prev[i];
            }
            matvec(u_h, rht, &mut uhv);
            let nt = &mut n[t * hd..(t + 1) * hd];
            for i in 0..hd {
                nt[i] = (a[2 * hd + i] + uhv[i]).tanh();
                h_next[i] = (T::one() - zt[i]) * h_prev[i] + zt[i] * nt[i];
            }
        }
        let na = self.arch.actions;
        let logits = dense(&hs[hd..], &p[off.head_w.clone()], &p[off.head_b.clone()], steps, hd, na);
        let mut probs = vec![T::zero(); steps * na];
        for t in 0..steps {
            softmax(&logits[t * na..(t + 1) * na], &mut probs[t * na..(t + 1) * na]);
        }
        Cache {
            steps,
            actions: na,
            goal,
            labels,
            sem,
            rgb,
            gps_in,
            gps_pre,
            gps_post,
            x,
            hs,
            z,
            r,
            n,
            rh,
            logits,
            probs,
        }
    }

    fn backward<T: Real>(&self, p: &[T], c: &Cache<T>, actions: &[usize], grad: &mut [T]) {
        let off = &self.off;
        let steps = c.steps;
        let hd = self.arch.hidden_dim;
        let na = c.actions;
        let xd = off.x_dim;

        let mut dlogits = c.probs.clone();
        for (t, &a) in actions.iter().enumerate() {
            dlogits[t * na + a] = dlogits[t * na + a] - T::one();
        }
        let hs_out = &c.hs[hd..];
        matmul(&mut grad[off.head_w.clone()], &dlogits, hs_out, na, steps, hd, true, false, true);
        add_col_sums(&mut grad[off.head_b.clone()], &dlogits, na);
        let mut dhs = vec![T::zero(); steps * hd];
        matmul(&mut dhs, &dlogits, &p[off.head_w.clone()], steps, na, hd, false, false, false);

        let u = &p[off.gru_u.clone()];
        let (u_zr, u_h) = u.split_at(2 * hd * hd);
        let mut da = vec![T::zero(); steps * 3 * hd];
        let mut da_zr = vec![T::zero(); steps * 2 * hd];
        let mut da_n = vec![T::zero(); steps * hd];
        let mut dh = vec![T::zero(); hd];
        let mut dh_prev = vec![T::zero(); hd];
        let mut drh = vec![T::zero(); hd];
        for t in (0..steps).rev() {
            for i in 0..hd {
                dh[i] = dh[i] + dhs[t * hd + i];
            }
            let h_prev = &c.hs[t * hd..(t + 1) * hd];
            let zt = &c.z[t * hd..(t + 1) * hd];
            let rt = &c.r[t * hd..(t + 1) * hd];
            let nt = &c.n[t * hd..(t + 1) * hd];
            let dan = &mut da_n[t * hd..(t + 1) * hd];
            for i in 0..hd {
                let dn = dh[i] * zt[i];
                dan[i] = dn * (T::one() - nt[i] * nt[i]);
                dh_prev[i] = dh[i] * (T::one() - zt[i]);
            }
            matvec_t(u_h, dan, &mut drh);
            let dazr = &mut da_zr[t * 2 * hd..(t + 1) * 2 * hd];
            for i in 0..hd {
                let dz = dh[i] * (nt[i] - h_prev[i]);
                let dr = drh[i] * h_prev[i];
                dh_prev[i] = dh_prev[i] + drh[i] * rt[i];
                dazr[i] = dz * zt[i] * (T::one() - zt[i]);
                dazr[hd + i] = dr * rt[i] * (T::one() - rt[i]);
            }
            matvec_t_add(u_zr, dazr, &mut dh_prev);
            let row = &mut da[t * 3 * hd..(t + 1) * 3 * hd];
            row[..2 * hd].copy_from_slice(dazr);
            row[2 * hd..].copy_from_slice(dan);
            std::mem::swap(&mut dh, &mut dh_prev);
        }
        {
            let gu = &mut grad[off.gru_u.clone()];
            let (gu_zr, gu_h) = gu.split_at_mut(2 * hd * hd);
            matmul(gu_zr, &da_zr, &c.hs[..steps * hd], 2 * hd, steps, hd, true, false, true);
            matmul(gu_h, &da_n, &c.rh, hd, steps, hd, true, false, true);
        }
        matmul(&mut grad[off.gru_w.clone()], &da, &c.x, 3 * hd, steps, xd, true, false, true);
        add_col_sums(&mut grad[off.gru_b.clone()], &da, 3 * hd);
        let mut dx = vec![T::zero(); steps * xd];
        matmul(&mut dx, &da, &p[off.gru_w.clone()], steps, 3 * hd, xd, false, false, false);

        let vd = self.arch.visual_dim;
        let gd = self.arch.goal_dim;
        let pd = self.arch.gps_dim;
        let goal_labels = self.goal_labels(c.goal);
        let mut at = 0;
        for (desc, cache) in [(&off.sem, &c.sem), (&off.rgb, &c.rgb)] {
            let (Some(desc), Some(cache)) = (desc, cache) else {
                continue;
            };
            let mut dvis = vec![T::zero(); steps * vd];
            for t in 0..steps {
                dvis[t * vd..(t + 1) * vd].copy_from_slice(&dx[t * xd + at..t * xd + at + vd]);
            }
            stream_backward(desc, p, cache, steps, &c.labels, c.goal, &goal_labels, dvis, grad);
            at += vd;
        }
        {
            let ge = &mut grad[off.goal_embed.clone()][c.goal * gd..(c.goal + 1) * gd];
            for t in 0..steps {
                for i in 0..gd {
                    ge[i] = ge[i] + dx[t * xd + at + i];
                }
            }
            at += gd;
        }
        let mut dgps = vec![T::zero(); steps * pd];
        for t in 0..steps {
            for i in 0..pd {
                dgps[t * pd + i] = if c.gps_pre[t * pd + i] > T::zero() { dx[t * xd + at + i] } else { T::zero() };
            }
        }
        matmul(&mut grad[off.gps_w.clone()], &dgps, &c.gps_in, pd, steps, GPS_FEATURES, true, false, true);
        add_col_sums(&mut grad[off.gps_b.clone()], &dgps, pd);
    }
}

struct StreamCache<T> {
    /// im2col matrices of the dense (non one-hot) conv layers.
    cols: Vec<Vec<T>>,
    /// First layer output before goal modulation.
    film_in: Vec<T>,
    pre: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    fc_pre: Vec<T>,
    fc_post: Vec<T>,
}

struct Cache<T> {
    steps: usize,
    actions: usize,
    goal: usize,
    labels: Vec<u8>,
    sem: Option<StreamCache<T>>,
    rgb: Option<StreamCache<T>>,
    gps_in: Vec<T>,
    gps_pre: Vec<T>,
    #[allow(dead_code)]
    gps_post: Vec<T>,
    x: Vec<T>,
    hs: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    rh: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
}

impl<T: Real> Cache<T> {
    fn streams(&self) -> impl Iterator<Item = &StreamCache<T>> {
        self.sem.iter().chain(self.rgb.iter())
    }

    fn first_non_finite(&self) -> Option<usize> {
        let na = self.actions;
        (0..self.steps).find(|&t| self.logits[t * na..(t + 1) * na].iter().any(|v| !v.is_finite()))
    }

    fn nll(&self, actions: &[usize]) -> f64 {
        let na = self.actions;
        actions
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                let l = &self.logits[t * na..(t + 1) * na];
                let max = l.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + l.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                (lse - l[a]).f64()
            })
            .sum()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// `out[rows x n] = x[rows x k] * w[n x k]^T + b`.
fn dense<T: Real>(x: &[T], w: &[T], b: &[T], rows: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    matmul(&mut out, x, w, rows, k, n, false, true, true);
    out
}

fn add_col_sums<T: Real>(acc: &mut [T], m: &[T], cols: usize) {
    for row in m.chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
}

/// `out = M v` for row-major M with `out.len()` rows.
fn matvec<T: Real>(m: &[T], v: &[T], out: &mut [T]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = row.iter().zip(v).fold(T::zero(), |s, (&a, &b)| s + a * b);
    }
}

/// `out = M^T v`.
fn matvec_t<T: Real>(m: &[T], v: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    matvec_t_add(m, v, out);
}

fn matvec_t_add<T: Real>(m: &[T], v: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o = *o + vi * a;
        }
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let dst = &mut row[(ky * g.k + kx) * g.in_c..][..g.in_c];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy < 0 || ix < 0 || iy as usize >= g.in_h || ix as usize >= g.in_w {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        dst.copy_from_slice(&input[src..src + g.in_c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &dcols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy < 0 || ix < 0 || iy as usize >= g.in_h || ix as usize >= g.in_w {
                        continue;
                    }
                    let src = &row[(ky * g.k + kx) * g.in_c..][..g.in_c];
                    let dst = &mut dinput[(iy as usize * g.in_w + ix as usize) * g.in_c..][..g.in_c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Transpose `[out][ky][kx][label]` to `[ky][kx][label][out]`.
fn transpose_onehot_kernel<T: Real>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let taps = g.k * g.k;
    let mut wt = vec![T::zero(); w.len()];
    for o in 0..g.out_c {
        for tap in 0..taps {
            for l in 0..g.in_c {
                wt[(tap * g.in_c + l) * g.out_c + o] = w[(o * taps + tap) * g.in_c + l];
            }
        }
    }
    wt
}

/// First layer on one-hot labels: a gather of kernel rows per pixel. With
/// `mask`, pixels whose label is flagged also activate the last channel.
fn onehot_conv<T: Real>(labels: &[u8], mask: Option<&[bool]>, g: &ConvGeom, wt: &[T], b: &[T], out: &mut [T]) {
    let oc = g.out_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * oc..][..oc];
            o.copy_from_slice(b);
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.in_h {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.in_w {
                        continue;
                    }
                    let label = labels[iy as usize * g.in_w + ix as usize] as usize;
                    let tap = (ky * g.k + kx) * g.in_c;
                    let w = &wt[(tap + label) * oc..][..oc];
                    for (v, &k) in o.iter_mut().zip(w) {
                        *v = *v + k;
                    }
                    if mask.is_some_and(|m| m[label]) {
                        let w = &wt[(tap + g.in_c - 1) * oc..][..oc];
                        for (v, &k) in o.iter_mut().zip(w) {
                            *v = *v + k;
                        }
                    }
                }
            }
        }
    }
}

fn onehot_conv_grad<T: Real>(labels: &[u8], mask: Option<&[bool]>, g: &ConvGeom, dpre: &[T], dwt: &mut [T]) {
    let oc = g.out_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let d = &dpre[(oy * g.out_w + ox) * oc..][..oc];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.in_h {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.in_w {
                        continue;
                    }
                    let label = labels[iy as usize * g.in_w + ix as usize] as usize;
                    let tap = (ky * g.k + kx) * g.in_c;
                    let w = &mut dwt[(tap + label) * oc..][..oc];
                    for (v, &k) in w.iter_mut().zip(d) {
                        *v = *v + k;
                    }
                    if mask.is_some_and(|m| m[label]) {
                        let w = &mut dwt[(tap + g.in_c - 1) * oc..][..oc];
                        for (v, &k) in w.iter_mut().zip(d) {
                            *v = *v + k;
                        }
                    }
                }
            }
        }
    }
}

fn stream_forward<T: Real>(d: &StreamDesc, p: &[T], steps: usize, labels: &[u8], goal: usize, goal_labels: &[bool], input: Vec<T>) -> StreamCache<T> {
    let mut film_in = Vec::new();
    let mask = d.goal_mask.then_some(goal_labels);
    let mut cols = Vec::with_capacity(d.convs.len());
    let mut pre = Vec::with_capacity(d.convs.len());
    let mut post: Vec<Vec<T>> = Vec::with_capacity(d.convs.len());
    for (i, g) in d.convs.iter().enumerate() {
        let w = &p[d.conv_w[i].clone()];
        let b = &p[d.conv_b[i].clone()];
        let rows = steps * g.positions();
        let mut out = vec![T::zero(); rows * g.out_c];
        if i == 0 && d.onehot {
            debug_assert_eq!(g.in_c, goal_labels.len() + usize::from(d.goal_mask));
            let wt = transpose_onehot_kernel(w, g);
            for t in 0..steps {
                let fr = &labels[t * IMG_PIXELS..(t + 1) * IMG_PIXELS];
                onehot_conv(fr, mask, g, &wt, b, &mut out[t * g.positions() * g.out_c..(t + 1) * g.positions() * g.out_c]);
            }
            cols.push(Vec::new());
        } else {
            let src: &[T] = if i == 0 { &input } else { &post[i - 1] };
            let mut c = vec![T::zero(); rows * g.patch()];
            for t in 0..steps {
                im2col(
                    &src[t * g.in_len()..(t + 1) * g.in_len()],
                    g,
                    &mut c[t * g.positions() * g.patch()..(t + 1) * g.positions() * g.patch()],
                );
            }
            for row in out.chunks_mut(g.out_c) {
                row.copy_from_slice(b);
            }
            matmul(&mut out, &c, w, rows, g.patch(), g.out_c, false, true, true);
            cols.push(c);
        }
        if let (0, Some((scale, shift))) = (i, &d.film) {
            let oc = g.out_c;
            let gamma = &p[scale.clone()][goal * oc..(goal + 1) * oc];
            let beta = &p[shift.clone()][goal * oc..(goal + 1) * oc];
            film_in = out.clone();
            for row in out.chunks_mut(oc) {
                for ((v, &gm), &bt) in row.iter_mut().zip(gamma).zip(beta) {
                    *v = *v * (T::one() + gm) + bt;
                }
            }
        }
        post.push(relu(&out));
        pre.push(out);
    }
    let last = post.last().expect("at least one conv layer");
    let vd = d.fc_b.len();
    let fc_pre = dense(last, &p[d.fc_w.clone()], &p[d.fc_b.clone()], steps, d.flat, vd);
    let fc_post = relu(&fc_pre);
    StreamCache {
        cols,
        film_in,
        pre,
        post,
        fc_pre,
        fc_post,
    }
}

#[allow(clippy::too_many_arguments)]
fn stream_backward<T: Real>(
    d: &StreamDesc,
    p: &[T],
    c: &StreamCache<T>,
    steps: usize,
    labels: &[u8],
    goal: usize,
    goal_labels: &[bool],
    dvis: Vec<T>,
    grad: &mut [T],
) {
    let mask = d.goal_mask.then_some(goal_labels);
    let vd = d.fc_b.len();
    let mut dfc = dvis;
    for (g, &pre) in dfc.iter_mut().zip(&c.fc_pre) {
        if pre <= T::zero() {
            *g = T::zero();
        }
    }
    let last = c.post.last().expect("conv layer");
    matmul(&mut grad[d.fc_w.clone()], &dfc, last, vd, steps, d.flat, true, false, true);
    add_col_sums(&mut grad[d.fc_b.clone()], &dfc, vd);
    let mut dpost = vec![T::zero(); steps * d.flat];
    matmul(&mut dpost, &dfc, &p[d.fc_w.clone()], steps, vd, d.flat, false, false, false);

    for i in (0..d.convs.len()).rev() {
        let g = &d.convs[i];
        let rows = steps * g.positions();
        let mut dpre = dpost;
        for (v, &pre) in dpre.iter_mut().zip(&c.pre[i]) {
            if pre <= T::zero() {
                *v = T::zero();
            }
        }
        if let (0, Some((scale, shift))) = (i, &d.film) {
            let oc = g.out_c;
            let gamma = &p[scale.clone()][goal * oc..(goal + 1) * oc];
            {
                let dg = &mut grad[scale.clone()][goal * oc..(goal + 1) * oc];
                for (drow, xrow) in dpre.chunks(oc).zip(c.film_in.chunks(oc)) {
                    for ((a, &dv), &xv) in dg.iter_mut().zip(drow).zip(xrow) {
                        *a = *a + dv * xv;
                    }
                }
            }
            add_col_sums(&mut grad[shift.clone()][goal * oc..(goal + 1) * oc], &dpre, oc);
            for row in dpre.chunks_mut(oc) {
                for (v, &gm) in row.iter_mut().zip(gamma) {
                    *v = *v * (T::one() + gm);
                }
            }
        }
        add_col_sums(&mut grad[d.conv_b[i].clone()], &dpre, g.out_c);
        if i == 0 && d.onehot {
            let mut dwt = vec![T::zero(); d.conv_w[0].len()];
            for t in 0..steps {
                let fr = &labels[t * IMG_PIXELS..(t + 1) * IMG_PIXELS];
                let chunk = g.positions() * g.out_c;
                onehot_conv_grad(fr, mask, g, &dpre[t * chunk..(t + 1) * chunk], &mut dwt);
            }
            let taps = g.k * g.k;
            let gw = &mut grad[d.conv_w[0].clone()];
            for o in 0..g.out_c {
                for tap in 0..taps {
                    for l in 0..g.in_c {
                        let idx = (o * taps + tap) * g.in_c + l;
                        gw[idx] = gw[idx] + dwt[(tap * g.in_c + l) * g.out_c + o];
                    }
                }
            }
            break;
        }
        matmul(&mut grad[d.conv_w[i].clone()], &dpre, &c.cols[i], g.out_c, rows, g.patch(), true, false, true);
        if i == 0 {
            break;
        }
        let mut dcols = vec![T::zero(); rows * g.patch()];
        matmul(&mut dcols, &dpre, &p[d.conv_w[i].clone()], rows, g.out_c, g.patch(), false, false, false);
        let mut dinput = vec![T::zero(); steps * g.in_len()];
        for t in 0..steps {
            col2im_add(
                &dcols[t * g.positions() * g.patch()..(t + 1) * g.positions() * g.patch()],
                g,
                &mut dinput[t * g.in_len()..(t + 1) * g.in_len()],
            );
        }
        dpost = dinput;
    }
}

/// Action selection rule at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Argmax,
    Sample,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "argmax" => Ok(Strategy::Argmax),
            "sample" => Ok(Strategy::Sample),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Pick an action: argmax with lowest-index tie-breaking, or a draw from the
/// distribution using `rng`.
pub fn act(probs: &[f64; 5], strategy: Strategy, rng: &mut impl Rng) -> Result<Action, PolicyError> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PolicyError::NotNormalized(format!("{sum}")));
    }
    let idx = match strategy {
        Strategy::Argmax => {
            let mut best = 0;
            for i in 1..5 {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            best
        }
        Strategy::Sample => {
            let u: f64 = rng.gen::<f64>() * sum;
            let mut acc = 0.0;
            let mut pick = 4;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            // never land on a zero-probability trailing entry
            while probs[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        }
    };
    Ok(Action::from_id(idx as u8).expect("index < 5"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(mode: InputMode) -> Policy {
        Policy::new(ArchConfig::default(), mode, &Taxonomy::desk_default(), Granularity::Coarse).unwrap()
    }

    fn blank_obs(label: u8) -> Observation {
        Observation {
            semantic: vec![label; IMG_PIXELS],
            color: Some(vec![[10, 200, 30]; IMG_PIXELS]),
            gps: [0.0; 3],
            compass: 0.0,
        }
    }

    #[test]
    fn layout_partitions_vector() {
        for mode in [InputMode::Os, InputMode::Rgb, InputMode::Rgbs] {
            let p = policy(mode);
            let mut next = 0;
            for t in p.layout().tensors() {
                assert_eq!(t.offset, next, "{}", t.name);
                next += t.len;
            }
            assert_eq!(next, p.layout().total());
        }
        let os = policy(InputMode::Os);
        assert!(os.layout().get("rgb.conv0.w").is_none());
        assert_eq!(os.layout().get("sem.conv0.w").unwrap().shape, vec![8, 3, 3, 13]);
        assert_eq!(os.layout().get("sem.fc.w").unwrap().shape, vec![128, 8 * 8 * 16]);
        assert_eq!(os.layout().get("gru.wz").unwrap().shape, vec![128, 128 + 32 + 32]);
        let rgbs = policy(InputMode::Rgbs);
        assert_eq!(rgbs.layout().get("gru.wz").unwrap().shape, vec![128, 2 * 128 + 64]);
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = policy(InputMode::Rgbs);
        let (probs, h) = p.forward_step(&p.zero_params(), &blank_obs(0), 3, &HiddenState::zeros(128)).unwrap();
        for v in probs {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!(h.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let p = policy(InputMode::Os);
        assert_eq!(p.init_params(3), p.init_params(3));
        let (a, b) = (p.init_params(3), p.init_params(4));
        let differ = a.values.iter().zip(&b.values).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.len() as f64, "{differ} of {}", a.len());
        assert!(a.all_finite());
    }

    #[test]
    fn probabilities_normalized_and_pure() {
        let p = policy(InputMode::Rgbs);
        let params = p.init_params(9);
        let h = HiddenState(vec![0.1; 128]);
        let (a, ha) = p.forward_step(&params, &blank_obs(5), 4, &h).unwrap();
        let (b, hb) = p.forward_step(&params, &blank_obs(5), 4, &h).unwrap();
        assert_eq!((a, ha), (b, hb));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let p = policy(InputMode::Rgb);
        let mut o = blank_obs(0);
        o.color = None;
        assert!(matches!(
            p.forward_step(&p.zero_params(), &o, 3, &HiddenState::zeros(128)),
            Err(PolicyError::Dimension(_))
        ));
        let os = policy(InputMode::Os);
        assert!(matches!(
            os.forward_step(&os.zero_params(), &blank_obs(40), 3, &HiddenState::zeros(128)),
            Err(PolicyError::Dimension(_))
        ));
        let bad = PolicyParams {
            layout: Arc::clone(os.layout()),
            values: vec![0.0; 3],
        };
        assert!(matches!(
            os.forward_step(&bad, &blank_obs(0), 3, &HiddenState::zeros(128)),
            Err(PolicyError::ParamCount { .. })
        ));
    }

    #[test]
    fn non_finite_names_step() {
        let p = policy(InputMode::Os);
        let mut params = p.zero_params();
        let hb = p.layout().get("head.b").unwrap().offset;
        params.values[hb] = f64::NAN;
        let err = p.forward_step(&params, &blank_obs(0), 3, &HiddenState::zeros(128)).unwrap_err();
        assert_eq!(err, PolicyError::NonFinite { step: 0 });
    }

    #[test]
    fn argmax_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(&[0.1, 0.7, 0.1, 0.05, 0.05], Strategy::Argmax, &mut rng).unwrap(), Action::TurnRight);
        assert_eq!(act(&[0.2; 5], Strategy::Argmax, &mut rng).unwrap(), Action::TurnLeft);
        assert!(matches!(act(&[0.5, 0.6, 0.0, 0.0, 0.0], Strategy::Argmax, &mut rng), Err(PolicyError::NotNormalized(_))));
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[act(&[0.5, 0.5, 0.0, 0.0, 0.0], Strategy::Sample, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[2] + counts[3] + counts[4], 0);
        assert!((counts[0] as f64 / n as f64 - 0.5).abs() < 0.01);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let probs = [0.1, 0.2, 0.3, 0.25, 0.15];
            assert_eq!(act(&probs, Strategy::Sample, &mut a).unwrap(), act(&probs, Strategy::Sample, &mut b).unwrap());
        }
    }
}
