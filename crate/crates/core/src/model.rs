//! The full segmentation network: streams, visual memory and head, with the
//! ablation variants that swap one element of the pipeline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataio::VideoSample;
use crate::error::{Error, Result};
use crate::params::{prefixed, prefixed_mut, ParamSet};
use crate::recurrent::{
    bidirectional_backward, bidirectional_run, gru_param_count, run_sequence, sequence_backward,
    BidirFuseParams, BidirRun, ConvGruParams, ConvRnnParams, ConvStackCache, ConvStackParams,
    Direction, GateRecord, GruCache, RecurrentCell, RnnCache, SequenceRun,
};
use crate::streams::{
    appearance_encode, fuse_streams, motion_encode, pool_to_grid, AppearanceParams, HeadParams,
    MotionParams, StubCache,
};
use crate::tensor::{channel_softmax2, Scalar, Tensor};
use crate::training::xavier_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppearanceMode {
    /// Trainable two-layer encoder.
    Stub,
    /// Average-pooled raw RGB.
    Rgb,
    /// No appearance input; the memory sees only motion.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMode {
    Stub,
    /// Uninformative constant 0.5 channel.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryKind {
    Gru,
    Rnn,
    /// Per-frame conv stack with the ConvGRU's parameter budget.
    None,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(AppearanceMode { Stub => "stub", Rgb => "rgb", None => "none" });
keyword_enum!(MotionMode { Stub => "stub", Constant => "constant" });
keyword_enum!(MemoryKind { Gru => "gru", Rnn => "rnn", None => "none" });

/// One-element swaps of the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoApp,
    Rgb,
    NoMotion,
    NoMemory,
    Unidir,
    ConvRnn,
    /// No appearance and no memory: the motion stream alone.
    MotionOnly,
}

keyword_enum!(Variant {
    Full => "full",
    NoApp => "no-app",
    Rgb => "rgb",
    NoMotion => "no-motion",
    NoMemory => "no-memory",
    Unidir => "unidir",
    ConvRnn => "convrnn",
    MotionOnly => "motion-only",
});

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoApp,
        Variant::Rgb,
        Variant::NoMotion,
        Variant::NoMemory,
        Variant::Unidir,
        Variant::ConvRnn,
        Variant::MotionOnly,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_app: usize,
    pub d_mid: usize,
    pub d_h: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bidirectional: bool,
    pub appearance: AppearanceMode,
    pub motion: MotionMode,
    pub memory: MemoryKind,
    pub stack_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small model used for CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            d_app: 16,
            d_mid: 8,
            d_h: 16,
            kernel: 3,
            stride: 4,
            bidirectional: true,
            appearance: AppearanceMode::Stub,
            motion: MotionMode::Stub,
            memory: MemoryKind::Gru,
            stack_layers: 6,
        }
    }

    /// Channel widths and kernel of the original large model.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_app: 128,
            d_mid: 64,
            d_h: 64,
            kernel: 7,
            stride: 8,
            ..ModelConfig::desk()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {}
            Variant::NoApp => self.appearance = AppearanceMode::None,
            Variant::Rgb => self.appearance = AppearanceMode::Rgb,
            Variant::NoMotion => self.motion = MotionMode::Constant,
            Variant::NoMemory => {
                self.memory = MemoryKind::None;
                self.bidirectional = false;
            }
            Variant::Unidir => self.bidirectional = false,
            Variant::ConvRnn => self.memory = MemoryKind::Rnn,
            Variant::MotionOnly => {
                self.appearance = AppearanceMode::None;
                self.memory = MemoryKind::None;
                self.bidirectional = false;
            }
        }
        self
    }

    pub fn appearance_channels(&self) -> usize {
        match self.appearance {
            AppearanceMode::Stub => self.d_app,
            AppearanceMode::Rgb => 3,
            AppearanceMode::None => 0,
        }
    }

    /// Channels of the memory input `x_t` (appearance then motion).
    pub fn input_channels(&self) -> usize {
        self.appearance_channels() + 1
    }

    /// Hidden width of the memoryless conv stack, matched to the ConvGRU's
    /// parameter count.
    pub fn stack_width(&self) -> usize {
        ConvStackParams::<f32>::matched_width(
            self.input_channels(),
            self.d_h,
            self.kernel,
            self.stack_layers,
            gru_param_count(self.input_channels(), self.d_h, self.kernel),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_app == 0 || self.d_mid == 0 || self.d_h == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stride must be a power of two, got {}",
                self.stride
            )));
        }
        if self.stack_layers < 2 {
            return Err(Error::Config("stack_layers must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("d_app".into(), self.d_app.to_string()),
            ("d_mid".into(), self.d_mid.to_string()),
            ("d_h".into(), self.d_h.to_string()),
            ("kernel".into(), self.kernel.to_string()),
            ("stride".into(), self.stride.to_string()),
            ("bidirectional".into(), self.bidirectional.to_string()),
            ("appearance".into(), self.appearance.to_string()),
            ("motion".into(), self.motion.to_string()),
            ("memory".into(), self.memory.to_string()),
            ("stack_layers".into(), self.stack_layers.to_string()),
        ]
    }

    /// Applies one `key = value` setting; returns `false` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{v}'")))
        }
        match key {
            "d_app" => self.d_app = num(key, value)?,
            "d_mid" => self.d_mid = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "stack_layers" => self.stack_layers = num(key, value)?,
            "bidirectional" => {
                self.bidirectional = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bidirectional: expected bool, got '{value}'")))?
            }
            "appearance" => self.appearance = value.parse()?,
            "motion" => self.motion = value.parse()?,
            "memory" => self.memory = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemoryParams<T = f32> {
    Gru(ConvGruParams<T>),
    Rnn(ConvRnnParams<T>),
    Stack(ConvStackParams<T>),
}

impl<T: Scalar> MemoryParams<T> {
    fn prefix(&self) -> &'static str {
        match self {
            MemoryParams::Gru(_) => "gru",
            MemoryParams::Rnn(_) => "rnn",
            MemoryParams::Stack(_) => "stack",
        }
    }
}

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Appearance and motion encoders.
    Streams,
    /// Memory module, bidirectional fuse and head.
    Memory,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("appearance.") || name.starts_with("motion.") {
            ParamGroup::Streams
        } else {
            ParamGroup::Memory
        }
    }
}

/// Every trainable tensor of the network plus the configuration that
/// determines their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub appearance: Option<AppearanceParams<T>>,
    pub motion: Option<MotionParams<T>>,
    pub memory: MemoryParams<T>,
    pub fuse: Option<BidirFuseParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(a) = &self.appearance {
            out.extend(prefixed("appearance", a.named()));
        }
        if let Some(m) = &self.motion {
            out.extend(prefixed("motion", m.named()));
        }
        let prefix = self.memory.prefix();
        out.extend(match &self.memory {
            MemoryParams::Gru(p) => prefixed(prefix, p.named()),
            MemoryParams::Rnn(p) => prefixed(prefix, p.named()),
            MemoryParams::Stack(p) => prefixed(prefix, p.named()),
        });
        if let Some(f) = &self.fuse {
            out.extend(prefixed("fuse", f.named()));
        }
        out.extend(prefixed("head", self.head.named()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.appearance {
            out.extend(prefixed_mut("appearance", a.named_mut()));
        }
        if let Some(m) = &mut self.motion {
            out.extend(prefixed_mut("motion", m.named_mut()));
        }
        let prefix = self.memory.prefix();
        out.extend(match &mut self.memory {
            MemoryParams::Gru(p) => prefixed_mut(prefix, p.named_mut()),
            MemoryParams::Rnn(p) => prefixed_mut(prefix, p.named_mut()),
            MemoryParams::Stack(p) => prefixed_mut(prefix, p.named_mut()),
        });
        if let Some(f) = &mut self.fuse {
            out.extend(prefixed_mut("fuse", f.named_mut()));
        }
        out.extend(prefixed_mut("head", self.head.named_mut()));
        out
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cx = config.input_channels();
        let appearance = (config.appearance == AppearanceMode::Stub)
            .then(|| AppearanceParams::zeros(3, config.d_mid, config.d_app, config.stride));
        let motion = (config.motion == MotionMode::Stub)
            .then(|| MotionParams::zeros(2, config.d_mid, 1, config.stride));
        let memory = match config.memory {
            MemoryKind::Gru => MemoryParams::Gru(ConvGruParams::zeros(cx, config.d_h, config.kernel)),
            MemoryKind::Rnn => MemoryParams::Rnn(ConvRnnParams::zeros(cx, config.d_h, config.kernel)),
            MemoryKind::None => MemoryParams::Stack(ConvStackParams::zeros(
                cx,
                config.stack_width(),
                config.d_h,
                config.kernel,
                config.stack_layers,
            )),
        };
        let fuse = (config.bidirectional && config.memory != MemoryKind::None)
            .then(|| BidirFuseParams::zeros(config.d_h));
        Ok(ModelParams {
            config: config.clone(),
            appearance,
            motion,
            memory,
            fuse,
            head: HeadParams::zeros(config.d_h),
        })
    }

    /// Xavier-uniform kernels and zero biases.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (_, t) in p.named_mut() {
            if t.rank() == 4 {
                *t = xavier_init(t.shape(), rng)?;
            }
        }
        Ok(p)
    }

    /// Copies every tensor whose name and shape both appear in `other`.
    /// Returns how many tensors were copied.
    pub fn load_matching(&mut self, other: &ModelParams<T>) -> usize {
        let src = other.named();
        let mut copied = 0;
        for (name, t) in self.named_mut() {
            if let Some((_, s)) = src.iter().find(|(n, s)| *n == name && s.shape() == t.shape()) {
                *t = (*s).clone();
                copied += 1;
            }
        }
        copied
    }

    /// Size of the memory module alone (GRU, RNN or conv stack).
    pub fn memory_param_count(&self) -> usize {
        let prefix = format!("{}.", self.memory.prefix());
        self.named()
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Parameters updated when the stream encoders are held fixed.
    pub fn memory_stage_param_count(&self) -> usize {
        self.named()
            .iter()
            .filter(|(n, _)| matches!(ParamGroup::of(n), ParamGroup::Memory))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.config.stride;
        if height % s != 0 || width % s != 0 {
            return Err(Error::shape(
                "model",
                format!("{height}x{width} frames are not divisible by stride {s}"),
            ));
        }
        Ok((height / s, width / s))
    }
}

/// Network input for one clip. `motion_override`, when present, replaces
/// the motion stream output frame by frame with a given `[1, h, w]` map on
/// the feature grid.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub frames: &'a [Tensor<T>],
    pub flow_angle: &'a [Tensor<T>],
    pub motion_override: Option<&'a [Tensor<T>]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Return the ConvGRU gate activations of every frame.
    pub record_gates: bool,
    /// Keep what the backward pass needs.
    pub keep_caches: bool,
}

/// Gate activations per frame for each processing direction.
#[derive(Debug, Clone)]
pub struct GateTrace<T> {
    pub forward: Vec<GateRecord<T>>,
    pub backward: Vec<GateRecord<T>>,
}

#[derive(Debug, Clone)]
enum RecRun<T, C> {
    Bi(BidirRun<T, C>),
    Uni(SequenceRun<T, C>),
}

#[derive(Debug, Clone)]
enum MemoryRun<T> {
    Gru(RecRun<T, GruCache<T>>),
    Rnn(RecRun<T, RnnCache<T>>),
    Stack(Vec<ConvStackCache<T>>),
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `[2, h, w]` per frame; channel 1 is the object probability.
    pub probs: Vec<Tensor<T>>,
    /// Memory input `x_t` per frame.
    pub inputs: Vec<Tensor<T>>,
    /// Features entering the head per frame.
    pub features: Vec<Tensor<T>>,
    pub gates: Option<GateTrace<T>>,
    app_caches: Vec<StubCache<T>>,
    motion_caches: Vec<Option<StubCache<T>>>,
    memory: Option<MemoryRun<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Object probability maps `[1, h, w]`.
    pub fn object_probs(&self) -> Vec<Tensor<T>> {
        self.probs
            .iter()
            .map(|p| p.slice_channels(1, 2).expect("two channels"))
            .collect()
    }
}

/// Binary mask: object where its probability exceeds 0.5.
pub fn threshold_mask<T: Scalar>(object_prob: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    object_prob.map(|p| if p > half { T::one() } else { T::zero() })
}

fn run_recurrent<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    fuse: Option<&BidirFuseParams<T>>,
    xs: &[Tensor<T>],
    keep: bool,
) -> Result<(Vec<Tensor<T>>, RecRun<T, C::Cache>)> {
    let (_, h, w) = xs[0].dims3()?;
    let h0 = Tensor::zeros(&[cell.state_channels(), h, w]);
    match fuse {
        Some(fuse) => {
            let run = bidirectional_run(cell, fuse, xs, &h0, &h0, keep)?;
            Ok((run.outputs.clone(), RecRun::Bi(run)))
        }
        None => {
            let run = run_sequence(cell, xs, &h0, Direction::Forward, keep)?;
            Ok((run.states.clone(), RecRun::Uni(run)))
        }
    }
}

fn backward_recurrent<T: Scalar, C: RecurrentCell<T>>(
    cell: &C,
    fuse: Option<&BidirFuseParams<T>>,
    run: &RecRun<T, C::Cache>,
    grad_features: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, C, Option<BidirFuseParams<T>>)> {
    match (run, fuse) {
        (RecRun::Bi(run), Some(fuse)) => {
            let g = bidirectional_backward(cell, fuse, run, grad_features)?;
            Ok((g.xs, g.cell, Some(g.fuse)))
        }
        (RecRun::Uni(run), None) => {
            let g = sequence_backward(cell, &run.caches, grad_features, Direction::Forward)?;
            Ok((g.xs, g.params, None))
        }
        _ => Err(Error::Invalid("memory run does not match parameters".into())),
    }
}

fn gate_trace<T: Scalar>(run: &RecRun<T, GruCache<T>>) -> GateTrace<T> {
    let records = |c: &[GruCache<T>]| c.iter().map(|c| c.record.clone()).collect();
    match run {
        RecRun::Bi(b) => GateTrace {
            forward: records(&b.forward.caches),
            backward: records(&b.backward.caches),
        },
        RecRun::Uni(u) => GateTrace {
            forward: records(&u.caches),
            backward: Vec::new(),
        },
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Runs the whole pipeline over one clip.
    pub fn forward(&self, input: ModelInput<'_, T>, opts: ForwardOptions) -> Result<ForwardPass<T>> {
        let n = input.frames.len();
        if n == 0 {
            return Err(Error::Invalid("clip has no frames".into()));
        }
        if input.flow_angle.len() != n {
            return Err(Error::shape(
                "forward",
                format!("{n} frames but {} flow fields", input.flow_angle.len()),
            ));
        }
        if let Some(o) = input.motion_override {
            if o.len() != n {
                return Err(Error::shape(
                    "forward",
                    format!("{n} frames but {} motion overrides", o.len()),
                ));
            }
        }
        let (_, fh, fw) = input.frames[0].dims3()?;
        let (gh, gw) = self.grid(fh, fw)?;
        let keep = opts.keep_caches || opts.record_gates;

        let mut app_caches = Vec::new();
        let mut motion_caches = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for t in 0..n {
            let frame = &input.frames[t];
            if frame.dims3()? != (3, fh, fw) {
                return Err(Error::shape(
                    "forward",
                    format!("frame {t} is {:?}, expected [3, {fh}, {fw}]", frame.shape()),
                ));
            }
            let app = match (self.config.appearance, &self.appearance) {
                (AppearanceMode::Stub, Some(p)) => {
                    let (f, cache) = appearance_encode(frame, p)?;
                    if opts.keep_caches {
                        app_caches.push(cache);
                    }
                    Some(f)
                }
                (AppearanceMode::Rgb, _) => Some(pool_to_grid(frame, self.config.stride)?),
                (AppearanceMode::None, _) => None,
                (AppearanceMode::Stub, None) => {
                    return Err(Error::Invalid("appearance stub parameters missing".into()))
                }
            };
            let motion = if let Some(o) = input.motion_override {
                if o[t].shape() != [1, gh, gw] {
                    return Err(Error::shape(
                        "forward",
                        format!("motion override {t} is {:?}, expected [1, {gh}, {gw}]", o[t].shape()),
                    ));
                }
                motion_caches.push(None);
                o[t].clone()
            } else {
                match (self.config.motion, &self.motion) {
                    (MotionMode::Stub, Some(p)) => {
                        let (m, cache) = motion_encode(&input.flow_angle[t], p)?;
                        motion_caches.push(opts.keep_caches.then_some(cache));
                        m
                    }
                    (MotionMode::Constant, _) => {
                        motion_caches.push(None);
                        Tensor::full(&[1, gh, gw], T::lit(0.5))
                    }
                    (MotionMode::Stub, None) => {
                        return Err(Error::Invalid("motion stub parameters missing".into()))
                    }
                }
            };
            xs.push(match app {
                Some(a) => fuse_streams(&a, &motion)?,
                None => motion,
            });
        }

        let (features, memory, gates) = match &self.memory {
            MemoryParams::Gru(p) => {
                let (f, run) = run_recurrent(p, self.fuse.as_ref(), &xs, keep)?;
                let gates = opts.record_gates.then(|| gate_trace(&run));
                (f, MemoryRun::Gru(run), gates)
            }
            MemoryParams::Rnn(p) => {
                let (f, run) = run_recurrent(p, self.fuse.as_ref(), &xs, keep)?;
                (f, MemoryRun::Rnn(run), None)
            }
            MemoryParams::Stack(p) => {
                let mut feats = Vec::with_capacity(n);
                let mut caches = Vec::new();
                for x in &xs {
                    let (f, c) = p.forward(x)?;
                    feats.push(f);
                    if keep {
                        caches.push(c);
                    }
                }
                (feats, MemoryRun::Stack(caches), None)
            }
        };

        let probs = features
            .iter()
            .map(|f| channel_softmax2(&self.head.logits(f)?))
            .collect::<Result<Vec<_>>>()?;

        Ok(ForwardPass {
            probs,
            inputs: xs,
            features,
            gates,
            app_caches,
            motion_caches,
            memory: opts.keep_caches.then_some(memory),
        })
    }

    /// Backpropagates per-frame logit gradients through the network. Stream
    /// gradients are only computed when `want_streams` is set; otherwise
    /// the stream entries of the result stay zero.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &[Tensor<T>],
        want_streams: bool,
    ) -> Result<ModelParams<T>> {
        let memory = pass
            .memory
            .as_ref()
            .ok_or_else(|| Error::Invalid("forward pass was run without keep_caches".into()))?;
        if grad_logits.len() != pass.features.len() {
            return Err(Error::shape(
                "backward",
                format!("{} logit gradients for {} frames", grad_logits.len(), pass.features.len()),
            ));
        }
        let mut grads = ModelParams::zeros(&self.config)?;

        let mut grad_features = Vec::with_capacity(grad_logits.len());
        for (f, g) in pass.features.iter().zip(grad_logits) {
            let (gf, gh) = self.head.backward(f, g)?;
            grads.head.w.add_assign(&gh.w)?;
            grads.head.b.add_assign(&gh.b)?;
            grad_features.push(gf);
        }

        let grad_xs = match (&self.memory, memory) {
            (MemoryParams::Gru(p), MemoryRun::Gru(run)) => {
                let (gx, gp, gf) = backward_recurrent(p, self.fuse.as_ref(), run, &grad_features)?;
                grads.memory = MemoryParams::Gru(gp);
                grads.fuse = gf;
                gx
            }
            (MemoryParams::Rnn(p), MemoryRun::Rnn(run)) => {
                let (gx, gp, gf) = backward_recurrent(p, self.fuse.as_ref(), run, &grad_features)?;
                grads.memory = MemoryParams::Rnn(gp);
                grads.fuse = gf;
                gx
            }
            (MemoryParams::Stack(p), MemoryRun::Stack(caches)) => {
                let mut acc = crate::params::zeros_like(p);
                let mut gx = Vec::with_capacity(caches.len());
                for (c, g) in caches.iter().zip(&grad_features) {
                    let (gi, gp) = p.backward(c, g)?;
                    crate::params::accumulate(&mut acc, &gp)?;
                    gx.push(gi);
                }
                grads.memory = MemoryParams::Stack(acc);
                gx
            }
            _ => return Err(Error::Invalid("memory run does not match parameters".into())),
        };

        if want_streams {
            let ca = self.config.appearance_channels();
            for (t, gx) in grad_xs.iter().enumerate() {
                let (_, gh, gw) = gx.dims3()?;
                let g_motion = gx.slice_channels(ca, ca + 1)?;
                if let (Some(p), Some(g)) = (&self.appearance, grads.appearance.as_mut()) {
                    let cache = pass.app_caches.get(t).ok_or_else(|| {
                        Error::Invalid("appearance caches missing".into())
                    })?;
                    let ga = gx.slice_channels(0, ca)?;
                    crate::params::accumulate(g, &p.backward(cache, &ga)?)?;
                }
                if let (Some(p), Some(g), Some(Some(cache))) =
                    (&self.motion, grads.motion.as_mut(), pass.motion_caches.get(t))
                {
                    debug_assert_eq!(g_motion.shape(), &[1, gh, gw]);
                    crate::params::accumulate(g, &p.backward(cache, &g_motion)?)?;
                }
            }
        }
        Ok(grads)
    }
}

impl ModelParams<f32> {
    /// Forward pass over a whole sample, converting its flow to angle
    /// fields first.
    pub fn forward_video(&self, sample: &VideoSample, opts: ForwardOptions) -> Result<ForwardPass<f32>> {
        let angles = sample.flow_angles();
        self.forward(
            ModelInput {
                frames: &sample.frames,
                flow_angle: &angles,
                motion_override: None,
            },
            opts,
        )
    }
}
