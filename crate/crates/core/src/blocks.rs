//! Context-aware encoder-decoder network.
//!
//! Encoder stages compute features with a feature block, hand them to the
//! decoder as a skip, and max-pool. The bottleneck runs one more feature
//! block followed by an optional non-local (global context) block. Decoder
//! stages upsample, concatenate the matching skip and compute features
//! again. A final 3x3 convolution maps back to image channels.
//!
//! With local context enabled, every feature block becomes a 3x3 projection
//! plus PReLU followed by a dense residual block; otherwise it is a basic
//! block of two convolution + PReLU pairs.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names such as
//! `enc0.block.conv1.weight`; the structs here only describe the layout.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{ParamVars, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Initial negative slope of every PReLU.
pub const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::contract(format!("unknown upsample mode `{other}`"))),
        }
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

/// The four ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    GlobalContext,
    LocalContext,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::GlobalContext, Variant::LocalContext, Variant::Full];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::GlobalContext => (true, false),
            Variant::LocalContext => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GlobalContext => "gc",
            Variant::LocalContext => "lc",
            Variant::Full => "full",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Number of encoder (and decoder) stages; inputs must be divisible by `2^num_stages`.
    pub num_stages: usize,
    /// Width of the first stage, doubled at every deeper level.
    pub base_channels: usize,
    pub use_global_context: bool,
    pub use_local_context: bool,
    pub input_channels: usize,
    pub output_channels: usize,
    pub upsample: UpsampleMode,
    /// Encoder levels that get an additional non-local block after their
    /// feature block (the skip is taken after it). The bottleneck block is
    /// controlled by `use_global_context` alone.
    pub extra_global_context_levels: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_stages: 4,
            base_channels: 32,
            use_global_context: true,
            use_local_context: true,
            input_channels: 3,
            output_channels: 3,
            upsample: UpsampleMode::Nearest,
            extra_global_context_levels: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (gc, lc) = variant.flags();
        self.use_global_context = gc;
        self.use_local_context = lc;
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.use_global_context, self.use_local_context) {
            (false, false) => Variant::Baseline,
            (true, false) => Variant::GlobalContext,
            (false, true) => Variant::LocalContext,
            (true, true) => Variant::Full,
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.num_stages
    }

    /// Distance in pixels beyond which an input pixel cannot affect an
    /// output pixel, ignoring the non-local blocks. Counts every 3x3
    /// convolution at its level's stride plus one stride per pooling and
    /// upsampling step.
    pub fn receptive_radius(&self) -> usize {
        let convs = if self.use_local_context { 4 } else { 2 };
        let m = self.num_stages;
        convs * (3 * (1 << m) - 2) + (1 << (m + 1)) - 1
    }

    /// Channel width at `level`; level `num_stages` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 || self.num_stages > 16 {
            return Err(Error::contract(format!("num_stages must be in 1..=16, got {}", self.num_stages)));
        }
        if self.base_channels == 0 {
            return Err(Error::contract("base_channels must be positive"));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::contract("image channel counts must be positive"));
        }
        if let Some(&l) = self.extra_global_context_levels.iter().find(|&&l| l >= self.num_stages) {
            return Err(Error::contract(format!(
                "extra global context level {l} out of range for {} stages",
                self.num_stages
            )));
        }
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]`, `b = sqrt(6 / ((1 + a^2) fan_in))` with `a` the
    /// initial PReLU slope.
    HeUniform { fan_in: usize },
    Zeros,
    Constant(f32),
}

impl Init {
    pub fn bound(&self) -> f32 {
        match *self {
            Init::HeUniform { fan_in } => he_bound(fan_in),
            Init::Zeros => 0.0,
            Init::Constant(c) => c.abs(),
        }
    }
}

pub fn he_bound(fan_in: usize) -> f32 {
    let gain_sq = 2.0 / (1.0 + (PRELU_INIT as f64).powi(2));
    (3.0 * gain_sq / fan_in as f64).sqrt() as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Square convolution with bias, stride 1 and "same" padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    zero_init: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvLayer {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            zero_init: false,
        }
    }

    fn zero_initialized(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel),
            init: if self.zero_init { Init::Zeros } else { Init::HeUniform { fan_in } },
        });
        out.push(ParamSpec {
            name: self.bias_name(),
            shape: Shape::new(1, self.out_channels, 1, 1),
            init: Init::Zeros,
        });
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, x: Var) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "{} expects {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        tape.conv2d(x, w, Some(b), 1, self.kernel / 2)
    }
}

/// Per-channel PReLU.
#[derive(Clone, Debug)]
pub struct Activation {
    pub name: String,
    pub channels: usize,
}

impl Activation {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Activation {
            name: name.into(),
            channels,
        }
    }

    pub fn slope_name(&self) -> String {
        format!("{}.slope", self.name)
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.slope_name(),
            shape: Shape::new(1, self.channels, 1, 1),
            init: Init::Constant(PRELU_INIT),
        });
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, x: Var) -> Result<Var> {
        let slope = params.get(&self.slope_name())?;
        tape.prelu(x, slope)
    }
}

/// Two stacked 3x3 convolutions, each followed by PReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvLayer,
    pub act1: Activation,
    pub conv2: ConvLayer,
    pub act2: Activation,
}

impl BasicBlock {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize) -> Self {
        BasicBlock {
            conv1: ConvLayer::new(format!("{prefix}.conv1"), in_channels, out_channels, 3),
            act1: Activation::new(format!("{prefix}.act1"), out_channels),
            conv2: ConvLayer::new(format!("{prefix}.conv2"), out_channels, out_channels, 3),
            act2: Activation::new(format!("{prefix}.act2"), out_channels),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.specs(out);
        self.act1.specs(out);
        self.conv2.specs(out);
        self.act2.specs(out);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, f: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, params, f)?;
        let y = self.act1.forward(tape, params, y)?;
        let y = self.conv2.forward(tape, params, y)?;
        self.act2.forward(tape, params, y)
    }
}

/// Three densely connected 3x3 convolutions closed by an identity skip.
///
/// Layer `l` (1-based) sees `l * channels` inputs: the block input followed
/// by every earlier layer output. The first two layers use PReLU; the third
/// is linear so the residual branch can vanish.
#[derive(Clone, Debug)]
pub struct DenseResidualBlock {
    pub channels: usize,
    pub convs: [ConvLayer; 3],
    pub acts: [Activation; 2],
}

impl DenseResidualBlock {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let conv = |l: usize| ConvLayer::new(format!("{prefix}.conv{l}"), channels * l, channels, 3);
        DenseResidualBlock {
            channels,
            convs: [conv(1), conv(2), conv(3)],
            acts: [
                Activation::new(format!("{prefix}.act1"), channels),
                Activation::new(format!("{prefix}.act2"), channels),
            ],
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.convs {
            c.specs(out);
        }
        for a in &self.acts {
            a.specs(out);
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, f: Var) -> Result<Var> {
        let c = tape.shape(f).c();
        if c != self.channels {
            return Err(Error::dim(format!(
                "dense residual block expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut features = vec![f];
        for (conv, act) in self.convs[..2].iter().zip(&self.acts) {
            let input = if features.len() == 1 {
                f
            } else {
                tape.concat_channels(&features)?
            };
            let y = conv.forward(tape, params, input)?;
            features.push(act.forward(tape, params, y)?);
        }
        let input = tape.concat_channels(&features)?;
        let y3 = self.convs[2].forward(tape, params, input)?;
        tape.add(f, y3)
    }
}

/// Embedded-Gaussian non-local block:
/// `out_i = z_i + W_u sum_j softmax_j(theta(z_i) . phi(z_j)) W_v z_j`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub channels: usize,
    pub inner_channels: usize,
    pub query: ConvLayer,
    pub key: ConvLayer,
    pub value: ConvLayer,
    pub output: ConvLayer,
}

pub struct NonLocalOutput {
    pub output: Var,
    /// Row-stochastic affinities of shape `(N, 1, H*W, H*W)`.
    pub attention: Var,
}

impl NonLocalBlock {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let inner = channels.div_ceil(2);
        NonLocalBlock {
            channels,
            inner_channels: inner,
            query: ConvLayer::new(format!("{prefix}.query"), channels, inner, 1),
            key: ConvLayer::new(format!("{prefix}.key"), channels, inner, 1),
            value: ConvLayer::new(format!("{prefix}.value"), channels, inner, 1),
            output: ConvLayer::new(format!("{prefix}.out"), inner, channels, 1).zero_initialized(),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.query.specs(out);
        self.key.specs(out);
        self.value.specs(out);
        self.output.specs(out);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, z: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, params, z)?.output)
    }

    pub fn forward_with_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamVars,
        z: Var,
    ) -> Result<NonLocalOutput> {
        let [n, _, h, w] = tape.shape(z).0;
        let positions = h * w;
        let inner = self.inner_channels;
        let flat = Shape::new(n, 1, inner, positions);
        let transpose = [0, 1, 3, 2];

        let q = self.query.forward(tape, params, z)?;
        let q = tape.reshape(q, flat)?;
        let q = tape.permute(q, transpose)?;
        let k = self.key.forward(tape, params, z)?;
        let k = tape.reshape(k, flat)?;
        let logits = tape.matmul(q, k)?;
        let attention = tape.softmax_rows(logits)?;

        let v = self.value.forward(tape, params, z)?;
        let v = tape.reshape(v, flat)?;
        let v = tape.permute(v, transpose)?;
        let y = tape.matmul(attention, v)?;
        let y = tape.permute(y, transpose)?;
        let y = tape.reshape(y, Shape::new(n, inner, h, w))?;
        let y = self.output.forward(tape, params, y)?;
        let output = tape.add(z, y)?;
        Ok(NonLocalOutput { output, attention })
    }
}

/// Feature extractor used at every stage.
#[derive(Clone, Debug)]
pub enum FeatureBlock {
    Basic(BasicBlock),
    /// 3x3 projection to the stage width, PReLU, then a dense residual block.
    Dense {
        head: ConvLayer,
        head_act: Activation,
        drb: DenseResidualBlock,
    },
}

impl FeatureBlock {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, local_context: bool) -> Self {
        if local_context {
            FeatureBlock::Dense {
                head: ConvLayer::new(format!("{prefix}.head"), in_channels, out_channels, 3),
                head_act: Activation::new(format!("{prefix}.head_act"), out_channels),
                drb: DenseResidualBlock::new(&format!("{prefix}.drb"), out_channels),
            }
        } else {
            FeatureBlock::Basic(BasicBlock::new(prefix, in_channels, out_channels))
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            FeatureBlock::Basic(b) => b.conv1.in_channels,
            FeatureBlock::Dense { head, .. } => head.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            FeatureBlock::Basic(b) => b.conv2.out_channels,
            FeatureBlock::Dense { drb, .. } => drb.channels,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            FeatureBlock::Basic(b) => b.specs(out),
            FeatureBlock::Dense { head, head_act, drb } => {
                head.specs(out);
                head_act.specs(out);
                drb.specs(out);
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, f: Var) -> Result<Var> {
        match self {
            FeatureBlock::Basic(b) => b.forward(tape, params, f),
            FeatureBlock::Dense { head, head_act, drb } => {
                let y = head.forward(tape, params, f)?;
                let y = head_act.forward(tape, params, y)?;
                drb.forward(tape, params, y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub level: usize,
    pub block: FeatureBlock,
    pub global_context: Option<NonLocalBlock>,
}

impl EncoderStage {
    /// Returns `(pooled, skip)`; the skip is the feature block output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, f: Var) -> Result<(Var, Var)> {
        let s = tape.shape(f);
        if s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(Error::dim(format!(
                "encoder stage {} needs even extents, got {s}",
                self.level
            )));
        }
        let mut skip = self.block.forward(tape, params, f)?;
        if let Some(gc) = &self.global_context {
            skip = gc.forward(tape, params, skip)?;
        }
        let pooled = tape.maxpool2d(skip)?;
        Ok((pooled, skip))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub level: usize,
    pub block: FeatureBlock,
}

impl DecoderStage {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamVars,
        z: Var,
        skip: Var,
        mode: UpsampleMode,
    ) -> Result<Var> {
        let (zs, ss) = (tape.shape(z), tape.shape(skip));
        if 2 * zs.h() != ss.h() || 2 * zs.w() != ss.w() || zs.n() != ss.n() {
            return Err(Error::dim(format!(
                "decoder stage {}: upsampled {zs} does not match skip {ss}",
                self.level
            )));
        }
        let up = match mode {
            UpsampleMode::Nearest => tape.upsample_nearest2x(z)?,
            UpsampleMode::Bilinear => tape.upsample_bilinear2x(z)?,
        };
        let joined = tape.concat_channels(&[up, skip])?;
        self.block.forward(tape, params, joined)
    }
}

/// Structural counts of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCensus {
    pub basic_blocks: usize,
    pub dense_blocks: usize,
    pub nonlocal_blocks: usize,
}

impl BlockCensus {
    /// Counts blocks from parameter names alone.
    pub fn from_param_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut census = BlockCensus::default();
        for name in names {
            if name.ends_with(".conv1.weight") && name.contains(".drb.") {
                census.dense_blocks += 1;
            } else if name.ends_with(".block.conv1.weight") {
                census.basic_blocks += 1;
            } else if name.ends_with(".gc.query.weight") {
                census.nonlocal_blocks += 1;
            }
        }
        census
    }
}

#[derive(Clone, Debug)]
pub struct ContextNet {
    config: NetworkConfig,
    pub encoders: Vec<EncoderStage>,
    pub bottleneck: FeatureBlock,
    pub global_context: Option<NonLocalBlock>,
    /// Deepest stage first.
    pub decoders: Vec<DecoderStage>,
    pub head: ConvLayer,
}

impl ContextNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let m = config.num_stages;
        let lc = config.use_local_context;
        let encoders = (0..m)
            .map(|level| {
                let cin = if level == 0 {
                    config.input_channels
                } else {
                    config.width(level - 1)
                };
                let width = config.width(level);
                EncoderStage {
                    level,
                    block: FeatureBlock::new(&format!("enc{level}.block"), cin, width, lc),
                    global_context: config
                        .extra_global_context_levels
                        .contains(&level)
                        .then(|| NonLocalBlock::new(&format!("enc{level}.gc"), width)),
                }
            })
            .collect();
        let bottleneck = FeatureBlock::new("mid.block", config.width(m - 1), config.width(m), lc);
        let global_context = config
            .use_global_context
            .then(|| NonLocalBlock::new("mid.gc", config.width(m)));
        let decoders = (0..m)
            .rev()
            .map(|level| {
                let cin = config.width(level + 1) + config.width(level);
                DecoderStage {
                    level,
                    block: FeatureBlock::new(&format!("dec{level}.block"), cin, config.width(level), lc),
                }
            })
            .collect();
        let head = ConvLayer::new("head", config.width(0), config.output_channels, 3);
        Ok(ContextNet {
            config,
            encoders,
            bottleneck,
            global_context,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for e in &self.encoders {
            e.block.specs(&mut out);
            if let Some(gc) = &e.global_context {
                gc.specs(&mut out);
            }
        }
        self.bottleneck.specs(&mut out);
        if let Some(gc) = &self.global_context {
            gc.specs(&mut out);
        }
        for d in &self.decoders {
            d.block.specs(&mut out);
        }
        self.head.specs(&mut out);
        out
    }

    pub fn census(&self) -> BlockCensus {
        let mut census = BlockCensus::default();
        let blocks = self
            .encoders
            .iter()
            .map(|e| &e.block)
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter().map(|d| &d.block));
        for b in blocks {
            match b {
                FeatureBlock::Basic(_) => census.basic_blocks += 1,
                FeatureBlock::Dense { .. } => census.dense_blocks += 1,
            }
        }
        census.nonlocal_blocks = self.encoders.iter().filter(|e| e.global_context.is_some()).count()
            + usize::from(self.global_context.is_some());
        census
    }

    /// Deterministic initialization. Each tensor draws from its own stream
    /// keyed by `(seed, name)`, so variants share values for shared names.
    pub fn init_parameters(&self, seed: u64) -> ParamStore<f32> {
        self.param_specs()
            .into_iter()
            .map(|spec| {
                let tensor = match spec.init {
                    Init::Zeros => Tensor::zeros(spec.shape),
                    Init::Constant(c) => Tensor::full(spec.shape, c),
                    Init::HeUniform { fan_in } => {
                        let bound = he_bound(fan_in);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
                        Tensor::from_fn(spec.shape, |_| rng.gen_range(-bound..=bound))
                    }
                };
                (spec.name, tensor)
            })
            .collect()
    }

    /// Verifies that `params` has exactly the names and shapes this network
    /// expects.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let specs = self.param_specs();
        let mut problems = Vec::new();
        for spec in &specs {
            match params.get(&spec.name) {
                Ok(t) if t.shape() == spec.shape => {}
                Ok(t) => problems.push(format!("{}: expected {}, found {}", spec.name, spec.shape, t.shape())),
                Err(_) => problems.push(format!("{}: missing", spec.name)),
            }
        }
        for name in params.names() {
            if !specs.iter().any(|s| s.name == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "parameters incompatible with network configuration: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let d = self.config.divisor();
        if shape.c() != self.config.input_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels,
                shape.c()
            )));
        }
        if shape.h() % d != 0 || shape.w() % d != 0 || shape.h() == 0 || shape.w() == 0 {
            return Err(Error::dim(format!(
                "input extents {}x{} must be positive multiples of {d}",
                shape.h(),
                shape.w()
            )));
        }
        Ok(())
    }

    /// Encoder stages. Returns the skips, shallowest first, and the pooled
    /// features that enter the bottleneck block.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, x: Var) -> Result<(Vec<Var>, Var)> {
        self.check_input(tape.shape(x))?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut f = x;
        for stage in &self.encoders {
            let (pooled, skip) = stage.forward(tape, params, f)?;
            skips.push(skip);
            f = pooled;
        }
        Ok((skips, f))
    }

    /// Decoder stages and output head, starting from bottleneck features `z`
    /// (after the non-local block).
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, mut z: Var, mut skips: Vec<Var>) -> Result<Var> {
        if skips.len() != self.decoders.len() {
            return Err(Error::contract(format!(
                "decoder needs {} skips, got {}",
                self.decoders.len(),
                skips.len()
            )));
        }
        for stage in &self.decoders {
            let skip = skips.pop().expect("one skip per stage");
            z = stage.forward(tape, params, z, skip, self.config.upsample)?;
        }
        self.head.forward(tape, params, z)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamVars, x: Var) -> Result<Var> {
        let (skips, f) = self.encode(tape, params, x)?;
        let mut z = self.bottleneck.forward(tape, params, f)?;
        if let Some(gc) = &self.global_context {
            z = gc.forward(tape, params, z)?;
        }
        self.decode(tape, params, z, skips)
    }

    /// Forward pass without gradient tracking.
    pub fn infer<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.register_frozen(params);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, input)?;
        Ok(tape.value(out).clone())
    }

    /// Bottleneck features before the bottleneck non-local block, at
    /// `1 / 2^num_stages` of the input resolution.
    pub fn infer_bottleneck<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.register_frozen(params);
        let input = tape.constant(x.clone());
        let (_, f) = self.encode(&mut tape, &vars, input)?;
        let z = self.bottleneck.forward(&mut tape, &vars, f)?;
        Ok(tape.value(z).clone())
    }

    /// Applies the bottleneck non-local block, if any, to features from
    /// [`ContextNet::infer_bottleneck`].
    pub fn infer_global_context<T: Real>(&self, params: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(gc) = &self.global_context else {
            return Ok(z.clone());
        };
        let mut tape = Tape::new();
        let vars = tape.register_frozen(params);
        let input = tape.constant(z.clone());
        let out = gc.forward(&mut tape, &vars, input)?;
        Ok(tape.value(out).clone())
    }

    /// Output for `x` with the bottleneck features replaced by `z`, which
    /// must already include the non-local block.
    pub fn infer_from_bottleneck<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = tape.register_frozen(params);
        let input = tape.constant(x.clone());
        let (skips, f) = self.encode(&mut tape, &vars, input)?;
        let (fs, zs) = (tape.shape(f), z.shape());
        if (fs.n(), fs.h(), fs.w()) != (zs.n(), zs.h(), zs.w()) || zs.c() != self.config.width(self.config.num_stages) {
            return Err(Error::dim(format!("bottleneck features {zs} do not fit input {}", x.shape())));
        }
        let z = tape.constant(z.clone());
        let out = self.decode(&mut tape, &vars, z, skips)?;
        Ok(tape.value(out).clone())
    }
}

/// Reconstructs the architecture flags from parameter names and shapes.
/// The upsampling mode is not recoverable and defaults to nearest.
pub fn infer_config<T: Real>(params: &ParamStore<T>) -> Result<NetworkConfig> {
    let mut num_stages = 0;
    while params.names().any(|n| n.starts_with(&format!("enc{num_stages}."))) {
        num_stages += 1;
    }
    if num_stages == 0 {
        return Err(Error::contract("parameters contain no encoder stages"));
    }
    let use_local_context = params.names().any(|n| n.contains(".drb."));
    let first = if use_local_context {
        "enc0.block.head.weight"
    } else {
        "enc0.block.conv1.weight"
    };
    let w = params.get(first)?.shape();
    let head = params.get("head.weight")?.shape();
    let config = NetworkConfig {
        num_stages,
        base_channels: w.n(),
        use_global_context: params.contains("mid.gc.query.weight"),
        use_local_context,
        input_channels: w.c(),
        output_channels: head.n(),
        upsample: UpsampleMode::Nearest,
        extra_global_context_levels: (0..num_stages)
            .filter(|l| params.contains(&format!("enc{l}.gc.query.weight")))
            .collect(),
    };
    ContextNet::new(config.clone())?.check_params(params)?;
    Ok(config)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
