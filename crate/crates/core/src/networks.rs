//! The networks of the translation system.
//!
//! Proposed model: one shared `encoder`, one shared `decoder`, a single
//! residual `translator` operating on encodings, and a `discriminator`
//! that scores encodings (never raw images).
//!
//! Baseline model: two full generators (each its own encoder + translator +
//! decoder stack at the same `ArchSpec`) and two image-space
//! discriminators, built from the same layer rules and kernels so cost
//! comparisons isolate the architecture.

use std::fmt;

use crate::rng::Rng;
use crate::tensor::tape::NodeId;
use crate::tensor::{EngineError, ParamTensor, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkError {
    InvalidArch(String),
    BadInput {
        net: String,
        expected: String,
        got: Vec<usize>,
    },
    Engine(EngineError),
}

impl fmt::Display for NetworkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkError::InvalidArch(msg) => write!(f, "invalid architecture: {msg}"),
            NetworkError::BadInput { net, expected, got } => {
                write!(f, "{net}: expected input {expected}, got {got:?}")
            }
            NetworkError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NetworkError {}

impl From<EngineError> for NetworkError {
    fn from(e: EngineError) -> Self {
        NetworkError::Engine(e)
    }
}

pub type NetworkResult<T> = Result<T, NetworkError>;

/// Structural hyperparameters shared by both models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub image_size: usize,
    pub base_channels: usize,
    pub encoder_downsamples: usize,
    pub translator_resblocks: usize,
    pub disc_layers: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            image_size: 64,
            base_channels: 32,
            encoder_downsamples: 2,
            translator_resblocks: 4,
            disc_layers: 3,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> NetworkResult<()> {
        let checks = [
            ("image_size", self.image_size),
            ("base_channels", self.base_channels),
            ("encoder_downsamples", self.encoder_downsamples),
            ("translator_resblocks", self.translator_resblocks),
            ("disc_layers", self.disc_layers),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(NetworkError::InvalidArch(format!("{name} must be >= 1")));
            }
        }
        let down = 1usize << self.encoder_downsamples;
        if !self.image_size.is_multiple_of(down) {
            return Err(NetworkError::InvalidArch(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.encoder_downsamples
            )));
        }
        let disc_down = 1usize << self.disc_layers;
        if self.encoding_size() < disc_down {
            return Err(NetworkError::InvalidArch(format!(
                "encoding size {} too small for {} discriminator layers",
                self.encoding_size(),
                self.disc_layers
            )));
        }
        Ok(())
    }

    /// Channels of the encoder output.
    pub fn encoding_channels(&self) -> usize {
        self.base_channels << self.encoder_downsamples
    }

    /// Spatial extent of the encoder output.
    pub fn encoding_size(&self) -> usize {
        self.image_size >> self.encoder_downsamples
    }

    fn disc_base_channels(&self) -> usize {
        self.base_channels * 2
    }
}

/// What a parameter bundle is, structurally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkRole {
    Encoder,
    Decoder,
    Translator,
    /// Scores encodings; input is the encoder output grid.
    EncodingDiscriminator,
    /// Scores raw images; used only by the baseline.
    ImageDiscriminator,
    /// Full encoder + translator + decoder stack (baseline generator).
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerOp {
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Debug, Clone)]
struct LayerSpec {
    name: String,
    op: LayerOp,
    c_in: usize,
    c_out: usize,
    norm: bool,
    act: Act,
    /// First layer of a residual block body (the skip source is the
    /// running activation before it).
    res_begin: bool,
    /// Last layer of a residual block body (skip-add after it).
    res_end: bool,
}

impl LayerSpec {
    fn plain(
        name: impl Into<String>,
        op: LayerOp,
        c_in: usize,
        c_out: usize,
        norm: bool,
        act: Act,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            op,
            c_in,
            c_out,
            norm,
            act,
            res_begin: false,
            res_end: false,
        }
    }
}

fn encoder_layers(arch: &ArchSpec, prefix: &str) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::plain(
        format!("{prefix}conv0"),
        LayerOp::Conv {
            kernel: 7,
            stride: 1,
            pad: 3,
        },
        3,
        arch.base_channels,
        true,
        Act::Relu,
    )];
    for i in 0..arch.encoder_downsamples {
        layers.push(LayerSpec::plain(
            format!("{prefix}conv{}", i + 1),
            LayerOp::Conv {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            arch.base_channels << i,
            arch.base_channels << (i + 1),
            true,
            Act::Relu,
        ));
    }
    layers
}

fn decoder_layers(arch: &ArchSpec, prefix: &str) -> Vec<LayerSpec> {
    let ce = arch.encoding_channels();
    let mut layers = Vec::new();
    for i in 0..arch.encoder_downsamples {
        // 4x4 stride-2 pad-1 doubles the extent exactly, mirroring the
        // encoder's halving.
        layers.push(LayerSpec::plain(
            format!("{prefix}deconv{i}"),
            LayerOp::ConvTranspose {
                kernel: 4,
                stride: 2,
                pad: 1,
            },
            ce >> i,
            ce >> (i + 1),
            true,
            Act::Relu,
        ));
    }
    layers.push(LayerSpec::plain(
        format!("{prefix}conv_out"),
        LayerOp::Conv {
            kernel: 7,
            stride: 1,
            pad: 3,
        },
        arch.base_channels,
        3,
        false,
        Act::Tanh,
    ));
    layers
}

fn translator_layers(arch: &ArchSpec, prefix: &str) -> Vec<LayerSpec> {
    let ce = arch.encoding_channels();
    let mut layers = Vec::new();
    for i in 0..arch.translator_resblocks {
        let mut first = LayerSpec::plain(
            format!("{prefix}res{i}.conv0"),
            LayerOp::Conv {
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            ce,
            ce,
            true,
            Act::Relu,
        );
        first.res_begin = true;
        let mut second = LayerSpec::plain(
            format!("{prefix}res{i}.conv1"),
            LayerOp::Conv {
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            ce,
            ce,
            true,
            Act::None,
        );
        second.res_end = true;
        layers.push(first);
        layers.push(second);
    }
    layers
}

fn discriminator_layers(arch: &ArchSpec, in_channels: usize, prefix: &str) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c_in = in_channels;
    for i in 0..arch.disc_layers {
        let c_out = arch.disc_base_channels() << i;
        layers.push(LayerSpec::plain(
            format!("{prefix}conv{i}"),
            LayerOp::Conv {
                kernel: 4,
                stride: 2,
                pad: 1,
            },
            c_in,
            c_out,
            i != 0,
            Act::LeakyRelu,
        ));
        c_in = c_out;
    }
    layers.push(LayerSpec::plain(
        format!("{prefix}head"),
        LayerOp::Conv {
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        c_in,
        1,
        false,
        Act::None,
    ));
    layers
}

fn layers_for(role: NetworkRole, arch: &ArchSpec) -> Vec<LayerSpec> {
    match role {
        NetworkRole::Encoder => encoder_layers(arch, ""),
        NetworkRole::Decoder => decoder_layers(arch, ""),
        NetworkRole::Translator => translator_layers(arch, ""),
        NetworkRole::EncodingDiscriminator => {
            discriminator_layers(arch, arch.encoding_channels(), "")
        }
        NetworkRole::ImageDiscriminator => discriminator_layers(arch, 3, ""),
        NetworkRole::Generator => {
            let mut layers = encoder_layers(arch, "enc.");
            layers.extend(translator_layers(arch, "res."));
            layers.extend(decoder_layers(arch, "dec."));
            layers
        }
    }
}

/// Named parameter bundle for one network.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub name: String,
    pub role: NetworkRole,
    pub arch: ArchSpec,
    pub params: Vec<ParamTensor>,
}

impl NetworkParams {
    /// Fresh parameters: conv weights ~ N(0, 0.02), norm gamma 1, beta 0,
    /// biases 0. Deterministic for a given rng stream.
    pub fn init(
        name: &str,
        role: NetworkRole,
        arch: &ArchSpec,
        rng: &mut Rng,
    ) -> NetworkResult<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        for layer in layers_for(role, arch) {
            let (kernel, weight_shape) = match layer.op {
                LayerOp::Conv { kernel, .. } => {
                    (kernel, vec![layer.c_out, layer.c_in, kernel, kernel])
                }
                LayerOp::ConvTranspose { kernel, .. } => {
                    (kernel, vec![layer.c_in, layer.c_out, kernel, kernel])
                }
            };
            let n = layer.c_in * layer.c_out * kernel * kernel;
            let weight: Vec<f64> = (0..n).map(|_| rng.normal(0.0, INIT_STD)).collect();
            params.push(ParamTensor::new(
                format!("{name}.{}.weight", layer.name),
                weight_shape,
                weight,
            ));
            params.push(ParamTensor::new(
                format!("{name}.{}.bias", layer.name),
                vec![layer.c_out],
                vec![0.0; layer.c_out],
            ));
            if layer.norm {
                params.push(ParamTensor::new(
                    format!("{name}.{}.gamma", layer.name),
                    vec![layer.c_out],
                    vec![1.0; layer.c_out],
                ));
                params.push(ParamTensor::new(
                    format!("{name}.{}.beta", layer.name),
                    vec![layer.c_out],
                    vec![0.0; layer.c_out],
                ));
            }
        }
        Ok(NetworkParams {
            name: name.to_string(),
            role,
            arch: *arch,
            params,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.values.len() as u64).sum()
    }

    /// Total weight elements of the stride-2 convolutions (used by the
    /// channel-scaling test oracle).
    pub fn stride2_conv_weight_count(&self) -> u64 {
        layers_for(self.role, &self.arch)
            .iter()
            .filter(|l| matches!(l.op, LayerOp::Conv { stride: 2, .. }))
            .map(|l| {
                let k = match l.op {
                    LayerOp::Conv { kernel, .. } | LayerOp::ConvTranspose { kernel, .. } => kernel,
                };
                (l.c_in * l.c_out * k * k) as u64
            })
            .sum()
    }
}

/// Tape-registered view of a network: one leaf node per parameter.
/// Binding once per tape guarantees that repeated forwards (e.g. encoding
/// both domains) share the identical parameter nodes.
pub struct BoundNet<'a> {
    pub net: &'a NetworkParams,
    tensors: Vec<Tensor>,
}

impl<'a> BoundNet<'a> {
    pub fn bind(tape: &mut Tape, net: &'a NetworkParams) -> Self {
        let tensors = net.params.iter().map(|p| tape.leaf(&p.tensor())).collect();
        BoundNet { net, tensors }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| t.node_id().expect("bound param"))
            .collect()
    }

    /// (param name, node id) pairs, for gradient map assembly.
    pub fn named_nodes(&self) -> Vec<(String, NodeId)> {
        self.net
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(p, t)| (p.name.clone(), t.node_id().expect("bound param")))
            .collect()
    }
}

struct ParamCursor<'a, 'b> {
    bound: &'b BoundNet<'a>,
    idx: usize,
}

impl<'a, 'b> ParamCursor<'a, 'b> {
    fn next(&mut self) -> &'b Tensor {
        let t = &self.bound.tensors[self.idx];
        self.idx += 1;
        t
    }
}

fn apply_layers(
    tape: &mut Tape,
    layers: &[LayerSpec],
    cursor: &mut ParamCursor,
    input: &Tensor,
) -> NetworkResult<Tensor> {
    let mut x = input.clone();
    let mut skip: Option<Tensor> = None;
    for layer in layers {
        if layer.res_begin {
            skip = Some(x.clone());
        }
        let weight = cursor.next();
        let bias = cursor.next();
        let mut y = match layer.op {
            LayerOp::Conv { stride, pad, .. } => tape.conv2d(&x, weight, bias, stride, pad)?,
            LayerOp::ConvTranspose { stride, pad, .. } => {
                tape.conv_transpose2d(&x, weight, bias, stride, pad)?
            }
        };
        if layer.norm {
            let gamma = cursor.next();
            let beta = cursor.next();
            y = tape.instance_norm(&y, gamma, beta, NORM_EPS)?;
        }
        y = match layer.act {
            Act::Relu => tape.relu(&y)?,
            Act::LeakyRelu => tape.leaky_relu(&y, LEAKY_SLOPE)?,
            Act::Tanh => tape.tanh(&y)?,
            Act::None => y,
        };
        if layer.res_end {
            let s = skip.take().expect("res_end without res_begin");
            y = tape.add(&s, &y)?;
        }
        x = y;
    }
    Ok(x)
}

fn forward(tape: &mut Tape, bound: &BoundNet, input: &Tensor) -> NetworkResult<Tensor> {
    let layers = layers_for(bound.net.role, &bound.net.arch);
    let mut cursor = ParamCursor { bound, idx: 0 };
    let out = apply_layers(tape, &layers, &mut cursor, input)?;
    debug_assert_eq!(
        cursor.idx,
        bound.tensors.len(),
        "cursor must consume every param"
    );
    Ok(out)
}

fn expect_input(
    bound: &BoundNet,
    input: &Tensor,
    channels: usize,
    size: usize,
) -> NetworkResult<()> {
    let s = input.shape();
    if s.len() != 4 || s[1] != channels || s[2] != size || s[3] != size {
        return Err(NetworkError::BadInput {
            net: bound.net.name.clone(),
            expected: format!("N x {channels} x {size} x {size}"),
            got: s.to_vec(),
        });
    }
    Ok(())
}

/// Down-sample an image batch `N x 3 x S x S` into encodings
/// `N x Ce x S' x S'`. The same network serves both domains.
pub fn encode(tape: &mut Tape, enc: &BoundNet, image: &Tensor) -> NetworkResult<Tensor> {
    debug_assert_eq!(enc.net.role, NetworkRole::Encoder);
    expect_input(enc, image, 3, enc.net.arch.image_size)?;
    forward(tape, enc, image)
}

/// Up-sample encodings back to image space, tanh-bounded.
pub fn decode(tape: &mut Tape, dec: &BoundNet, encoding: &Tensor) -> NetworkResult<Tensor> {
    debug_assert_eq!(dec.net.role, NetworkRole::Decoder);
    expect_input(
        dec,
        encoding,
        dec.net.arch.encoding_channels(),
        dec.net.arch.encoding_size(),
    )?;
    forward(tape, dec, encoding)
}

/// Residual translation in encoding space; shape-preserving by
/// construction so deviation terms compare like with like.
pub fn translate(tape: &mut Tape, tr: &BoundNet, encoding: &Tensor) -> NetworkResult<Tensor> {
    debug_assert_eq!(tr.net.role, NetworkRole::Translator);
    expect_input(
        tr,
        encoding,
        tr.net.arch.encoding_channels(),
        tr.net.arch.encoding_size(),
    )?;
    forward(tape, tr, encoding)
}

/// Patch map of real/fake scores (no sigmoid; least-squares objective).
/// The proposed discriminator consumes encodings, the baseline one images;
/// the role determines which input is legal.
pub fn discriminate(tape: &mut Tape, disc: &BoundNet, input: &Tensor) -> NetworkResult<Tensor> {
    match disc.net.role {
        NetworkRole::EncodingDiscriminator => expect_input(
            disc,
            input,
            disc.net.arch.encoding_channels(),
            disc.net.arch.encoding_size(),
        )?,
        NetworkRole::ImageDiscriminator => expect_input(disc, input, 3, disc.net.arch.image_size)?,
        other => {
            return Err(NetworkError::BadInput {
                net: disc.net.name.clone(),
                expected: format!("a discriminator role, found {other:?}"),
                got: input.shape().to_vec(),
            })
        }
    }
    forward(tape, disc, input)
}

/// Full generator pass (baseline): encode, translate, decode with the
/// generator's own parameters.
pub fn generate(tape: &mut Tape, gen: &BoundNet, image: &Tensor) -> NetworkResult<Tensor> {
    debug_assert_eq!(gen.net.role, NetworkRole::Generator);
    expect_input(gen, image, 3, gen.net.arch.image_size)?;
    forward(tape, gen, image)
}

// ---- model bundles -------------------------------------------------------

/// Shared-autoencoder single-translator model.
#[derive(Debug, Clone)]
pub struct ProposedModel {
    pub encoder: NetworkParams,
    pub decoder: NetworkParams,
    pub translator: NetworkParams,
    pub discriminator: NetworkParams,
}

impl ProposedModel {
    pub fn init(arch: &ArchSpec, seed: u64) -> NetworkResult<Self> {
        let root = Rng::new(seed);
        Ok(ProposedModel {
            encoder: NetworkParams::init(
                "encoder",
                NetworkRole::Encoder,
                arch,
                &mut root.derive(1),
            )?,
            decoder: NetworkParams::init(
                "decoder",
                NetworkRole::Decoder,
                arch,
                &mut root.derive(2),
            )?,
            translator: NetworkParams::init(
                "translator",
                NetworkRole::Translator,
                arch,
                &mut root.derive(3),
            )?,
            discriminator: NetworkParams::init(
                "discriminator",
                NetworkRole::EncodingDiscriminator,
                arch,
                &mut root.derive(4),
            )?,
        })
    }

    pub fn networks(&self) -> [&NetworkParams; 4] {
        [
            &self.encoder,
            &self.decoder,
            &self.translator,
            &self.discriminator,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut NetworkParams; 4] {
        [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.translator,
            &mut self.discriminator,
        ]
    }

    /// Generator-side parameter count (everything the adversary trains
    /// against: encoder + decoder + translator).
    pub fn generator_param_count(&self) -> u64 {
        self.encoder.param_count() + self.decoder.param_count() + self.translator.param_count()
    }
}

/// CycleGAN-style baseline: two independent generators and two image
/// discriminators.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub gen_a2b: NetworkParams,
    pub gen_b2a: NetworkParams,
    pub disc_a: NetworkParams,
    pub disc_b: NetworkParams,
}

impl BaselineModel {
    pub fn init(arch: &ArchSpec, seed: u64) -> NetworkResult<Self> {
        let root = Rng::new(seed);
        Ok(BaselineModel {
            gen_a2b: NetworkParams::init(
                "baseline_gen_a2b",
                NetworkRole::Generator,
                arch,
                &mut root.derive(11),
            )?,
            gen_b2a: NetworkParams::init(
                "baseline_gen_b2a",
                NetworkRole::Generator,
                arch,
                &mut root.derive(12),
            )?,
            disc_a: NetworkParams::init(
                "baseline_discriminator_a",
                NetworkRole::ImageDiscriminator,
                arch,
                &mut root.derive(13),
            )?,
            disc_b: NetworkParams::init(
                "baseline_discriminator_b",
                NetworkRole::ImageDiscriminator,
                arch,
                &mut root.derive(14),
            )?,
        })
    }

    pub fn networks(&self) -> [&NetworkParams; 4] {
        [&self.gen_a2b, &self.gen_b2a, &self.disc_a, &self.disc_b]
    }

    pub fn networks_mut(&mut self) -> [&mut NetworkParams; 4] {
        [
            &mut self.gen_a2b,
            &mut self.gen_b2a,
            &mut self.disc_a,
            &mut self.disc_b,
        ]
    }

    pub fn generator_param_count(&self) -> u64 {
        self.gen_a2b.param_count() + self.gen_b2a.param_count()
    }
}

// ---- compute-cost accounting ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Proposed,
    Baseline,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    TrainStep,
    Inference,
}

/// Forward FLOPs of one network application at batch 1.
///
/// Counting rule (fixed): convolution and transposed convolution cost
/// 2 FLOPs per multiply-accumulate plus one add per output element for the
/// bias; instance norm costs 6 FLOPs per element; activations 1 per
/// element; a residual skip-add 1 per element.
pub fn forward_flops(role: NetworkRole, arch: &ArchSpec) -> u64 {
    let mut total: u64 = 0;
    let mut size = match role {
        NetworkRole::Encoder | NetworkRole::ImageDiscriminator | NetworkRole::Generator => {
            arch.image_size
        }
        NetworkRole::Decoder | NetworkRole::Translator | NetworkRole::EncodingDiscriminator => {
            arch.encoding_size()
        }
    };
    for layer in layers_for(role, arch) {
        let (out_size, macs) = match layer.op {
            LayerOp::Conv {
                kernel,
                stride,
                pad,
            } => {
                let out = (size + 2 * pad - kernel) / stride + 1;
                let macs = (layer.c_out * out * out * layer.c_in * kernel * kernel) as u64;
                (out, macs)
            }
            LayerOp::ConvTranspose {
                kernel,
                stride,
                pad,
            } => {
                let out = (size - 1) * stride + kernel - 2 * pad;
                let macs = (layer.c_in * size * size * layer.c_out * kernel * kernel) as u64;
                (out, macs)
            }
        };
        let out_elems = (layer.c_out * out_size * out_size) as u64;
        total += 2 * macs + out_elems; // MACs + bias
        if layer.norm {
            total += 6 * out_elems;
        }
        if layer.act != Act::None {
            total += out_elems;
        }
        if layer.res_end {
            total += out_elems;
        }
        size = out_size;
    }
    total
}

/// Per-sample forward-pass FLOPs a training phase executes, mirroring the
/// exact sequence of forwards in the corresponding train step.
fn train_forward_flops(arch: &ArchSpec, model: ModelKind, use_dev_term_b: bool) -> u64 {
    let enc = forward_flops(NetworkRole::Encoder, arch);
    let dec = forward_flops(NetworkRole::Decoder, arch);
    let tr = forward_flops(NetworkRole::Translator, arch);
    match model {
        ModelKind::Proposed => {
            let disc = forward_flops(NetworkRole::EncodingDiscriminator, arch);
            // Discriminator phase: encode both domains, translate A, score
            // real and fake encodings.
            let d_phase = 2 * enc + tr + 2 * disc;
            // Generator phase: encode both, reconstruct both, translate B
            // (+ decode for the full-path term), translate A, score fake.
            let mut g_phase = 2 * enc + 2 * dec + 2 * tr + disc;
            if use_dev_term_b {
                g_phase += dec;
            }
            d_phase + g_phase
        }
        ModelKind::Baseline => {
            let gen = forward_flops(NetworkRole::Generator, arch);
            let disc = forward_flops(NetworkRole::ImageDiscriminator, arch);
            // Discriminator phase: both fakes, each disc scores real + fake.
            let d_phase = 2 * gen + 4 * disc;
            // Generator phase: two translation + two cycle passes, both
            // fakes scored.
            let g_phase = 4 * gen + 2 * disc;
            d_phase + g_phase
        }
    }
}

/// FLOP count per sample for one phase of one model.
///
/// `TrainStep` counts every forward pass the step executes plus twice the
/// forward cost as the backward estimate (a standard fixed approximation,
/// applied identically to both models so ratios are stable).
pub fn count_flops(arch: &ArchSpec, model: ModelKind, phase: Phase) -> u64 {
    count_flops_with(arch, model, phase, true)
}

/// As [`count_flops`], with the full-path deviation term toggleable.
pub fn count_flops_with(
    arch: &ArchSpec,
    model: ModelKind,
    phase: Phase,
    use_dev_term_b: bool,
) -> u64 {
    match phase {
        Phase::Inference => match model {
            ModelKind::Proposed => {
                forward_flops(NetworkRole::Encoder, arch)
                    + forward_flops(NetworkRole::Translator, arch)
                    + forward_flops(NetworkRole::Decoder, arch)
            }
            ModelKind::Baseline => forward_flops(NetworkRole::Generator, arch),
        },
        Phase::TrainStep => 3 * train_forward_flops(arch, model, use_dev_term_b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound_pair<'a>(tape: &mut Tape, net: &'a NetworkParams) -> BoundNet<'a> {
        BoundNet::bind(tape, net)
    }

    fn rand_image(arch: &ArchSpec, batch: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = batch * 3 * arch.image_size * arch.image_size;
        Tensor::new(
            vec![batch, 3, arch.image_size, arch.image_size],
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encoder_output_shape_matches_arch() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let enc = bound_pair(&mut tape, &model.encoder);
        let img = rand_image(&arch, 2, 3);
        let out = encode(&mut tape, &enc, &img).unwrap();
        assert_eq!(out.shape(), &[2, 128, 16, 16]);
    }

    #[test]
    fn shared_encoder_serves_both_domains_with_identical_nodes() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let enc = bound_pair(&mut tape, &model.encoder);
        let ids_before = enc.node_ids();
        let a = rand_image(&arch, 1, 10);
        let b = rand_image(&arch, 1, 11);
        let ea = encode(&mut tape, &enc, &a).unwrap();
        let eb = encode(&mut tape, &enc, &b).unwrap();
        assert_eq!(ea.shape(), eb.shape());
        // Both forwards reference the very same parameter leaves.
        assert_eq!(enc.node_ids(), ids_before);
    }

    #[test]
    fn decode_inverts_shapes_and_is_tanh_bounded() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let dec = bound_pair(&mut tape, &model.decoder);
        let mut rng = Rng::new(5);
        let n = 128 * 16 * 16;
        let encoding = Tensor::new(
            vec![1, 128, 16, 16],
            (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect(),
        )
        .unwrap();
        let img = decode(&mut tape, &dec, &encoding).unwrap();
        assert_eq!(img.shape(), &[1, 3, 64, 64]);
        assert!(
            img.data().iter().all(|v| v.abs() < 1.0),
            "tanh output must stay inside (-1, 1)"
        );
    }

    #[test]
    fn translator_preserves_shape() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 2).unwrap();
        let mut tape = Tape::new();
        let tr = bound_pair(&mut tape, &model.translator);
        let mut rng = Rng::new(6);
        let n = 128 * 16 * 16;
        let enc = Tensor::new(
            vec![1, 128, 16, 16],
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let out = translate(&mut tape, &tr, &enc).unwrap();
        assert_eq!(out.shape(), enc.shape());
    }

    #[test]
    fn zeroed_residual_branches_make_translator_exact_identity() {
        let arch = ArchSpec::default();
        let mut model = ProposedModel::init(&arch, 2).unwrap();
        for p in &mut model.translator.params {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let tr = bound_pair(&mut tape, &model.translator);
        let mut rng = Rng::new(7);
        let n = 128 * 16 * 16;
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let enc = Tensor::new(vec![1, 128, 16, 16], data.clone()).unwrap();
        let out = translate(&mut tape, &tr, &enc).unwrap();
        assert_eq!(
            out.data(),
            &data[..],
            "zeroed branches must pass through bit-exactly"
        );
    }

    #[test]
    fn translator_gradients_match_finite_differences() {
        // d/dtheta of l1(translate(e), e) via the tape vs central
        // differences over every translator parameter.
        let arch = ArchSpec {
            image_size: 8,
            base_channels: 2,
            encoder_downsamples: 2,
            translator_resblocks: 1,
            disc_layers: 1,
        };
        let model = ProposedModel::init(&arch, 77).unwrap();
        let mut rng = Rng::new(78);
        let ce = arch.encoding_channels();
        let sz = arch.encoding_size();
        let n = ce * sz * sz;
        let enc = Tensor::new(
            vec![1, ce, sz, sz],
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();

        let loss_with = |net: &NetworkParams| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundNet::bind(&mut tape, net);
            let out = translate(&mut tape, &bound, &enc).unwrap();
            tape.l1_loss(&out, &enc).unwrap().item()
        };

        let mut tape = Tape::new();
        let bound = BoundNet::bind(&mut tape, &model.translator);
        let out = translate(&mut tape, &bound, &enc).unwrap();
        let root = tape.l1_loss(&out, &enc).unwrap();
        let ids = bound.node_ids();
        let grads = tape.backward(&root, &ids).unwrap();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        #[allow(clippy::needless_range_loop)]
        for (pi, param) in model.translator.params.iter().enumerate() {
            let analytic = &grads[&ids[pi]];
            for vi in 0..param.values.len() {
                let mut plus = model.translator.clone();
                plus.params[pi].values[vi] += eps;
                let mut minus = model.translator.clone();
                minus.params[pi].values[vi] -= eps;
                let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * eps);
                let denom = analytic[vi].abs().max(numeric.abs());
                if denom > 1e-9 {
                    worst = worst.max((analytic[vi] - numeric).abs() / denom);
                }
            }
        }
        assert!(worst <= 1e-4, "translator gradient rel err {worst}");
    }

    #[test]
    fn discriminator_patch_shape_and_finiteness() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 3).unwrap();
        let mut tape = Tape::new();
        let disc = bound_pair(&mut tape, &model.discriminator);
        let mut rng = Rng::new(8);
        let n = 128 * 16 * 16;
        let enc = Tensor::new(
            vec![1, 128, 16, 16],
            (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let scores = discriminate(&mut tape, &disc, &enc).unwrap();
        assert_eq!(scores.shape(), &[1, 1, 2, 2]);
        assert!(scores.all_finite());
    }

    #[test]
    fn discriminator_rejects_raw_images_in_proposed_model() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 3).unwrap();
        let mut tape = Tape::new();
        let disc = bound_pair(&mut tape, &model.discriminator);
        let img = rand_image(&arch, 1, 9);
        assert!(matches!(
            discriminate(&mut tape, &disc, &img),
            Err(NetworkError::BadInput { .. })
        ));
    }

    #[test]
    fn same_seed_same_params_different_seed_differs() {
        let arch = ArchSpec::default();
        let m1 = ProposedModel::init(&arch, 1234).unwrap();
        let m2 = ProposedModel::init(&arch, 1234).unwrap();
        let m3 = ProposedModel::init(&arch, 1235).unwrap();
        for (a, b) in m1.networks().iter().zip(m2.networks().iter()) {
            for (pa, pb) in a.params.iter().zip(&b.params) {
                assert_eq!(pa.values, pb.values, "{}", pa.name);
            }
        }
        let differs = m1
            .networks()
            .iter()
            .zip(m3.networks().iter())
            .any(|(a, b)| {
                a.params
                    .iter()
                    .zip(&b.params)
                    .any(|(pa, pb)| pa.values != pb.values)
            });
        assert!(differs);
    }

    #[test]
    fn init_std_is_near_target() {
        let arch = ArchSpec::default();
        let model = ProposedModel::init(&arch, 42).unwrap();
        // translator res0.conv0.weight: 128*128*9 = 147k elements
        let w = &model.translator.params[0];
        assert!(w.values.len() > 10_000);
        let mean = w.values.iter().sum::<f64>() / w.values.len() as f64;
        let std = (w
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / w.values.len() as f64)
            .sqrt();
        assert!(
            (std - INIT_STD).abs() <= 0.002,
            "empirical std {std} outside 0.02 +/- 0.002"
        );
    }

    #[test]
    fn doubling_base_channels_quadruples_stride2_conv_weights() {
        let small = ArchSpec::default();
        let big = ArchSpec {
            base_channels: 64,
            ..small
        };
        let enc_small =
            NetworkParams::init("e", NetworkRole::Encoder, &small, &mut Rng::new(1)).unwrap();
        let enc_big =
            NetworkParams::init("e", NetworkRole::Encoder, &big, &mut Rng::new(1)).unwrap();
        assert_eq!(
            enc_big.stride2_conv_weight_count(),
            4 * enc_small.stride2_conv_weight_count()
        );
    }

    #[test]
    fn encoding_discriminator_is_cheaper_than_image_discriminator() {
        let arch = ArchSpec::default();
        let enc_disc = forward_flops(NetworkRole::EncodingDiscriminator, &arch);
        let img_disc = forward_flops(NetworkRole::ImageDiscriminator, &arch);
        assert!(
            enc_disc < img_disc,
            "encoding-space discriminator ({enc_disc}) must cost strictly less than the image-space one ({img_disc})"
        );
    }

    #[test]
    fn inference_flops_identical_across_models() {
        let arch = ArchSpec::default();
        let p = count_flops(&arch, ModelKind::Proposed, Phase::Inference);
        let b = count_flops(&arch, ModelKind::Baseline, Phase::Inference);
        let rel = (p as f64 - b as f64).abs() / b as f64;
        assert!(rel < 0.01, "proposed {p} vs baseline {b}");
    }

    #[test]
    fn train_step_flop_ratio_matches_expected_band() {
        let arch = ArchSpec::default();
        let p = count_flops(&arch, ModelKind::Proposed, Phase::TrainStep);
        let b = count_flops(&arch, ModelKind::Baseline, Phase::TrainStep);
        let ratio = p as f64 / b as f64;
        assert!(ratio <= 0.55, "proposed/baseline {ratio}");
        let inv = b as f64 / p as f64;
        assert!((1.8..=2.4).contains(&inv), "baseline/proposed {inv}");
    }

    #[test]
    fn zero_resblock_translator_contributes_zero_flops() {
        let arch = ArchSpec::default();
        // translator_resblocks must be >= 1 for a valid arch; compute the
        // contribution as the difference between 2 and 1 blocks instead.
        let one = ArchSpec {
            translator_resblocks: 1,
            ..arch
        };
        let two = ArchSpec {
            translator_resblocks: 2,
            ..arch
        };
        let per_block = forward_flops(NetworkRole::Translator, &two)
            - forward_flops(NetworkRole::Translator, &one);
        let extrapolated_zero = forward_flops(NetworkRole::Translator, &one).checked_sub(per_block);
        assert_eq!(extrapolated_zero, Some(0));
    }

    #[test]
    fn baseline_doubles_generator_side_params() {
        let arch = ArchSpec::default();
        let p = ProposedModel::init(&arch, 1).unwrap();
        let b = BaselineModel::init(&arch, 1).unwrap();
        assert_eq!(b.generator_param_count(), 2 * p.generator_param_count());
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let arch = ArchSpec {
            image_size: 63,
            ..ArchSpec::default()
        };
        assert!(ProposedModel::init(&arch, 1).is_err());
        let arch = ArchSpec {
            disc_layers: 9,
            ..ArchSpec::default()
        };
        assert!(ProposedModel::init(&arch, 1).is_err());
        let arch = ArchSpec {
            base_channels: 0,
            ..ArchSpec::default()
        };
        assert!(ProposedModel::init(&arch, 1).is_err());
    }

    #[test]
    fn generator_stack_equals_proposed_component_params() {
        let arch = ArchSpec::default();
        let p = ProposedModel::init(&arch, 1).unwrap();
        let b = BaselineModel::init(&arch, 1).unwrap();
        assert_eq!(b.gen_a2b.param_count(), p.generator_param_count());
    }
}
