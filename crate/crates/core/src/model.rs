//! Architecture assembly, subCNN growth, prefix weight transfer, and the
//! versioned binary model format.
//!
//! The default architecture takes a 60x82 window: a 1x82 convolution with 8
//! filters collapses the feature axis, two 3x1 convolutions (each followed by
//! 2x1 max pooling) combine consecutive days, and the 104 flattened features
//! feed one sigmoid output neuron. Trainable depth counts convolutional and
//! dense layers, not pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    maxpool_compute, Activation, ConvLayer, DenseLayer, LayerError, MaxPoolLayer,
};
use crate::tensor::Tensor;

/// Current model file format version.
pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"UCNN";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("flatten size is {size} for window {window}; every spatial dim must stay positive")]
    FlattenEmpty { size: usize, window: usize },
    #[error("subCNN depth {0} out of range [2, {1}]")]
    DepthOutOfRange(usize, usize),
    #[error("prefix transfer mismatch at trainable layer {index}: {detail}")]
    PrefixMismatch { index: usize, detail: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors specific to the binary model format.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes; not a model file")]
    BadMagic,
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("model file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
}

/// One convolutional stage: filter extent and filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filter_h: usize,
    pub filter_w: usize,
    pub out_channels: usize,
}

/// Hyperparameters that fully determine the network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Days of history per sample.
    pub window: usize,
    /// Feature columns per day.
    pub n_features: usize,
    pub conv_specs: Vec<ConvSpec>,
    /// Whether a 2x1 max pool follows the matching conv layer.
    pub pool_after: Vec<bool>,
    /// Hidden dense layer sizes between the flatten and the output neuron.
    pub dense_hidden: Vec<usize>,
    /// Dropout rate applied after each pooling layer and before the dense
    /// section during training; 0 disables dropout entirely.
    pub dropout_rate: f64,
    pub use_bias: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            window: 60,
            n_features: 82,
            conv_specs: vec![
                ConvSpec { filter_h: 1, filter_w: 82, out_channels: 8 },
                ConvSpec { filter_h: 3, filter_w: 1, out_channels: 8 },
                ConvSpec { filter_h: 3, filter_w: 1, out_channels: 8 },
            ],
            pool_after: vec![false, true, true],
            dense_hidden: vec![],
            dropout_rate: 0.1,
            use_bias: true,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.window == 0 || self.n_features == 0 {
            return Err(ModelError::InvalidConfig(
                "window and n_features must be positive".into(),
            ));
        }
        if self.conv_specs.is_empty() {
            return Err(ModelError::InvalidConfig("at least one conv layer".into()));
        }
        if self.conv_specs.len() != self.pool_after.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} conv specs but {} pool flags",
                self.conv_specs.len(),
                self.pool_after.len()
            )));
        }
        if self.conv_specs[0].filter_w != self.n_features {
            return Err(ModelError::InvalidConfig(format!(
                "first conv width {} must equal n_features {}",
                self.conv_specs[0].filter_w, self.n_features
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.flatten_size()?;
        Ok(())
    }

    /// Trainable-layer count of the full architecture (convs + hidden denses
    /// + output layer).
    pub fn max_depth(&self) -> usize {
        self.conv_specs.len() + self.dense_hidden.len() + 1
    }

    /// Spatial shape after the first `n_convs` conv (+pool) stages.
    fn conv_section_shape(&self, n_convs: usize) -> Result<(usize, usize, usize), ModelError> {
        let mut ch = 1usize;
        let mut h = self.window;
        let mut w = self.n_features;
        for (spec, &pool) in self.conv_specs.iter().zip(&self.pool_after).take(n_convs) {
            if h < spec.filter_h || w < spec.filter_w {
                return Err(ModelError::FlattenEmpty { size: 0, window: self.window });
            }
            h = h - spec.filter_h + 1;
            w = w - spec.filter_w + 1;
            ch = spec.out_channels;
            if pool {
                h /= 2;
            }
            if h == 0 || w == 0 {
                return Err(ModelError::FlattenEmpty { size: 0, window: self.window });
            }
        }
        Ok((ch, h, w))
    }

    /// Flattened feature count feeding the dense section of the full network.
    pub fn flatten_size(&self) -> Result<usize, ModelError> {
        self.flatten_size_at(self.conv_specs.len())
    }

    /// Flattened feature count after the first `n_convs` conv stages.
    pub fn flatten_size_at(&self, n_convs: usize) -> Result<usize, ModelError> {
        let (ch, h, w) = self.conv_section_shape(n_convs)?;
        Ok(ch * h * w)
    }
}

/// A layer slot in the network.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    Pool(MaxPoolLayer),
    Dense(DenseLayer),
}

impl Layer {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, Layer::Pool(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    /// Free-form training provenance tag, e.g. "B pred" or "P pred".
    pub provenance: String,
}

/// An ordered stack of layers with weights. Value-like and serializable;
/// training mutates weights single-threaded, inference via [`Model::forward`]
/// is pure.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ArchitectureConfig,
    pub layers: Vec<Layer>,
    /// Count of trainable layers (conv + dense, excluding pooling).
    pub depth: usize,
    pub metadata: ModelMetadata,
}

/// Builds the full-depth network.
pub fn build_base_cnn(config: &ArchitectureConfig, seed: u64) -> Result<Model, ModelError> {
    build_subcnn(config, config.max_depth(), seed)
}

/// Builds the truncated network with `depth` trainable layers: the first
/// `depth - 1` hidden layers of the architecture (convs keep their pooling,
/// the first conv has none) plus a fresh sigmoid output neuron.
pub fn build_subcnn(
    config: &ArchitectureConfig,
    depth: usize,
    seed: u64,
) -> Result<Model, ModelError> {
    config.validate()?;
    let max_depth = config.max_depth();
    if depth < 2 || depth > max_depth {
        return Err(ModelError::DepthOutOfRange(depth, max_depth));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hidden = depth - 1;
    let n_convs = n_hidden.min(config.conv_specs.len());
    let n_dense_hidden = n_hidden - n_convs;

    let mut layers = Vec::new();
    let mut in_ch = 1usize;
    for (spec, &pool) in config.conv_specs.iter().zip(&config.pool_after).take(n_convs) {
        layers.push(Layer::Conv(ConvLayer::new(
            in_ch,
            spec.out_channels,
            spec.filter_h,
            spec.filter_w,
            config.use_bias,
            &mut rng,
        )));
        if pool {
            layers.push(Layer::Pool(MaxPoolLayer::new()));
        }
        in_ch = spec.out_channels;
    }

    let mut dense_in = config.flatten_size_at(n_convs)?;
    if dense_in == 0 {
        return Err(ModelError::FlattenEmpty { size: 0, window: config.window });
    }
    for &hidden in config.dense_hidden.iter().take(n_dense_hidden) {
        layers.push(Layer::Dense(DenseLayer::new(
            dense_in,
            hidden,
            Activation::Relu,
            config.use_bias,
            &mut rng,
        )));
        dense_in = hidden;
    }
    layers.push(Layer::Dense(DenseLayer::new(
        dense_in,
        1,
        Activation::Sigmoid,
        config.use_bias,
        &mut rng,
    )));

    Ok(Model {
        config: config.clone(),
        layers,
        depth,
        metadata: ModelMetadata { seed, provenance: format!("init depth={depth}") },
    })
}

/// Copies the shared prefix weights from a trained shallower model into a
/// one-deeper model: every trainable layer of `dst` except its deepest hidden
/// layer and its output layer receives `src`'s weights bit-exactly. `src`'s
/// output layer is discarded; `dst`'s new layers keep their fresh
/// initialization.
pub fn transfer_prefix_weights(src: &Model, mut dst: Model) -> Result<Model, ModelError> {
    if dst.depth != src.depth + 1 {
        return Err(ModelError::PrefixMismatch {
            index: 0,
            detail: format!("dst depth {} must be src depth {} + 1", dst.depth, src.depth),
        });
    }
    let shared = src.depth - 1; // src's hidden layers, excluding its output
    let src_layers: Vec<&Layer> = src.layers.iter().filter(|l| l.is_trainable()).collect();
    let dst_indices: Vec<usize> = dst
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_trainable())
        .map(|(i, _)| i)
        .collect();

    for t in 0..shared {
        match (src_layers[t], &mut dst.layers[dst_indices[t]]) {
            (Layer::Conv(s), Layer::Conv(d)) => {
                if s.weights.shape() != d.weights.shape() {
                    return Err(ModelError::PrefixMismatch {
                        index: t,
                        detail: format!(
                            "conv weight shapes {:?} vs {:?}",
                            s.weights.shape(),
                            d.weights.shape()
                        ),
                    });
                }
                d.weights = s.weights.clone();
                d.bias = s.bias.clone();
            }
            (Layer::Dense(s), Layer::Dense(d)) => {
                if s.weights.shape() != d.weights.shape() {
                    return Err(ModelError::PrefixMismatch {
                        index: t,
                        detail: format!(
                            "dense weight shapes {:?} vs {:?}",
                            s.weights.shape(),
                            d.weights.shape()
                        ),
                    });
                }
                d.weights = s.weights.clone();
                d.bias = s.bias.clone();
            }
            _ => {
                return Err(ModelError::PrefixMismatch {
                    index: t,
                    detail: "layer kinds differ".into(),
                });
            }
        }
    }
    Ok(dst)
}

impl Model {
    /// Expected shape of a single input sample.
    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.config.window, self.config.n_features]
    }

    /// Pure forward pass for one sample `[1, window, n_features]`; dropout is
    /// inactive and no pooling cache is stored.
    pub fn forward_sample(&self, sample: &Tensor) -> Result<f64, ModelError> {
        if sample.shape() != self.input_shape() {
            return Err(LayerError::ShapeMismatch {
                context: "model input",
                expected: format!("{:?}", self.input_shape()),
                actual: format!("{:?}", sample.shape()),
            }
            .into());
        }
        let mut act = sample.clone();
        let mut flattened = false;
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => {
                    let (_, a) = conv.forward(&act)?;
                    act = a;
                }
                Layer::Pool(pool) => {
                    let (a, _) = maxpool_compute(&act, pool.pool_h, pool.pool_w)?;
                    act = a;
                }
                Layer::Dense(dense) => {
                    if !flattened {
                        let n = act.len();
                        act = act.reshaped(vec![n]);
                        flattened = true;
                    }
                    let (_, a) = dense.forward(&act)?;
                    act = a;
                }
            }
        }
        debug_assert_eq!(act.len(), 1);
        Ok(act.data()[0])
    }

    /// Activations feeding the final trainable layer (the flattened features
    /// for the default architecture); dropout inactive.
    pub fn hidden_features(&self, sample: &Tensor) -> Result<Tensor, ModelError> {
        let mut act = sample.clone();
        let mut flattened = false;
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            match layer {
                Layer::Conv(conv) => act = conv.forward(&act)?.1,
                Layer::Pool(pool) => act = maxpool_compute(&act, pool.pool_h, pool.pool_w)?.0,
                Layer::Dense(dense) => {
                    if !flattened {
                        let n = act.len();
                        act = act.reshaped(vec![n]);
                        flattened = true;
                    }
                    act = dense.forward(&act)?.1;
                }
            }
        }
        if !flattened {
            let n = act.len();
            act = act.reshaped(vec![n]);
        }
        Ok(act)
    }

    /// Batch forward over `[batch, 1, window, n_features]`, returning one
    /// probability of class Up per sample.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let expect = self.input_shape();
        let s = batch.shape();
        if s.len() != 4 || s[1] != expect[0] || s[2] != expect[1] || s[3] != expect[2] {
            return Err(LayerError::ShapeMismatch {
                context: "model batch input",
                expected: format!("[B, {}, {}, {}]", expect[0], expect[1], expect[2]),
                actual: format!("{s:?}"),
            }
            .into());
        }
        let per = expect[0] * expect[1] * expect[2];
        let mut out = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let sample = Tensor::new(
                expect.to_vec(),
                batch.data()[b * per..(b + 1) * per].to_vec(),
            );
            out.push(self.forward_sample(&sample)?);
        }
        Ok(Tensor::from_slice(&out))
    }

    /// Parameter tensors (weights then bias per trainable layer, in network
    /// order). This ordering is the contract for optimizers and gradients.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weights);
                    out.push(&c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&d.weights);
                    out.push(&d.bias);
                }
                Layer::Pool(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weights);
                    out.push(&mut c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weights);
                    out.push(&mut d.bias);
                }
                Layer::Pool(_) => {}
            }
        }
        out
    }

    /// Indices into [`Model::params`] belonging to the `t`-th trainable layer.
    pub fn param_indices_of_trainable(&self, t: usize) -> [usize; 2] {
        [2 * t, 2 * t + 1]
    }

    /// FNV-1a hash over the little-endian bytes of the first `n_trainable`
    /// trainable layers' parameters; used to instrument prefix transfers.
    pub fn prefix_weights_hash(&self, n_trainable: usize) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut seen = 0usize;
        for layer in &self.layers {
            if seen == n_trainable {
                break;
            }
            let (w, b) = match layer {
                Layer::Conv(c) => (&c.weights, &c.bias),
                Layer::Dense(d) => (&d.weights, &d.bias),
                Layer::Pool(_) => continue,
            };
            for t in [w, b] {
                for v in t.data() {
                    for byte in v.to_le_bytes() {
                        hash ^= byte as u64;
                        hash = hash.wrapping_mul(0x100000001b3);
                    }
                }
            }
            seen += 1;
        }
        hash
    }

    /// Serializes to the versioned binary format: magic "UCNN", little-endian
    /// u16 version, length-prefixed JSON header, per-layer weight blocks of
    /// little-endian f64 in row-major order, trailing CRC-32 of everything
    /// before it.
    pub fn serialize(&self) -> Vec<u8> {
        let header = ModelHeader::from_model(self);
        let header_bytes = serde_json::to_vec(&header).expect("header is serializable");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Model, ModelError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated.into());
        }
        if &bytes[0..4] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        if bytes.len() < 10 + 4 {
            return Err(FormatError::Truncated.into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        // Checksum covers everything before the trailing 4 bytes.
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed }.into());
        }

        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if 10 + header_len > body_len {
            return Err(FormatError::Truncated.into());
        }
        let header: ModelHeader =
            serde_json::from_slice(&bytes[10..10 + header_len]).map_err(FormatError::Header)?;

        let mut offset = 10 + header_len;
        let mut take = |n_values: usize| -> Result<Vec<f64>, ModelError> {
            let n_bytes = n_values * 8;
            if offset + n_bytes > body_len {
                return Err(FormatError::Truncated.into());
            }
            let vals = bytes[offset..offset + n_bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n_bytes;
            Ok(vals)
        };

        let mut layers = Vec::new();
        for desc in &header.layers {
            match desc {
                LayerDescriptor::Conv { in_channels, out_channels, filter_h, filter_w } => {
                    let wshape = vec![*out_channels, *in_channels, *filter_h, *filter_w];
                    let n: usize = wshape.iter().product();
                    let weights = Tensor::new(wshape, take(n)?);
                    let bias = Tensor::new(vec![*out_channels], take(*out_channels)?);
                    layers.push(Layer::Conv(ConvLayer::from_weights(
                        weights,
                        bias,
                        header.config.use_bias,
                    )));
                }
                LayerDescriptor::Pool => layers.push(Layer::Pool(MaxPoolLayer::new())),
                LayerDescriptor::Dense { in_size, out_size, activation } => {
                    let weights = Tensor::new(vec![*in_size, *out_size], take(in_size * out_size)?);
                    let bias = Tensor::new(vec![*out_size], take(*out_size)?);
                    layers.push(Layer::Dense(DenseLayer::from_weights(
                        weights,
                        bias,
                        *activation,
                        header.config.use_bias,
                    )));
                }
            }
        }
        if offset != body_len {
            return Err(FormatError::Truncated.into());
        }

        Ok(Model {
            config: header.config,
            layers,
            depth: header.depth,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.serialize())
    }

    pub fn load(path: &std::path::Path) -> Result<Model, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| {
            ModelError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
        })?;
        Model::deserialize(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    config: ArchitectureConfig,
    depth: usize,
    metadata: ModelMetadata,
    layers: Vec<LayerDescriptor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerDescriptor {
    Conv { in_channels: usize, out_channels: usize, filter_h: usize, filter_w: usize },
    Pool,
    Dense { in_size: usize, out_size: usize, activation: Activation },
}

impl ModelHeader {
    fn from_model(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerDescriptor::Conv {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    filter_h: c.filter_h,
                    filter_w: c.filter_w,
                },
                Layer::Pool(_) => LayerDescriptor::Pool,
                Layer::Dense(d) => LayerDescriptor::Dense {
                    in_size: d.in_size,
                    out_size: d.out_size,
                    activation: d.activation,
                },
            })
            .collect();
        Self {
            config: model.config.clone(),
            depth: model.depth,
            metadata: model.metadata.clone(),
            layers,
        }
    }
}
