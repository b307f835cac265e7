//! Convolutional front-end, the 1×1-conv bridge into the encoder, and the
//! 256-wide feature head.
//!
//! The stem is a plain conv/swish stack standing in for a pretrained
//! EfficientNetV2-S. Its output is squeezed to three channels by three 1×1
//! convolutions and resampled to the encoder's input side. The class token
//! of the encoder output passes through a dense layer whose 256 outputs are
//! the exported image features, and a second dense layer yields CN/MCI/AD
//! logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Activation, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vit::{VitConfig, VitEncoder};

/// Width of the exported feature vector.
pub const FEATURE_WIDTH: usize = 256;
/// CN, MCI, AD.
pub const DIAGNOSTIC_CLASSES: usize = 3;

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Output channels of the first two 1×1 bridge convolutions; the third
    /// always produces 3.
    pub bridge_channels: [usize; 2],
    /// Whether stem weights receive gradients.
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn default_kernel() -> usize {
    3
}
fn default_activation() -> Activation {
    Activation::Swish
}
fn yes() -> bool {
    true
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            kernel: 3,
            activation: Activation::Swish,
            bridge_channels: [16, 8],
            trainable: true,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::config("stem needs one stride per stage"));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.kernel == 0 {
            return Err(Error::config("stem extents must be positive"));
        }
        if self.activation == Activation::Softmax {
            return Err(Error::config("softmax is not an elementwise stem activation"));
        }
        bridge_channel_plan(self).map(|_| ())
    }

    /// Spatial extent after every stage for an `h×w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::config(format!(
                "stem input {h}×{w} smaller than {MIN_INPUT_SIDE}×{MIN_INPUT_SIDE}"
            )));
        }
        let pad = self.kernel / 2;
        self.strides.iter().try_fold((h, w), |(h, w), &s| {
            Ok((
                conv_output_extent(h, self.kernel, s, pad)?,
                conv_output_extent(w, self.kernel, s, pad)?,
            ))
        })
    }
}

/// Channel counts after each of the three bridge convolutions. They must be
/// non-increasing from the stem width and end at 3.
pub fn bridge_channel_plan(cfg: &StemConfig) -> Result<[usize; 3]> {
    let stem_out = *cfg.channels.last().ok_or_else(|| Error::config("empty stem"))?;
    let plan = [cfg.bridge_channels[0], cfg.bridge_channels[1], 3];
    let mut prev = stem_out;
    for (i, &c) in plan.iter().enumerate() {
        log::debug!("bridge conv {}: {prev} -> {c} channels", i + 1);
        if c == 0 || c > prev {
            return Err(Error::config(format!(
                "bridge channels must not increase: {stem_out} -> {plan:?}"
            )));
        }
        prev = c;
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let kernels = store.add(
            format!("{name}.kernel"),
            Tensor::randn(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), trainable);
        Self {
            kernels,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, params[self.kernels], self.stride, self.padding)?;
        tape.add_channel_bias(y, params[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true);
        Self { weight, bias }
    }

    /// `x·Wᵀ + b` for a vector or a batch of rows.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, params[self.weight])?;
        tape.add_row(y, params[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub cfg: StemConfig,
    pub stages: Vec<ConvLayer>,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StemConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let stages = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&c_out, &stride))| {
                let layer = ConvLayer::new(store, &format!("stem.{i}"), c_in, c_out, cfg.kernel, stride, cfg.trainable, rng);
                c_in = c_out;
                layer
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }
}

/// Stacked conv + activation stages with downsampling.
pub fn stem_forward(tape: &mut Tape, params: &Bound, image: Var, stem: &Stem) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    let [3, h, w] = shape[..] else {
        return Err(Error::Dimension {
            op: "stem_forward",
            lhs: shape,
            rhs: vec![3],
        });
    };
    stem.cfg.output_extent(h, w)?;
    stem.stages.iter().try_fold(image, |x, layer| {
        let y = layer.forward(tape, params, x)?;
        tape.activation(y, stem.cfg.activation)
    })
}

/// Three 1×1 convolutions down to 3 channels, then bilinear resampling to
/// `side×side`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bridge {
    pub convs: [ConvLayer; 3],
    pub side: usize,
}

impl Bridge {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StemConfig, side: usize, rng: &mut R) -> Result<Self> {
        let plan = bridge_channel_plan(cfg)?;
        let mut c_in = *cfg.channels.last().expect("validated");
        let mut idx = 0;
        let convs = plan.map(|c_out| {
            let layer = ConvLayer::new(store, &format!("bridge.{idx}"), c_in, c_out, 1, 1, true, rng);
            c_in = c_out;
            idx += 1;
            layer
        });
        Ok(Self { convs, side })
    }
}

pub fn bridge(tape: &mut Tape, params: &Bound, features: Var, bridge: &Bridge) -> Result<Var> {
    let mut x = features;
    for conv in &bridge.convs {
        x = conv.forward(tape, params, x)?;
    }
    tape.bilinear_resize(x, bridge.side, bridge.side)
}

/// Dense layer to the 256-wide feature vector, then to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHead {
    pub features: Dense,
    pub classifier: Dense,
}

impl FeatureHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            features: Dense::new(store, "head.features", dim, FEATURE_WIDTH, rng),
            classifier: Dense::new(store, "head.classifier", FEATURE_WIDTH, DIAGNOSTIC_CLASSES, rng),
        }
    }
}

/// Reads the class-token row of the encoder output.
pub fn feature_head(tape: &mut Tape, params: &Bound, encoder_out: Var, head: &FeatureHead) -> Result<(Var, Var)> {
    let cls = tape.row(encoder_out, 0)?;
    let features = head.features.forward(tape, params, cls)?;
    let logits = head.classifier.forward(tape, params, features)?;
    Ok((features, logits))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    #[serde(default)]
    pub stem: StemConfig,
    #[serde(default)]
    pub vit: VitConfig,
}

impl ExtractorConfig {
    pub fn paper() -> Self {
        Self {
            stem: StemConfig::default(),
            vit: VitConfig::paper(),
        }
    }
}

/// The complete phase-one model: stem → bridge → encoder → head.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub cfg: ExtractorConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub bridge: Bridge,
    pub encoder: VitEncoder,
    pub head: FeatureHead,
}

pub struct ExtractorOutput {
    pub features: Var,
    pub logits: Var,
}

impl Extractor {
    /// Builds a model with seeded random weights. Encoder base weights are
    /// frozen; stem trainability follows `cfg.stem.trainable`.
    pub fn new<R: Rng + ?Sized>(cfg: &ExtractorConfig, rng: &mut R) -> Result<Self> {
        cfg.vit.validate()?;
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, &cfg.stem, rng)?;
        let bridge = Bridge::new(&mut store, &cfg.stem, cfg.vit.side, rng)?;
        let encoder = VitEncoder::new(&mut store, &cfg.vit, rng)?;
        let head = FeatureHead::new(&mut store, cfg.vit.dim, rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            bridge,
            encoder,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<ExtractorOutput> {
        let x = stem_forward(tape, params, image, &self.stem)?;
        let x = bridge(tape, params, x, &self.bridge)?;
        let tokens = self.encoder.forward(tape, params, x)?;
        let (features, logits) = feature_head(tape, params, tokens, &self.head)?;
        Ok(ExtractorOutput { features, logits })
    }

    /// Inference-mode features and logits for one `3×H×W` image.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_stem_shape() {
        let cfg = StemConfig::default();
        assert_eq!(cfg.output_extent(64, 64).unwrap(), (8, 8));
        assert!(cfg.output_extent(16, 64).is_err());
    }

    #[test]
    fn bridge_plan_audit() {
        let cfg = StemConfig::default();
        assert_eq!(bridge_channel_plan(&cfg).unwrap(), [16, 8, 3]);
        let bad = StemConfig {
            bridge_channels: [64, 8],
            ..cfg
        };
        assert!(bridge_channel_plan(&bad).is_err());
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Extractor::new(&ExtractorConfig::default(), &mut rng).unwrap();
        let img = Tensor::randn(&[3, 64, 64], 1.0, &mut rng);
        let (f1, l1) = model.infer(&img).unwrap();
        let (f2, _) = model.infer(&img).unwrap();
        assert_eq!(f1.shape(), &[FEATURE_WIDTH]);
        assert_eq!(l1.shape(), &[DIAGNOSTIC_CLASSES]);
        assert_eq!(f1, f2);
    }
}
