//! Desk-scale detector: a four-block convolutional backbone followed by the
//! evidential objectness head, the evidential width/height head and a plain
//! offset head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::evidential::{dirichlet_from_logits, nig_from_raw, DirichletState, NigState};
use crate::tensor::Tensor;

/// Channels of the width/height head output: `[γ, v, α, β]` for width, then height.
pub const WH_CHANNELS: usize = 8;
pub const OFFSET_CHANNELS: usize = 2;
/// Logit of a 0.1 prior, used as the initial bias of the object-centre logit.
pub const PRESENCE_PRIOR_BIAS: f64 = -2.19;
/// Position of the first head tensor in [`ModelConfig::layout`].
const HEAD_BASE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the four backbone blocks.
    pub channels: [usize; 4],
    /// Stride of each backbone block; their product is the output stride.
    pub strides: [usize; 4],
    pub head_channels: usize,
    /// Width of the two hidden pointwise layers of the objectness head.
    pub mlp_hidden: usize,
    pub dropout_p: f64,
    /// Also apply dropout before the width/height output layer.
    pub dropout_wh: bool,
    pub leaky_slope: f64,
    pub classes: usize,
    /// Inputs enter the backbone as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64],
            strides: [2, 2, 1, 1],
            head_channels: 16,
            mlp_hidden: 64,
            dropout_p: 0.2,
            dropout_wh: false,
            leaky_slope: 0.01,
            classes: crate::synth::NUM_CLASSES,
            input_mean: 0.2,
            input_std: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.head_channels == 0 || self.mlp_hidden == 0 || self.classes == 0 {
            return Err(Error::validation("model widths and class count must be positive"));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::validation(format!("backbone strides must be 1 or 2, got {:?}", self.strides)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::validation("leaky_slope must be a finite non-negative number"));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(Error::validation("input_std must be positive and input_mean finite"));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, out_c: usize, in_c: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![out_c, in_c, k, k]));
            out.push((format!("{name}.bias"), vec![out_c]));
        };
        let mut in_c = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            conv(&format!("backbone.conv{}", i + 1), c, in_c, 3);
            in_c = c;
        }
        let (feat, hc) = (in_c, self.head_channels);
        conv("objectness.pre", hc, feat, 3);
        conv("objectness.proj", self.classes, hc, 1);
        conv("wh.conv", hc, feat, 3);
        conv("wh.out", WH_CHANNELS, hc, 1);
        conv("offset.conv", hc, feat, 3);
        conv("offset.out", OFFSET_CHANNELS, hc, 1);
        let h = self.mlp_hidden;
        for (name, fan_in, fan_out) in [("objectness.mlp1", 1, h), ("objectness.mlp2", h, h), ("objectness.mlp3", h, 2)] {
            out.push((format!("{name}.weight"), vec![fan_in, fan_out]));
            out.push((format!("{name}.bias"), vec![fan_out]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    /// Kaiming-normal (fan-in, leaky-relu gain) weights and zero biases, except
    /// the centre-logit bias of the objectness output.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    let mut b = Tensor::zeros(&shape);
                    if name == "objectness.mlp3.bias" {
                        b.data_mut()[1] = PRESENCE_PRIOR_BIAS;
                    }
                    b
                } else {
                    kaiming(&name, &shape, gain, &mut rng)
                };
                ParamEntry {
                    name,
                    tensor,
                    trainable: true,
                }
            })
            .collect();
        Ok(Self { entries })
    }

    /// Every parameter zero; logits are then identically zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| ParamEntry {
                name,
                tensor: Tensor::zeros(&shape),
                trainable: true,
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Sets the trainable flag of every tensor whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.layout();
        let expected: Vec<String> = layout.iter().map(|(n, _)| n.clone()).collect();
        if expected != self.names() {
            return Err(crate::CheckpointError::Names {
                expected,
                found: self.names(),
            }
            .into());
        }
        for ((name, shape), e) in layout.into_iter().zip(&self.entries) {
            if e.tensor.shape() != shape.as_slice() {
                return Err(crate::CheckpointError::TensorShape {
                    name,
                    expected: shape,
                    found: e.tensor.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Puts every tensor on the tape as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect(),
        }
    }
}

fn kaiming<R: Rng>(name: &str, shape: &[usize], gain: f64, rng: &mut R) -> Tensor {
    // conv weights are [out, in, k, k]; dense weights are [in, out]
    let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap_or_else(|_| panic!("bad init scale for {name}"));
    let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Tape handles for a [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Raw head outputs for a batch of `B` images on a `h × w` grid with `K` classes.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `[B·K·h·w, 2]` logits `[no-centre, centre]`, rows ordered `(b, k, i, j)`.
    pub objectness: Var,
    /// `[B, 8, h, w]`.
    pub wh: Var,
    /// `[B, 2, h, w]`.
    pub offset: Var,
}

/// Runs the detector on `images: [B, 1, H, W]`. Passing an RNG switches the
/// dropout layers to train mode.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &BoundParams,
    images: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<HeadOutputs> {
    let shape = tape.value(images).shape().to_vec();
    let stride = config.stride();
    if shape.len() != 4 || shape[1] != 1 || !shape[2].is_multiple_of(stride) || !shape[3].is_multiple_of(stride) {
        return Err(Error::validation(format!(
            "images must be [B, 1, H, W] with H and W divisible by {stride}, got {shape:?}"
        )));
    }
    let expected = config.layout().len();
    if params.vars.len() != expected {
        return Err(Error::validation(format!(
            "model expects {expected} parameter tensors, got {}",
            params.vars.len()
        )));
    }
    let (batch, h, w) = (shape[0], shape[2] / stride, shape[3] / stride);
    let slope = config.leaky_slope;
    let p = &params.vars;

    let mut x = tape.affine(images, 1.0 / config.input_std, -config.input_mean / config.input_std)?;
    for (i, &s) in config.strides.iter().enumerate() {
        let y = tape.conv2d(x, p[2 * i], s)?;
        let y = tape.add_bias(y, p[2 * i + 1])?;
        x = tape.leaky_relu(y, slope)?;
    }

    // The three heads open with 3×3 convolutions over the same features; run
    // them as one convolution and split the channels afterwards.
    let hc = config.head_channels;
    let (pre, wh_conv, off_conv) = (HEAD_BASE, HEAD_BASE + 4, HEAD_BASE + 8);
    let weight = tape.concat(&[p[pre], p[wh_conv], p[off_conv]])?;
    let bias = tape.concat(&[p[pre + 1], p[wh_conv + 1], p[off_conv + 1]])?;
    let hidden = tape.conv2d(x, weight, 1)?;
    let hidden = tape.add_bias(hidden, bias)?;
    let hidden = tape.leaky_relu(hidden, slope)?;
    let obj_hidden = tape.narrow(hidden, 1, 0, hc)?;
    let mut wh_hidden = tape.narrow(hidden, 1, hc, hc)?;
    let off_hidden = tape.narrow(hidden, 1, 2 * hc, hc)?;

    let pointwise = |tape: &mut Tape, x: Var, at: usize| -> Result<Var> {
        let y = tape.conv2d(x, p[at], 1)?;
        tape.add_bias(y, p[at + 1])
    };
    let scores = pointwise(tape, obj_hidden, pre + 2)?;
    if config.dropout_wh {
        if let Some(rng) = dropout_rng.as_deref_mut() {
            wh_hidden = tape.dropout(wh_hidden, config.dropout_p, true, rng)?;
        }
    }
    let wh = pointwise(tape, wh_hidden, wh_conv + 2)?;
    let offset = pointwise(tape, off_hidden, off_conv + 2)?;

    // The pointwise stack is shared over (class, row, column).
    let n = batch * config.classes * h * w;
    let mut z = tape.reshape(scores, &[n, 1])?;
    for layer in 0..3 {
        let at = HEAD_BASE + 12 + 2 * layer;
        z = tape.matmul(z, p[at])?;
        z = tape.add_bias(z, p[at + 1])?;
        if layer < 2 {
            z = tape.leaky_relu(z, slope)?;
        }
        if layer == 1 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                z = tape.dropout(z, config.dropout_p, true, rng)?;
            }
        }
    }

    Ok(HeadOutputs {
        objectness: z,
        wh,
        offset,
    })
}

/// Per-image decoded evidential states.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[K·h·w]`.
    pub dirichlet: Vec<DirichletState>,
    /// `[h·w]` each.
    pub nig_w: Vec<NigState>,
    pub nig_h: Vec<NigState>,
    /// `[2·h·w]`: x offsets then y offsets.
    pub offset: Vec<f64>,
}

impl ImagePrediction {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Presence probabilities of one class plane.
    pub fn presence(&self, class: usize) -> Vec<f64> {
        let hw = self.pixels();
        self.dirichlet[class * hw..(class + 1) * hw].iter().map(|d| d.presence()).collect()
    }
}

/// Splits batched head values into per-image evidential states.
pub fn predictions(tape: &Tape, outputs: &HeadOutputs, classes: usize) -> Result<Vec<ImagePrediction>> {
    let wh = tape.value(outputs.wh);
    let (batch, h, w) = (wh.shape()[0], wh.shape()[2], wh.shape()[3]);
    let hw = h * w;
    let logits = tape.value(outputs.objectness).data();
    let off = tape.value(outputs.offset).data();
    (0..batch)
        .map(|b| {
            let base = b * classes * hw;
            let dirichlet = (0..classes * hw)
                .map(|i| dirichlet_from_logits([logits[2 * (base + i)], logits[2 * (base + i) + 1]]))
                .collect::<Result<Vec<_>>>()?;
            let plane = |c: usize, p: usize| wh.data()[(b * WH_CHANNELS + c) * hw + p];
            let nig = |first: usize| {
                (0..hw)
                    .map(|p| nig_from_raw([plane(first, p), plane(first + 1, p), plane(first + 2, p), plane(first + 3, p)]))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(ImagePrediction {
                classes,
                height: h,
                width: w,
                dirichlet,
                nig_w: nig(0)?,
                nig_h: nig(4)?,
                offset: off[b * OFFSET_CHANNELS * hw..(b + 1) * OFFSET_CHANNELS * hw].to_vec(),
            })
        })
        .collect()
}

/// Eval-mode forward over `images` in chunks of `batch`.
pub fn predict(config: &ModelConfig, params: &ModelParams, images: &[&Tensor], batch: usize) -> Result<Vec<ImagePrediction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(stack_images(chunk)?);
        let bound = BoundParams {
            vars: params.entries().iter().map(|e| tape.constant(e.tensor.clone())).collect(),
        };
        let heads = forward(&mut tape, config, &bound, x, None)?;
        out.extend(predictions(&tape, &heads, config.classes)?);
    }
    Ok(out)
}

/// `[1, H, W]` images to one `[B, 1, H, W]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::validation("empty image batch"))?.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != first.as_slice() || first.len() != 3 {
            return Err(Error::Shape {
                op: "stack_images",
                shapes: vec![first.clone(), img.shape().to_vec()],
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), first[0], first[1], first[2]], data)
}
