//! The custom CNN: four convolutional blocks, global average pooling,
//! dropout, two L2-regularized dense layers and a classification head.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{self, Activation, BatchNormState, LayerSpec, Padding, RunningStats};
use crate::{Error, Mode, Result, Tape, Tensor, Var};

/// Classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// 64 -> 2 dense units with softmax. Matches the 625,378 parameter total.
    #[default]
    Softmax2,
    /// 64 -> 1 dense unit with sigmoid (output = P(uninfected)).
    Sigmoid1,
}

impl Head {
    pub fn units(self) -> usize {
        match self {
            Head::Softmax2 => 2,
            Head::Sigmoid1 => 1,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax2" => Ok(Head::Softmax2),
            "sigmoid1" => Ok(Head::Sigmoid1),
            other => Err(Error::invalid(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    /// `[height, width, channels]`
    pub input_size: [usize; 3],
    pub block_filters: Vec<usize>,
    /// Convolutions per block. `None` means two per block except one in the
    /// final block.
    pub convs_per_block: Option<Vec<usize>>,
    pub dense_units: Vec<usize>,
    pub dropout_rate: f64,
    pub l2: f64,
    pub head: Head,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_size: [100, 100, 3],
            block_filters: vec![32, 64, 128, 256],
            convs_per_block: None,
            dense_units: vec![128, 64],
            dropout_rate: 0.25,
            l2: 0.01,
            head: Head::Softmax2,
            bn_momentum: BatchNormState::DEFAULT_MOMENTUM,
            bn_epsilon: BatchNormState::DEFAULT_EPSILON,
        }
    }
}

impl ArchitectureConfig {
    pub fn convs_per_block(&self) -> Vec<usize> {
        match &self.convs_per_block {
            Some(c) => c.clone(),
            None => {
                let n = self.block_filters.len();
                (0..n).map(|i| if i + 1 == n { 1 } else { 2 }).collect()
            }
        }
    }
}

/// A named layer plus the parameter tensors it owns and its per-sample
/// output extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub params: Vec<String>,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ArchitectureConfig,
    layers: Vec<Layer>,
    params: IndexMap<String, Tensor>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// Pre-activation head output, `[N, units]`.
    pub logits: Var,
    /// Head activation output, `[N, units]`.
    pub probs: Var,
    /// Scalar sum of the dense-layer L2 penalties.
    pub l2: Var,
    /// Leaf handles for every trainable parameter, keyed by name.
    pub params: IndexMap<String, Var>,
    /// New running statistics (train mode only), keyed by parameter name.
    pub running_updates: Vec<(String, Tensor)>,
}

const MOVING_MEAN: &str = "moving_mean";
const MOVING_VAR: &str = "moving_var";

/// Builds the model and initializes its weights (Glorot-uniform kernels,
/// zero biases, identity batch norm) from `init_seed`.
pub fn build_custom_cnn(config: &ArchitectureConfig, init_seed: u64) -> Result<ModelGraph> {
    ModelGraph::new(config.clone(), init_seed)
}

impl ModelGraph {
    pub fn new(config: ArchitectureConfig, init_seed: u64) -> Result<Self> {
        let layers = plan_layers(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = IndexMap::new();
        let mut channels = config.input_size[2];
        let mut features = 0;
        for layer in &layers {
            match layer.spec {
                LayerSpec::Conv2d {
                    filters,
                    kernel: [kh, kw],
                    ..
                } => {
                    let fan_in = kh * kw * channels;
                    let fan_out = kh * kw * filters;
                    params.insert(
                        format!("{}.kernel", layer.name),
                        glorot(&[kh, kw, channels, filters], fan_in, fan_out, &mut rng),
                    );
                    params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[filters]));
                    channels = filters;
                }
                LayerSpec::BatchNorm { .. } => {
                    let s = BatchNormState::new(channels);
                    params.insert(format!("{}.gamma", layer.name), s.gamma);
                    params.insert(format!("{}.beta", layer.name), s.beta);
                    params.insert(format!("{}.{MOVING_MEAN}", layer.name), s.moving_mean);
                    params.insert(format!("{}.{MOVING_VAR}", layer.name), s.moving_var);
                }
                LayerSpec::GlobalAvgPool => features = channels,
                LayerSpec::Dense { units, .. } => {
                    params.insert(
                        format!("{}.weight", layer.name),
                        glorot(&[features, units], features, units, &mut rng),
                    );
                    params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[units]));
                    features = units;
                }
                LayerSpec::MaxPool | LayerSpec::Dropout { .. } | LayerSpec::Flatten => {}
            }
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Whether the optimizer updates this parameter (running statistics excluded).
    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(MOVING_MEAN) || name.ends_with(MOVING_VAR))
    }

    /// Every parameter element, batch-norm running statistics included.
    pub fn count_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| Self::is_trainable(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replaces a parameter, checking its extents.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            self.set_param(&name, value)?;
        }
        Ok(())
    }

    /// Records a forward pass on `tape`.
    ///
    /// `track_params` makes every trainable parameter a gradient-requiring
    /// leaf. `seed` drives dropout in train mode.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        seed: u64,
        track_params: bool,
    ) -> Result<ForwardPass> {
        let [h, w, c] = self.config.input_size;
        match *tape.value(input).shape() {
            [_, ih, iw, ic] if [ih, iw, ic] == [h, w, c] => {}
            ref s => {
                return Err(Error::shape(format!(
                    "model expects [N,{h},{w},{c}], got {s:?}"
                )))
            }
        }
        let mut leaves = IndexMap::new();
        let mut leaf = |tape: &mut Tape, name: String| -> Var {
            let v = tape.leaf(self.params[&name].clone(), track_params);
            leaves.insert(name, v);
            v
        };
        let mut x = input;
        let mut penalties = Vec::new();
        let mut running_updates = Vec::new();
        let mut logits = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let name = &layer.name;
            x = match layer.spec {
                LayerSpec::Conv2d {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let k = leaf(tape, format!("{name}.kernel"));
                    let b = leaf(tape, format!("{name}.bias"));
                    let y = layers::conv2d(tape, x, k, b, stride, padding)?;
                    activate(tape, y, activation)?
                }
                LayerSpec::BatchNorm { momentum, epsilon } => {
                    let gamma = leaf(tape, format!("{name}.gamma"));
                    let beta = leaf(tape, format!("{name}.beta"));
                    let mean_key = format!("{name}.{MOVING_MEAN}");
                    let var_key = format!("{name}.{MOVING_VAR}");
                    let mut mean = self.params[&mean_key].clone();
                    let mut var = self.params[&var_key].clone();
                    let y = layers::batchnorm(
                        tape,
                        x,
                        gamma,
                        beta,
                        RunningStats {
                            mean: mean.data_mut(),
                            var: var.data_mut(),
                        },
                        momentum,
                        epsilon,
                        mode,
                    )?;
                    if mode == Mode::Train {
                        running_updates.push((mean_key, mean));
                        running_updates.push((var_key, var));
                    }
                    y
                }
                LayerSpec::MaxPool => layers::maxpool2d(tape, x)?,
                LayerSpec::GlobalAvgPool => layers::global_avg_pool(tape, x)?,
                LayerSpec::Dropout { rate } => {
                    let layer_seed = seed ^ (li as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    layers::dropout(tape, x, rate, mode, layer_seed)?
                }
                LayerSpec::Flatten => layers::flatten(tape, x)?,
                LayerSpec::Dense { activation, l2, .. } => {
                    let wv = leaf(tape, format!("{name}.weight"));
                    let bv = leaf(tape, format!("{name}.bias"));
                    let (y, penalty) = layers::dense(tape, x, wv, bv, l2)?;
                    if l2 > 0.0 {
                        penalties.push(penalty);
                    }
                    if matches!(activation, Activation::Softmax | Activation::Sigmoid) {
                        logits = Some(y);
                    }
                    activate(tape, y, activation)?
                }
            };
        }
        let logits = logits.ok_or_else(|| Error::invalid("model has no classification head"))?;
        let mut l2 = tape.constant(Tensor::scalar(0.0));
        for p in penalties {
            l2 = tape.add(l2, p)?;
        }
        let params = leaves
            .into_iter()
            .filter(|(k, _)| Self::is_trainable(k))
            .collect();
        Ok(ForwardPass {
            logits,
            probs: x,
            l2,
            params,
            running_updates,
        })
    }

    /// Class probabilities and the L2 total for a batch. Running statistics
    /// are read but never modified here; in train mode the batch statistics
    /// are used and dropout is sampled from `seed`.
    pub fn forward(&self, batch: &Tensor, mode: Mode, seed: u64) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let pass = self.forward_on_tape(&mut tape, input, mode, seed, false)?;
        let l2 = tape.value(pass.l2).item()?;
        Ok((tape.value(pass.probs).clone(), l2))
    }

    /// Inference-mode class probabilities, evaluated in chunks of `chunk` images.
    pub fn predict_proba(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        let shape = batch.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected [N,H,W,C], got {shape:?}")));
        }
        let per = shape[1] * shape[2] * shape[3];
        let mut out = Vec::with_capacity(shape[0] * self.head().units());
        for part in batch.data().chunks(per * chunk.max(1)) {
            let n = part.len() / per;
            let t = Tensor::new(&[n, shape[1], shape[2], shape[3]], part.to_vec())?;
            let (p, _) = self.forward(&t, Mode::Infer, 0)?;
            out.extend_from_slice(p.data());
        }
        Tensor::new(&[shape[0], self.head().units()], out)
    }

    /// Text table of layers, output extents and parameter counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let rule = "-".repeat(72);
        let _ = writeln!(s, "{:<34}{:<26}{:>12}", "Layer (type)", "Output Shape", "Param #");
        let _ = writeln!(s, "{rule}");
        for layer in &self.layers {
            let count: usize = layer.params.iter().map(|p| self.params[p].len()).sum();
            let dims: Vec<String> = layer.output_shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "{:<34}{:<26}{:>12}",
                format!("{} ({})", layer.name, layer.spec.kind()),
                format!("(None, {})", dims.join(", ")),
                group_thousands(count)
            );
        }
        let total = self.count_parameters();
        let trainable = self.count_trainable();
        let _ = writeln!(s, "{rule}");
        let _ = writeln!(s, "Trainable params: {}", group_thousands(trainable));
        let _ = writeln!(s, "Non-trainable params: {}", group_thousands(total - trainable));
        let _ = writeln!(s, "Total params: {}", group_thousands(total));
        s
    }
}

fn activate(tape: &mut Tape, x: Var, activation: Activation) -> Result<Var> {
    Ok(match activation {
        Activation::Linear => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => layers::softmax(tape, x)?,
    })
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// `1234567` -> `"1,234,567"`
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn plan_layers(config: &ArchitectureConfig) -> Result<Vec<Layer>> {
    let [mut h, mut w, c] = config.input_size;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("input extents must be positive"));
    }
    if config.block_filters.is_empty() {
        return Err(Error::invalid("at least one convolutional block is required"));
    }
    let convs = config.convs_per_block();
    if convs.len() != config.block_filters.len() || convs.contains(&0) {
        return Err(Error::invalid(format!(
            "convs_per_block {convs:?} does not match {} blocks",
            config.block_filters.len()
        )));
    }
    let mut layers = Vec::new();
    let push = |layers: &mut Vec<Layer>, name: String, spec: LayerSpec, params: &[&str], shape: Vec<usize>| -> Result<()> {
        spec.validate()?;
        let params = params.iter().map(|p| format!("{name}.{p}")).collect();
        layers.push(Layer {
            name,
            spec,
            params,
            output_shape: shape,
        });
        Ok(())
    };
    let blocks = config.block_filters.len();
    let (mut conv_i, mut bn_i, mut pool_i) = (0, 0, 0);
    let mut channels = c;
    for (b, (&filters, &n_convs)) in config.block_filters.iter().zip(&convs).enumerate() {
        for _ in 0..n_convs {
            conv_i += 1;
            channels = filters;
            push(
                &mut layers,
                format!("conv2d_{conv_i}"),
                LayerSpec::Conv2d {
                    filters,
                    kernel: [3, 3],
                    stride: 1,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                &["kernel", "bias"],
                vec![h, w, channels],
            )?;
        }
        bn_i += 1;
        push(
            &mut layers,
            format!("batch_norm_{bn_i}"),
            LayerSpec::BatchNorm {
                momentum: config.bn_momentum,
                epsilon: config.bn_epsilon,
            },
            &["gamma", "beta", MOVING_MEAN, MOVING_VAR],
            vec![h, w, channels],
        )?;
        if b + 1 < blocks {
            if h < 2 || w < 2 {
                return Err(Error::invalid(format!(
                    "input too small: {h}x{w} feature map cannot be pooled in block {}",
                    b + 1
                )));
            }
            h /= 2;
            w /= 2;
            pool_i += 1;
            push(&mut layers, format!("max_pool_{pool_i}"), LayerSpec::MaxPool, &[], vec![h, w, channels])?;
        }
    }
    push(&mut layers, "global_avg_pool".into(), LayerSpec::GlobalAvgPool, &[], vec![channels])?;
    push(
        &mut layers,
        "dropout".into(),
        LayerSpec::Dropout {
            rate: config.dropout_rate,
        },
        &[],
        vec![channels],
    )?;
    push(&mut layers, "flatten".into(), LayerSpec::Flatten, &[], vec![channels])?;
    for (i, &units) in config.dense_units.iter().enumerate() {
        push(
            &mut layers,
            format!("dense_{}", i + 1),
            LayerSpec::Dense {
                units,
                activation: Activation::Relu,
                l2: config.l2,
            },
            &["weight", "bias"],
            vec![units],
        )?;
    }
    let (units, activation) = match config.head {
        Head::Softmax2 => (2, Activation::Softmax),
        Head::Sigmoid1 => (1, Activation::Sigmoid),
    };
    push(
        &mut layers,
        "head".into(),
        LayerSpec::Dense {
            units,
            activation,
            l2: 0.0,
        },
        &["weight", "bias"],
        vec![units],
    )?;
    Ok(layers)
}
