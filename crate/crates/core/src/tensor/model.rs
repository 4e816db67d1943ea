use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParameterSet, Result, Tensor, TensorError};

/// Probabilities below this are clamped before taking the log.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp,
}

/// Hidden-layer activation. `SoftmaxOutput` means no hidden layers: the
/// only nonlinearity is the output softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    SoftmaxOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CategoricalCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl ModelSpec {
    pub fn logistic_regression(features: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            layer_sizes: vec![features, classes],
            activation: Activation::SoftmaxOutput,
            loss: Loss::CategoricalCrossEntropy,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Mlp,
            layer_sizes,
            activation: Activation::Relu,
            loss: Loss::CategoricalCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(TensorError::InvalidModel(
                "at least an input and an output layer are required".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(TensorError::InvalidModel("layer sizes must be positive".into()));
        }
        match self.kind {
            ModelKind::LogisticRegression if self.layer_sizes.len() != 2 => Err(
                TensorError::InvalidModel("logistic regression has no hidden layers".into()),
            ),
            ModelKind::Mlp if self.layer_sizes.len() > 2 && self.activation != Activation::Relu => {
                Err(TensorError::InvalidModel(
                    "hidden layers require a relu activation".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn features(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated model")
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, w[0], w[1]))
    }

    pub fn kernel_name(layer: usize) -> String {
        format!("dense_{layer}/kernel")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("dense_{layer}/bias")
    }

    /// Names and shapes of the parameter set this model expects, in order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .flat_map(|(l, i, o)| {
                [
                    (Self::kernel_name(l), vec![i, o]),
                    (Self::bias_name(l), vec![o]),
                ]
            })
            .collect()
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.parameter_shapes();
        if expected.len() != params.len() {
            return Err(TensorError::Incompatible(format!(
                "model expects {} tensors, parameter set has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(params.iter()) {
            if name != got_name {
                return Err(TensorError::Incompatible(format!("entry `{got_name}`, expected `{name}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Weights plus biases over every consecutive layer pair.
pub fn parameter_count(model: &ModelSpec) -> usize {
    model.layers().map(|(_, i, o)| i * o + o).sum()
}

/// Glorot-uniform kernels, zero biases.
pub fn glorot_init(model: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (layer, fan_in, fan_out) in model.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernel: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        entries.push((
            ModelSpec::kernel_name(layer),
            Tensor::new(vec![fan_in, fan_out], kernel)?,
        ));
        entries.push((ModelSpec::bias_name(layer), Tensor::zeros(vec![fan_out])));
    }
    ParameterSet::new(entries)
}

struct Layer<'a> {
    kernel: &'a Tensor,
    bias: &'a Tensor,
    fan_in: usize,
    fan_out: usize,
}

fn layers<'a>(model: &ModelSpec, params: &'a ParameterSet) -> Result<Vec<Layer<'a>>> {
    model.validate()?;
    let expected_entries = 2 * (model.layer_sizes.len() - 1);
    if params.len() != expected_entries {
        return Err(TensorError::Incompatible(format!(
            "model expects {expected_entries} tensors, parameter set has {}",
            params.len()
        )));
    }
    model
        .layers()
        .map(|(layer, fan_in, fan_out)| {
            let kname = ModelSpec::kernel_name(layer);
            let bname = ModelSpec::bias_name(layer);
            let kernel = params.tensor(&kname)?;
            let bias = params.tensor(&bname)?;
            if kernel.shape() != [fan_in, fan_out] {
                return Err(TensorError::ShapeMismatch {
                    name: kname,
                    expected: vec![fan_in, fan_out],
                    found: kernel.shape().to_vec(),
                });
            }
            if bias.shape() != [fan_out] {
                return Err(TensorError::ShapeMismatch {
                    name: bname,
                    expected: vec![fan_out],
                    found: bias.shape().to_vec(),
                });
            }
            Ok(Layer {
                kernel,
                bias,
                fan_in,
                fan_out,
            })
        })
        .collect()
}

fn check_input(model: &ModelSpec, x: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || x.shape()[1] != model.features() {
        return Err(TensorError::ShapeMismatch {
            name: "batch_x".into(),
            expected: vec![x.rows(), model.features()],
            found: x.shape().to_vec(),
        });
    }
    Ok(x.shape()[0])
}

/// `out[b, o] = bias[o] + sum_i input[b, i] * kernel[i, o]`
fn affine(input: &[f64], batch: usize, layer: &Layer<'_>) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let w = layer.kernel.data();
    let mut out = Vec::with_capacity(batch * fo);
    for b in 0..batch {
        out.extend_from_slice(layer.bias.data());
        let row = &input[b * fi..(b + 1) * fi];
        let dst = &mut out[b * fo..(b + 1) * fo];
        for (i, &xi) in row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (d, &wv) in dst.iter_mut().zip(&w[i * fo..(i + 1) * fo]) {
                *d += xi * wv;
            }
        }
    }
    out
}

fn softmax_rows(logits: &mut [f64], classes: usize) {
    for row in logits.chunks_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Returns the activations of every layer; the last entry holds the
/// softmax probabilities.
fn forward_trace(layers: &[Layer<'_>], x: &Tensor, batch: usize) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let input = if k == 0 { x.data() } else { &acts[k - 1] };
        let mut z = affine(input, batch, layer);
        if k + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            softmax_rows(&mut z, layer.fan_out);
        }
        acts.push(z);
    }
    acts
}

/// Class probabilities, shape `(batch, classes)`.
pub fn forward(model: &ModelSpec, params: &ParameterSet, batch_x: &Tensor) -> Result<Tensor> {
    let layers = layers(model, params)?;
    let batch = check_input(model, batch_x)?;
    let mut acts = forward_trace(&layers, batch_x, batch);
    let probs = acts.pop().expect("at least one layer");
    Tensor::new(vec![batch, model.classes()], probs)
}

/// One-hot encodes integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        data[row * classes + label] = 1.0;
    }
    Tensor {
        shape: vec![labels.len(), classes],
        data,
    }
}

fn labels_from_one_hot(y: &Tensor, batch: usize, classes: usize) -> Result<Vec<usize>> {
    if y.shape() != [batch, classes] {
        return Err(TensorError::ShapeMismatch {
            name: "batch_y".into(),
            expected: vec![batch, classes],
            found: y.shape().to_vec(),
        });
    }
    (0..batch)
        .map(|row| {
            let r = y.row(row);
            let mut hot = None;
            for (c, &v) in r.iter().enumerate() {
                if v == 1.0 && hot.is_none() {
                    hot = Some(c);
                } else if v != 0.0 {
                    return Err(TensorError::NonOneHot { row });
                }
            }
            hot.ok_or(TensorError::NonOneHot { row })
        })
        .collect()
}

/// Mean categorical cross-entropy over the batch and its gradient.
pub fn loss_and_gradient(
    model: &ModelSpec,
    params: &ParameterSet,
    batch_x: &Tensor,
    batch_y: &Tensor,
) -> Result<(f64, ParameterSet)> {
    let layers = layers(model, params)?;
    let batch = check_input(model, batch_x)?;
    let labels = labels_from_one_hot(batch_y, batch, model.classes())?;
    if batch == 0 {
        return Err(TensorError::ShapeMismatch {
            name: "batch_x".into(),
            expected: vec![1, model.features()],
            found: batch_x.shape().to_vec(),
        });
    }
    let acts = forward_trace(&layers, batch_x, batch);
    let inv_b = 1.0 / batch as f64;

    let probs = acts.last().expect("at least one layer");
    let classes = model.classes();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        loss -= probs[b * classes + label].max(PROB_FLOOR).ln();
    }
    loss *= inv_b;

    // dL/dz for the output layer: (p - y) / B
    let mut delta: Vec<f64> = probs.iter().map(|p| p * inv_b).collect();
    for (b, &label) in labels.iter().enumerate() {
        delta[b * classes + label] -= inv_b;
    }

    let mut grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(layers.len());
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let input = if k == 0 { batch_x.data() } else { &acts[k - 1] };
        let mut gk = vec![0.0; fi * fo];
        let mut gb = vec![0.0; fo];
        for b in 0..batch {
            let d = &delta[b * fo..(b + 1) * fo];
            for (g, &dv) in gb.iter_mut().zip(d) {
                *g += dv;
            }
            for (i, &xi) in input[b * fi..(b + 1) * fi].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, &dv) in gk[i * fo..(i + 1) * fo].iter_mut().zip(d) {
                    *g += xi * dv;
                }
            }
        }
        if k > 0 {
            let w = layer.kernel.data();
            let mut prev = vec![0.0; batch * fi];
            for b in 0..batch {
                let d = &delta[b * fo..(b + 1) * fo];
                for i in 0..fi {
                    // relu'(z) is 0 where the activation was clamped
                    if input[b * fi + i] <= 0.0 {
                        continue;
                    }
                    prev[b * fi + i] = w[i * fo..(i + 1) * fo]
                        .iter()
                        .zip(d)
                        .map(|(wv, dv)| wv * dv)
                        .sum();
                }
            }
            delta = prev;
        }
        grads.push((
            Tensor::new(vec![fi, fo], gk)?,
            Tensor::new(vec![fo], gb)?,
        ));
    }
    grads.reverse();
    let entries = grads
        .into_iter()
        .enumerate()
        .flat_map(|(layer, (k, b))| {
            [
                (ModelSpec::kernel_name(layer), k),
                (ModelSpec::bias_name(layer), b),
            ]
        })
        .collect();
    Ok((loss, ParameterSet::new(entries)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy over a labelled set, processed in chunks.
pub fn evaluate(
    model: &ModelSpec,
    params: &ParameterSet,
    features: &Tensor,
    labels: &[usize],
) -> Result<Metrics> {
    const CHUNK: usize = 1024;
    let n = labels.len();
    if n == 0 || features.rows() != n {
        return Err(TensorError::ShapeMismatch {
            name: "features".into(),
            expected: vec![n, model.features()],
            found: features.shape().to_vec(),
        });
    }
    let classes = model.classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let probs = forward(model, params, &features.select_rows(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            let p = probs.row(row);
            loss -= p[labels[i]].max(PROB_FLOOR).ln();
            let mut best = 0;
            for c in 1..classes {
                if p[c] > p[best] {
                    best = c;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(Metrics {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
    })
}
