//! Training with an explanation penalty: cross-entropy plus `λ Σ |β − target|`
//! where `β` is the contextual decomposition of the true-class logit.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::awd::gather_rows;
use crate::backend::{Backend, Eager};
use crate::cd::{group_side, row_sides, CdPair, FeatureGroup, RowSide};
use crate::error::{Error, Result};
use crate::network::{argmax, BoundLayer, Mode, Network};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Inputs `[n, ..shape]` with one class label per row.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("inputs {:?} with {} labels", inputs.shape(), labels.len()),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> Result<Tensor<T>> {
        self.inputs.row(i)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self { inputs: gather_rows(&self.inputs, rows)?, labels: rows.iter().map(|&r| self.labels[r]).collect() })
    }
}

/// Desired `β` at the true-class logit for one sample and group.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationTarget {
    pub sample: usize,
    pub group: FeatureGroup,
    pub value: f64,
}

/// Where the penalized groups come from during training.
#[derive(Clone, Debug, Default)]
pub enum Targets {
    #[default]
    None,
    /// Fixed targets keyed by dataset row.
    Fixed(Vec<ExplanationTarget>),
    /// Fresh single-pixel groups with target 0 for every batch.
    SampledPixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pixels drawn per batch for [`Targets::SampledPixels`].
    pub pixel_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lambda: 0.0, learning_rate: 0.01, epochs: 10, batch_size: 32, seed: 0, pixel_samples: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be a non-negative number"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A penalized group for one row of the current batch.
#[derive(Clone, Debug)]
pub struct BatchTarget {
    pub row: usize,
    pub group: FeatureGroup,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct CdepLoss<V> {
    pub prediction: V,
    pub explanation: V,
    pub total: V,
}

/// `Σᵢ −log softmax(f(xᵢ))[yᵢ] + λ Σ |β − target|` for a batch `x: [B, ..]`.
/// The explanation term is skipped (and reported as 0) when `λ = 0` or
/// there are no targets.
#[allow(clippy::too_many_arguments)]
pub fn cdep_loss<T: Scalar, B: Backend<T>>(
    b: &B,
    net: &Network<T>,
    params: &[BoundLayer<B::Value>],
    x: &B::Value,
    labels: &[usize],
    targets: &[BatchTarget],
    lambda: f64,
    mode: Mode,
    seed: u64,
) -> Result<CdepLoss<B::Value>> {
    let shape = b.shape(x);
    let rows = shape[0];
    let classes = net.num_classes();
    if labels.len() != rows {
        return Err(Error::shape("cdep", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let logits = net.forward_batch(b, params, x, mode, seed)?.pop().expect("network has layers");
    let logp = b.log_softmax(&logits)?;
    let picked = b.gather(&logp, labels.iter().enumerate().map(|(r, &y)| r * classes + y).collect(), &[rows])?;
    let prediction = b.neg(&b.sum(&picked)?)?;
    let explanation = if lambda > 0.0 && !targets.is_empty() {
        explanation_term(b, net, params, x, labels, targets)?
    } else {
        b.scalar(T::zero())
    };
    let total = if lambda > 0.0 { b.add(&prediction, &b.scale(&explanation, T::lit(lambda))?)? } else { prediction.clone() };
    Ok(CdepLoss { prediction, explanation, total })
}

/// `Σ |β_{y}(x_row, S) − target|` over all targets, one CD row per target.
/// Rows whose masked input is exactly zero (and whose group is not the
/// whole input) have `β ≡ 0`; they add the constant `|target|` and are not
/// propagated.
pub fn explanation_term<T: Scalar, B: Backend<T>>(
    b: &B,
    net: &Network<T>,
    params: &[BoundLayer<B::Value>],
    x: &B::Value,
    labels: &[usize],
    targets: &[BatchTarget],
) -> Result<B::Value> {
    let shape = b.shape(x);
    let sample_shape = &shape[1..];
    let n: usize = sample_shape.iter().product();
    let classes = net.num_classes();
    let xv = b.value(x);
    let mut active = Vec::with_capacity(targets.len());
    let mut constant = 0.0;
    for t in targets {
        if t.group.shape() != sample_shape {
            return Err(Error::shape("cdep", format!("group {:?} vs sample {:?}", t.group.shape(), sample_shape)));
        }
        if t.row >= shape[0] {
            return Err(Error::invalid(format!("target row {} out of range for batch of {}", t.row, shape[0])));
        }
        let row = &xv.data()[t.row * n..(t.row + 1) * n];
        let silent = t.group.len() < n && t.group.indices().iter().all(|&i| row[i] == T::zero());
        if silent {
            constant += t.value.abs();
        } else {
            active.push(t);
        }
    }
    let constant = b.scalar(T::lit(constant));
    if active.is_empty() {
        return Ok(constant);
    }
    let mut keep = Vec::with_capacity(active.len() * n);
    let mut source = Vec::with_capacity(active.len() * n);
    for t in &active {
        keep.extend(t.group.mask().iter().map(|&m| if m { T::one() } else { T::zero() }));
        source.extend(t.row * n..(t.row + 1) * n);
    }
    let mut rows_shape = vec![active.len()];
    rows_shape.extend_from_slice(sample_shape);
    let stacked = b.gather(x, source, &rows_shape)?;
    let keep = Tensor::new(rows_shape.clone(), keep)?;
    let rest = keep.map(|v| T::one() - v);
    let pair = CdPair { beta: b.mul_const(&stacked, keep)?, gamma: b.mul_const(&stacked, rest)? };
    let sides: Vec<RowSide> =
        active.iter().zip(row_sides(b, &pair)).map(|(t, s)| group_side(&t.group, &s)).collect();
    let out = net.cd_logits_rows(b, params, pair, &sides)?;
    let beta = b.gather(
        &out.beta,
        active.iter().enumerate().map(|(i, t)| i * classes + labels[t.row]).collect(),
        &[active.len()],
    )?;
    let goal = Tensor::new(vec![active.len()], active.iter().map(|t| T::lit(t.value)).collect())?;
    let l1 = b.l1_norm(&b.sub(&beta, &b.constant(goal))?)?;
    b.add(&l1, &constant)
}

/// `count` distinct pixel positions of an image `[C, H, W]` (or `[H, W]`,
/// `[L]`), each as a group covering every channel at that position.
pub fn sample_pixel_groups(shape: &[usize], count: usize, seed: u64) -> Result<Vec<FeatureGroup>> {
    let (channels, plane) = match shape {
        [c, h, w] => (*c, h * w),
        [h, w] => (1, h * w),
        [l] => (1, *l),
        _ => return Err(Error::invalid(format!("cannot sample pixels of shape {shape:?}"))),
    };
    if count > plane {
        return Err(Error::invalid(format!("{count} pixels requested from {plane}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, plane, count);
    picks
        .iter()
        .map(|p| {
            let idx: Vec<usize> = (0..channels).map(|c| c * plane + p).collect();
            FeatureGroup::from_indices(shape, &idx)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy per sample over the epoch.
    pub prediction_loss: f64,
    /// Mean explanation term per sample (before λ).
    pub explanation_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    pub net: Network<T>,
    pub history: Vec<EpochRecord>,
}

const PIXEL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seeded mini-batch gradient descent on [`cdep_loss`].
pub fn train<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    targets: &Targets,
    config: &TrainConfig,
) -> Result<TrainResult<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if data.sample_shape() != net.input_shape() {
        return Err(Error::shape(
            "cdep",
            format!("samples {:?} vs network input {:?}", data.sample_shape(), net.input_shape()),
        ));
    }
    let mut fixed: BTreeMap<usize, Vec<&ExplanationTarget>> = BTreeMap::new();
    if let Targets::Fixed(list) = targets {
        for t in list {
            if t.sample >= data.len() {
                return Err(Error::invalid(format!("target sample {} out of range", t.sample)));
            }
            if t.group.shape() != data.sample_shape() {
                return Err(Error::shape("cdep", format!("group {:?} vs sample {:?}", t.group.shape(), data.sample_shape())));
            }
            fixed.entry(t.sample).or_default().push(t);
        }
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(config.seed ^ PIXEL_STREAM);
    let mut sgd = Sgd { learning_rate: config.learning_rate };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut pred_sum, mut expl_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk)?;
            let mut batch_targets = Vec::new();
            if config.lambda > 0.0 {
                match targets {
                    Targets::None => {}
                    Targets::Fixed(_) => {
                        for (row, sample) in chunk.iter().enumerate() {
                            for t in fixed.get(sample).into_iter().flatten() {
                                batch_targets.push(BatchTarget { row, group: t.group.clone(), value: t.value });
                            }
                        }
                    }
                    Targets::SampledPixels => {
                        use rand::RngCore;
                        let groups = sample_pixel_groups(data.sample_shape(), config.pixel_samples, pixel_rng.next_u64())?;
                        for row in 0..chunk.len() {
                            for g in &groups {
                                batch_targets.push(BatchTarget { row, group: g.clone(), value: 0.0 });
                            }
                        }
                    }
                }
            }
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let x = tape.constant(batch.inputs.clone());
            let loss = cdep_loss(
                &tape,
                &net,
                &bound,
                &x,
                &batch.labels,
                &batch_targets,
                config.lambda,
                Mode::Train,
                config.seed.wrapping_add(step),
            )?;
            step += 1;
            let total = tape.value(&loss.total).item()?.as_f64();
            if !total.is_finite() {
                return Err(Error::Divergence { stage: "cdep-train epoch", index: epoch });
            }
            pred_sum += tape.value(&loss.prediction).item()?.as_f64();
            expl_sum += tape.value(&loss.explanation).item()?.as_f64();
            let grads = tape.backward(loss.total)?;
            let vars = Network::<T>::bound_parameters(&bound);
            let gs: Vec<Tensor<T>> =
                vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(v)))).collect();
            if gs.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { stage: "cdep-train epoch", index: epoch });
            }
            let mut values: Vec<Tensor<T>> = net.parameters().into_iter().cloned().collect();
            sgd.step(&mut values, &gs)?;
            net.set_parameters(values)?;
        }
        correct += count_correct(&net, data)?;
        history.push(EpochRecord {
            epoch,
            prediction_loss: pred_sum / data.len() as f64,
            explanation_loss: expl_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainResult { net, history })
}

fn count_correct<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<usize> {
    let classes = net.num_classes();
    let mut correct = 0;
    let params = net.bind(&Eager, false);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(256) {
        let batch = data.subset(chunk)?;
        let logits = net.forward_batch(&Eager, &params, &batch.inputs, Mode::Eval, 0)?.pop().expect("network has layers");
        for (r, &y) in batch.labels.iter().enumerate() {
            if argmax(&logits.data()[r * classes..(r + 1) * classes]) == y {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Fraction of rows classified correctly in evaluation mode.
pub fn accuracy<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(count_correct(net, data)? as f64 / data.len() as f64)
}

/// Epoch history as CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,prediction_loss,explanation_loss,train_accuracy\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            r.epoch, r.prediction_loss, r.explanation_loss, r.train_accuracy
        ));
    }
    out
}
