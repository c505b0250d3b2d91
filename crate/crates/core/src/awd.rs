//! Adaptive wavelet distillation: learn a lowpass filter whose wavelet
//! representation is invertible, valid and sparse in the model's attributions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{Backend, Eager};
use crate::cd::CdPair;
use crate::error::{Error, Result};
use crate::network::{BoundLayer, Network};
use crate::optim::{Adam, Sgd};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trim::invert_square;
use crate::wavelet::{check_levels, constraint_terms, dwt_forward_with, dwt_inverse_with, scale_ranges, WaveletFilter};

/// Update rule for the filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwdConfig {
    /// Sparsity weight on `‖Ψx‖₁`.
    pub lambda: f64,
    /// Weight on the attribution L1 norm.
    pub interp_weight: f64,
    pub levels: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    /// Signals per step; 0 uses the whole dataset.
    pub batch_size: usize,
    pub seed: u64,
    pub frequency_grid: usize,
    /// Logit whose attributions are penalized.
    pub class_index: usize,
    /// Initial filter name (`haar`, `db2`, `db5`).
    pub init: String,
    /// After the main loop, descend on the constraint terms alone until
    /// they fall to this level (0 disables the pass).
    pub constraint_tolerance: f64,
    pub polish_iterations: usize,
}

impl Default for AwdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.005,
            interp_weight: 0.043,
            levels: 3,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            iterations: 200,
            batch_size: 0,
            seed: 0,
            frequency_grid: crate::wavelet::FREQUENCY_GRID,
            class_index: 0,
            init: "db5".into(),
            constraint_tolerance: 1e-8,
            polish_iterations: 5000,
        }
    }
}

impl AwdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.interp_weight >= 0.0) {
            return Err(Error::invalid("lambda and interp_weight must be non-negative"));
        }
        if self.levels == 0 || self.frequency_grid == 0 {
            return Err(Error::invalid("levels and frequency_grid must be at least 1"));
        }
        if !(self.constraint_tolerance >= 0.0) {
            return Err(Error::invalid("constraint_tolerance must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Per-iteration loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub constraints: f64,
    pub interpretation: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AwdLoss<V> {
    pub reconstruction: V,
    pub sparsity: V,
    pub constraints: V,
    pub interpretation: V,
    pub total: V,
}

/// Reconstructions of every unit coefficient: row `i` is `Ψ⁻¹ eᵢ`.
fn synthesis_basis<T: Scalar, B: Backend<T>>(b: &B, h: &B::Value, len: usize, levels: usize) -> Result<B::Value> {
    let eye = Tensor::new(
        vec![len, len],
        (0..len * len).map(|k| if k / len == k % len { T::one() } else { T::zero() }).collect(),
    )?;
    dwt_inverse_with(b, h, &b.constant(eye), levels)
}

/// Per-coefficient TRIM-CD attributions `[m, L]` of signals `x: [m, L]`
/// through `f ∘ Ψ⁻¹`: coefficient `i` alone forms the group.
pub fn coefficient_attributions_with<T: Scalar, B: Backend<T>>(
    b: &B,
    net: &Network<T>,
    params: &[BoundLayer<B::Value>],
    h: &B::Value,
    x: &B::Value,
    levels: usize,
    class_index: usize,
) -> Result<B::Value> {
    let shape = b.shape(x);
    let [m, len] = shape[..] else {
        return Err(Error::shape("awd", format!("signals must be [m, L], got {:?}", shape)));
    };
    if net.input_shape() != [len] {
        return Err(Error::shape("awd", format!("network input {:?} vs signal length {len}", net.input_shape())));
    }
    let coeffs = dwt_forward_with(b, h, x, levels)?;
    let recon = dwt_inverse_with(b, h, &coeffs, levels)?;
    let basis = synthesis_basis(b, h, len, levels)?;
    let full = [m, len, len];
    let c = b.broadcast_to(&b.reshape(&coeffs, &[m, len, 1])?, &full)?;
    let beta = b.mul(&c, &b.broadcast_to(&b.reshape(&basis, &[1, len, len])?, &full)?)?;
    let total = b.broadcast_to(&b.reshape(&recon, &[m, 1, len])?, &full)?;
    let gamma = b.sub(&total, &beta)?;
    let rows = [m * len, len];
    let pair = CdPair { beta: b.reshape(&beta, &rows)?, gamma: b.reshape(&gamma, &rows)? };
    let out = net.cd_logits(b, params, pair)?;
    let picked = b.select_last(&out.beta, class_index)?;
    b.reshape(&picked, &[m, len])
}

/// Eq.-(11)-style objective on a batch `x: [m, L]`:
/// `(1/m)Σ‖x − x̂‖² + (1/m)Σ λ‖Ψx‖₁ + constraints + γ Σ ‖TRIM(Ψx)‖₁`.
pub fn awd_loss<T: Scalar, B: Backend<T>>(
    b: &B,
    net: &Network<T>,
    params: &[BoundLayer<B::Value>],
    h: &B::Value,
    x: &B::Value,
    config: &AwdConfig,
) -> Result<AwdLoss<B::Value>> {
    let shape = b.shape(x);
    let m = T::from_usize_lossy(shape[0]);
    let inv_m = T::one() / m;
    let coeffs = dwt_forward_with(b, h, x, config.levels)?;
    let recon = dwt_inverse_with(b, h, &coeffs, config.levels)?;
    let reconstruction = b.scale(&b.l2_norm_sq(&b.sub(x, &recon)?)?, inv_m)?;
    let sparsity = b.scale(&b.l1_norm(&coeffs)?, T::lit(config.lambda) * inv_m)?;
    let constraints = constraint_terms(b, h, config.frequency_grid)?.total;
    let interpretation = if config.interp_weight > 0.0 {
        let attr = coefficient_attributions_with(b, net, params, h, x, config.levels, config.class_index)?;
        b.scale(&b.l1_norm(&attr)?, T::lit(config.interp_weight))?
    } else {
        b.scalar(T::zero())
    };
    let mut total = b.add(&reconstruction, &sparsity)?;
    total = b.add(&total, &constraints)?;
    total = b.add(&total, &interpretation)?;
    Ok(AwdLoss { reconstruction, sparsity, constraints, interpretation, total })
}

/// `γ Σ ‖TRIM(Ψxᵢ)‖₁` with `γ = 1` for signals `[m, L]` or one signal `[L]`.
pub fn interpretation_loss<T: Scalar>(
    net: &Network<T>,
    filter: &WaveletFilter<T>,
    x: &Tensor<T>,
    levels: usize,
    class_index: usize,
) -> Result<T> {
    Ok(coefficient_attributions(net, filter, x, levels, class_index)?.data().iter().map(|v| v.abs()).sum())
}

/// Per-coefficient attributions for signals `[m, L]` (or `[L]`), same shape as the input.
pub fn coefficient_attributions<T: Scalar>(
    net: &Network<T>,
    filter: &WaveletFilter<T>,
    x: &Tensor<T>,
    levels: usize,
    class_index: usize,
) -> Result<Tensor<T>> {
    if class_index >= net.num_classes() {
        return Err(Error::invalid(format!("class {class_index} out of range")));
    }
    let single = x.ndim() == 1;
    let xb = if single { x.reshape(&[1, x.numel()])? } else { x.clone() };
    let params = net.bind(&Eager, false);
    let out = coefficient_attributions_with(&Eager, net, &params, &filter.tensor(), &xb, levels, class_index)?;
    out.reshape(x.shape())
}

#[derive(Clone, Debug)]
pub struct DistillResult<T> {
    pub filter: WaveletFilter<T>,
    pub history: Vec<LossRecord>,
}

fn record<T: Scalar>(iteration: usize, l: &AwdLoss<Tensor<T>>) -> Result<LossRecord> {
    Ok(LossRecord {
        iteration,
        reconstruction: l.reconstruction.item()?.as_f64(),
        sparsity: l.sparsity.item()?.as_f64(),
        constraints: l.constraints.item()?.as_f64(),
        interpretation: l.interpretation.item()?.as_f64(),
        total: l.total.item()?.as_f64(),
    })
}

/// Loss components of `filter` on the whole dataset `[m, L]`.
pub fn evaluate_loss<T: Scalar>(
    net: &Network<T>,
    filter: &WaveletFilter<T>,
    data: &Tensor<T>,
    config: &AwdConfig,
) -> Result<LossRecord> {
    let params = net.bind(&Eager, false);
    let l = awd_loss(&Eager, net, &params, &filter.tensor(), data, config)?;
    record(0, &l)
}

/// Learn `h` by gradient descent on the AWD objective, starting from `init`. The history
/// holds the loss before each update and a final entry for the result.
pub fn distill<T: Scalar>(
    net: &Network<T>,
    data: &Tensor<T>,
    init: &WaveletFilter<T>,
    config: &AwdConfig,
) -> Result<DistillResult<T>> {
    config.validate()?;
    let [m, len] = data.shape()[..] else {
        return Err(Error::shape("awd", format!("dataset must be [m, L], got {:?}", data.shape())));
    };
    check_levels(len, config.levels)?;
    if m == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = if config.batch_size == 0 { m } else { config.batch_size.min(m) };
    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut h = vec![init.tensor()];
    let mut adam = Adam::new(config.learning_rate);
    let mut sgd = Sgd { learning_rate: config.learning_rate };
    let mut history = Vec::with_capacity(config.iterations + 1);
    for it in 0..config.iterations {
        let rows: Vec<usize> = if batch == m {
            order.clone()
        } else {
            if cursor + batch > m {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            order[cursor - batch..cursor].to_vec()
        };
        let xb = gather_rows(data, &rows)?;
        let tape = Tape::new();
        let hv = tape.param(h[0].clone());
        let xv = tape.constant(xb);
        let params = net.bind(&tape, false);
        let loss = awd_loss(&tape, net, &params, &hv, &xv, config)?;
        let values = AwdLoss {
            reconstruction: tape.value(&loss.reconstruction),
            sparsity: tape.value(&loss.sparsity),
            constraints: tape.value(&loss.constraints),
            interpretation: tape.value(&loss.interpretation),
            total: tape.value(&loss.total),
        };
        let rec = record(it, &values)?;
        if !rec.total.is_finite() {
            return Err(Error::Divergence { stage: "awd-distill", index: it });
        }
        history.push(rec);
        let grads = tape.backward(loss.total)?;
        let g = grads.get(hv).expect("filter is a parameter").clone();
        if !g.all_finite() {
            return Err(Error::Divergence { stage: "awd-distill", index: it });
        }
        match config.optimizer {
            OptimizerKind::Sgd => sgd.step(&mut h, &[g])?,
            OptimizerKind::Adam => adam.step(&mut h, &[g])?,
        }
    }
    let mut h = h.pop().unwrap();
    if config.constraint_tolerance > 0.0 {
        h = polish_constraints(h, config.frequency_grid, config.constraint_tolerance, config.polish_iterations)?;
    }
    let filter = WaveletFilter::new(h.into_vec())?;
    let mut last = evaluate_loss(net, &filter, data, config)?;
    last.iteration = config.iterations;
    if !last.total.is_finite() {
        return Err(Error::Divergence { stage: "awd-distill", index: config.iterations });
    }
    history.push(last);
    Ok(DistillResult { filter, history })
}

fn constraint_value_and_grad<T: Scalar>(h: &Tensor<T>, grid: usize) -> Result<(f64, Tensor<T>)> {
    let tape = Tape::new();
    let hv = tape.param(h.clone());
    let total = constraint_terms(&tape, &hv, grid)?.total;
    let value = tape.value(&total).item()?.as_f64();
    let grads = tape.backward(total)?;
    Ok((value, grads.get(hv).expect("filter is a parameter").clone()))
}

/// Gradient descent with backtracking on the constraint terms alone, stopping
/// once they are at most `tolerance`.
pub fn polish_constraints<T: Scalar>(mut h: Tensor<T>, grid: usize, tolerance: f64, max_iterations: usize) -> Result<Tensor<T>> {
    let (mut value, mut grad) = constraint_value_and_grad(&h, grid)?;
    let mut step = 1e-2;
    for _ in 0..max_iterations {
        if value <= tolerance {
            break;
        }
        let g2: f64 = grad.data().iter().map(|g| g.as_f64().powi(2)).sum();
        if g2 == 0.0 || !value.is_finite() {
            break;
        }
        loop {
            let lr = T::lit(step);
            let trial = h.zip_map(&grad, |a, g| a - lr * g)?;
            let (v, g) = constraint_value_and_grad(&trial, grid)?;
            if v <= value - 0.5 * step * g2 {
                h = trial;
                value = v;
                grad = g;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Ok(h);
            }
        }
    }
    Ok(h)
}

pub(crate) fn gather_rows<T: Scalar>(data: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = rows.iter().map(|&r| data.row(r)).collect::<Result<_>>()?;
    Tensor::stack(&items)
}

/// The `per_scale` largest magnitudes of every scale, each sorted descending.
pub fn max_coefficients_features<T: Scalar>(coeffs: &[T], levels: usize, per_scale: usize) -> Result<Vec<T>> {
    check_levels(coeffs.len(), levels)?;
    if per_scale == 0 {
        return Err(Error::invalid("per_scale must be at least 1"));
    }
    let mut out = Vec::new();
    for r in scale_ranges(coeffs.len(), levels) {
        if per_scale > r.len() {
            return Err(Error::invalid(format!("per_scale {per_scale} exceeds scale length {}", r.len())));
        }
        let mut mags: Vec<T> = coeffs[r].iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        out.extend_from_slice(&mags[..per_scale]);
    }
    Ok(out)
}

/// Fraction of coefficients whose magnitude and attribution both exceed `threshold`.
pub fn compression_factor<T: Scalar>(coeffs: &[T], attributions: &[T], threshold: f64) -> Result<f64> {
    if coeffs.len() != attributions.len() {
        return Err(Error::shape("compression", format!("{} coefficients vs {} attributions", coeffs.len(), attributions.len())));
    }
    if coeffs.is_empty() {
        return Ok(0.0);
    }
    let t = T::lit(threshold);
    let kept = coeffs.iter().zip(attributions).filter(|(c, a)| c.abs() > t && a.abs() > t).count();
    Ok(kept as f64 / coeffs.len() as f64)
}

pub const DEFAULT_COMPRESSION_THRESHOLD: f64 = 1e-3;

/// Ridge regression with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], alpha: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != targets.len() {
            return Err(Error::invalid("ridge needs matching, nonempty features and targets"));
        }
        let d = features[0].len();
        let mean_x: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let mean_y = targets.iter().sum::<f64>() / n as f64;
        let mut gram = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for (f, y) in features.iter().zip(targets) {
            for i in 0..d {
                let xi = f[i] - mean_x[i];
                rhs[i] += xi * (y - mean_y);
                for j in 0..d {
                    gram[i * d + j] += xi * (f[j] - mean_x[j]);
                }
            }
        }
        for i in 0..d {
            gram[i * d + i] += alpha;
        }
        let inv = invert_square(&Tensor::new(vec![d, d], gram)?)?;
        let weights: Vec<f64> = (0..d).map(|i| (0..d).map(|j| inv.data()[i * d + j] * rhs[j]).sum()).collect();
        let intercept = mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
        Ok(Self { weights, intercept })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
    }
}

/// Coefficient of determination.
pub fn r2_score(predicted: &[f64], actual: &[f64]) -> f64 {
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_res: f64 = predicted.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum();
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Learned filter as JSON with a config echo.
pub fn filter_json<T: Scalar>(filter: &WaveletFilter<T>, config: &AwdConfig) -> Value {
    json!({
        "h": filter.h.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
        "N": filter.len(),
        "config": config,
    })
}

pub fn filter_from_json(v: &Value) -> Result<WaveletFilter<f64>> {
    let h = v
        .get("h")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid("filter JSON needs an `h` array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::invalid("filter entries must be numbers")))
        .collect::<Result<Vec<_>>>()?;
    WaveletFilter::new(h)
}

/// Loss history as CSV, one column per component.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,reconstruction,sparsity,constraints,interpretation,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.iteration, r.reconstruction, r.sparsity, r.constraints, r.interpretation, r.total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_examples() {
        assert_eq!(compression_factor(&[0.0; 4], &[0.0; 4], 1e-3).unwrap(), 0.0);
        assert_eq!(compression_factor(&[1.0; 4], &[1.0; 4], 1e-3).unwrap(), 1.0);
        assert_eq!(compression_factor(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], 1e-3).unwrap(), 0.5);
        assert!(compression_factor(&[1.0], &[1.0, 2.0], 1e-3).is_err());
    }

    #[test]
    fn max_features() {
        let f = max_coefficients_features(&[3.0, -5.0], 1, 1).unwrap();
        assert_eq!(f, vec![3.0, 5.0]);
        assert!(max_coefficients_features(&[0.0; 8], 2, 3).is_err());
        assert_eq!(max_coefficients_features(&[0.0f64; 8], 2, 2).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn ridge_recovers_a_line() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - x[1] + 1.0).collect();
        let model = Ridge::fit(&xs, &ys, 1e-9).unwrap();
        let pred: Vec<f64> = xs.iter().map(|x| model.predict(x)).collect();
        assert!(r2_score(&pred, &ys) > 1.0 - 1e-9);
    }
}
