//! Frequency-recovery harness: train a ReLU net on a planted-frequency task
//! and check that transformed-space attributions single out that frequency.

use decomp_core::cdep::{accuracy, train, Targets, TrainConfig};
use decomp_core::trim::{band_mask, AttributionMethod, Transform};
use decomp_core::{ArchitectureDescriptor, Network, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{simulate_frequency_task, FrequencyTask};
use crate::error::{BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyConfig {
    pub n_datasets: usize,
    pub n_samples: usize,
    pub signal_length: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Samples whose attributions are averaged per dataset.
    pub eval_samples: usize,
    pub ig_steps: usize,
    pub methods: Vec<AttributionMethod>,
    pub seed: u64,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            n_datasets: 50,
            n_samples: 1000,
            signal_length: 32,
            hidden: 64,
            epochs: 30,
            learning_rate: 0.002,
            batch_size: 32,
            eval_samples: 50,
            ig_steps: 64,
            methods: vec![AttributionMethod::Cd, AttributionMethod::IntegratedGradients],
            seed: 0,
        }
    }
}

/// Outcome for one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOutcome {
    pub index: usize,
    pub seed: u64,
    pub planted: usize,
    pub train_accuracy: f64,
    /// Skipped because training diverged.
    pub diverged: bool,
    /// Per method: recovered frequency and per-frequency scores.
    pub recovered: Vec<(AttributionMethod, usize)>,
    pub scores: Vec<(AttributionMethod, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodError {
    pub method: AttributionMethod,
    /// Percent of datasets where the top frequency is wrong.
    pub error_percent: f64,
    pub standard_error: f64,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub config: FrequencyConfig,
    pub errors: Vec<MethodError>,
    pub diverged: usize,
    pub datasets: Vec<DatasetOutcome>,
}

pub fn frequency_net(signal_length: usize, hidden: usize, seed: u64) -> Result<Network> {
    let json = serde_json::json!({
        "input_shape": [signal_length],
        "num_classes": 2,
        "layers": [
            {"kind": "linear", "out": hidden}, {"kind": "relu"},
            {"kind": "linear", "out": hidden}, {"kind": "relu"},
            {"kind": "linear", "out": 2}
        ]
    });
    Ok(ArchitectureDescriptor::from_json(&json.to_string())?.init_random(seed)?)
}

/// One band per frequency `0..n/2`; the last band also holds the Nyquist bin.
pub fn frequency_masks(n: usize) -> Result<Vec<Tensor>> {
    (0..n / 2).map(|k| Ok(band_mask(n, k, k + 1)?)).collect()
}

/// Mean absolute attribution of each frequency band to the class-1 minus
/// class-0 logit over `samples`.
pub fn frequency_scores(net: &Network, samples: &[Tensor], method: AttributionMethod, ig_steps: usize) -> Result<Vec<f64>> {
    let n = net.input_shape()[0];
    let masks = frequency_masks(n)?;
    let mut acc = vec![0.0; masks.len()];
    for x in samples {
        let per_band: Vec<f64> = match method {
            AttributionMethod::Cd => {
                let pair = net.trim_cd(&Transform::Dft, x, &masks)?;
                (0..masks.len()).map(|k| pair.beta.data()[2 * k + 1] - pair.beta.data()[2 * k]).collect()
            }
            AttributionMethod::IntegratedGradients => {
                let up = net.integrated_gradients(&Transform::Dft, x, None, 1, ig_steps)?;
                let down = net.integrated_gradients(&Transform::Dft, x, None, 0, ig_steps)?;
                masks
                    .iter()
                    .map(|m| {
                        m.data().iter().zip(up.data().iter().zip(down.data())).map(|(w, (a, b))| w * (a - b)).sum()
                    })
                    .collect()
            }
        };
        for (a, v) in acc.iter_mut().zip(per_band) {
            *a += v.abs();
        }
    }
    let m = samples.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / m).collect())
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

pub fn run_dataset(config: &FrequencyConfig, index: usize) -> Result<DatasetOutcome> {
    let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let FrequencyTask { data, frequency } = simulate_frequency_task(config.n_samples, config.signal_length, seed)?;
    let net = frequency_net(config.signal_length, config.hidden, seed)?;
    let tc = TrainConfig {
        lambda: 0.0,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed,
        pixel_samples: 0,
    };
    let trained = match train(&net, &data, &Targets::None, &tc) {
        Ok(t) => t.net,
        Err(decomp_core::Error::Divergence { .. }) => {
            return Ok(DatasetOutcome {
                index,
                seed,
                planted: frequency,
                train_accuracy: f64::NAN,
                diverged: true,
                recovered: Vec::new(),
                scores: Vec::new(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let samples: Vec<Tensor> =
        (0..config.eval_samples.min(data.len())).map(|i| data.sample(i)).collect::<decomp_core::Result<_>>()?;
    let mut recovered = Vec::new();
    let mut scores = Vec::new();
    for &method in &config.methods {
        let s = frequency_scores(&trained, &samples, method, config.ig_steps)?;
        recovered.push((method, argmax(&s)));
        scores.push((method, s));
    }
    Ok(DatasetOutcome {
        index,
        seed,
        planted: frequency,
        train_accuracy: accuracy(&trained, &data)?,
        diverged: false,
        recovered,
        scores,
    })
}

pub fn run_frequency_recovery(config: &FrequencyConfig) -> Result<FrequencyReport> {
    if config.methods.is_empty() {
        return Err(BenchError::invalid("at least one attribution method is required"));
    }
    if config.n_datasets == 0 || config.eval_samples == 0 {
        return Err(BenchError::invalid("n_datasets and eval_samples must be at least 1"));
    }
    let datasets: Vec<DatasetOutcome> = (0..config.n_datasets).map(|i| run_dataset(config, i)).collect::<Result<_>>()?;
    let diverged = datasets.iter().filter(|d| d.diverged).count();
    let errors = config
        .methods
        .iter()
        .map(|&method| {
            let misses: Vec<f64> = datasets
                .iter()
                .filter(|d| !d.diverged)
                .map(|d| {
                    let got = d.recovered.iter().find(|(m, _)| *m == method).map(|(_, f)| *f);
                    if got == Some(d.planted) { 0.0 } else { 1.0 }
                })
                .collect();
            let (mean, se) = mean_and_se(&misses);
            MethodError { method, error_percent: 100.0 * mean, standard_error: 100.0 * se, evaluated: misses.len() }
        })
        .collect();
    Ok(FrequencyReport { config: config.clone(), errors, diverged, datasets })
}

/// Mean and standard error of the mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
