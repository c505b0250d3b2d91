//! Motif-trace distillation: fit a small regressor to amplitudes, distill a
//! wavelet from it and compare against the initial filter.

use decomp_core::awd::{
    coefficient_attributions, compression_factor, distill, max_coefficients_features, r2_score, AwdConfig, LossRecord, OptimizerKind,
    Ridge, DEFAULT_COMPRESSION_THRESHOLD,
};
use decomp_core::optim::Adam;
use decomp_core::tape::Tape;
use decomp_core::wavelet::{dwt_forward, WaveletFilter};
use decomp_core::{ArchitectureDescriptor, Backend, Eager, LayerDescriptor, Mode, Network, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_motif_traces, MotifSpec, MotifTraces};
use crate::error::{BenchError, Result};
use crate::frequency::mean_and_se;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { hidden: 32, learning_rate: 0.003, epochs: 60, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub motif: MotifSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub regressor: RegressorConfig,
    pub awd: AwdConfig,
    /// Largest coefficients kept per scale for the linear model.
    pub per_scale: usize,
    pub ridge_alpha: f64,
    pub compression_threshold: f64,
    pub seeds: Vec<u64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            motif: MotifSpec::default(),
            n_train: 300,
            n_test: 200,
            regressor: RegressorConfig::default(),
            awd: AwdConfig {
                interp_weight: 0.02,
                learning_rate: 5e-3,
                optimizer: OptimizerKind::Adam,
                iterations: 300,
                batch_size: 32,
                ..AwdConfig::default()
            },
            per_scale: 6,
            ridge_alpha: 1e-3,
            compression_threshold: DEFAULT_COMPRESSION_THRESHOLD,
            seeds: (0..5).collect(),
        }
    }
}

/// Held-out metrics of one filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    pub compression_factor: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRun {
    pub seed: u64,
    pub regressor_r2: f64,
    pub initial: FilterMetrics,
    pub learned: FilterMetrics,
    pub filter: Vec<f64>,
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub config: DistillConfig,
    pub runs: Vec<DistillRun>,
    pub initial_compression: (f64, f64),
    pub learned_compression: (f64, f64),
    pub initial_r2: (f64, f64),
    pub learned_r2: (f64, f64),
}

pub fn regressor_net(length: usize, hidden: usize, seed: u64) -> Result<Network> {
    let arch = ArchitectureDescriptor {
        input_shape: vec![length],
        num_classes: 1,
        layers: vec![LayerDescriptor::Linear { out: hidden }, LayerDescriptor::Relu, LayerDescriptor::Linear { out: 1 }],
    };
    Ok(arch.init_random(seed)?)
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&r| x.row(r)).collect::<decomp_core::Result<_>>()?;
    Ok(Tensor::stack(&items)?)
}

/// Mean-squared-error fit of a single-output network with Adam.
pub fn fit_regressor(net: &Network, x: &Tensor, y: &[f64], config: &RegressorConfig, seed: u64) -> Result<Network> {
    if x.shape()[0] != y.len() || y.is_empty() || config.batch_size == 0 {
        return Err(BenchError::invalid("regressor needs matching, nonempty inputs and targets"));
    }
    let mut net = net.clone();
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..y.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let xb = tape.constant(rows(x, chunk)?);
            let target = tape.constant(Tensor::new(vec![chunk.len(), 1], chunk.iter().map(|&i| y[i]).collect())?);
            let out = net.forward_batch(&tape, &bound, &xb, Mode::Train, 0)?.pop().expect("network has layers");
            let err = tape.sub(&out, &target)?;
            let loss = tape.scale(&tape.l2_norm_sq(&err)?, 1.0 / chunk.len() as f64)?;
            if !tape.value(&loss).item()?.is_finite() {
                return Err(decomp_core::Error::Divergence { stage: "regressor epoch", index: epoch }.into());
            }
            let grads = tape.backward(loss)?;
            let vars = Network::bound_parameters(&bound);
            let gs: Vec<Tensor> =
                vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(v)))).collect();
            let mut values: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
            adam.step(&mut values, &gs)?;
            net.set_parameters(values)?;
        }
    }
    Ok(net)
}

pub fn predict_regressor(net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    let params = net.bind(&Eager, false);
    let out = net.forward_batch(&Eager, &params, x, Mode::Eval, 0)?.pop().expect("network has layers");
    Ok(out.into_vec())
}

fn features(filter: &WaveletFilter<f64>, x: &Tensor, levels: usize, per_scale: usize) -> Result<Vec<Vec<f64>>> {
    let coeffs = dwt_forward(filter, x, levels)?;
    let len = x.shape()[1];
    coeffs.data().chunks(len).map(|c| Ok(max_coefficients_features(c, levels, per_scale)?)).collect()
}

/// Compression factor on the test signals and R² of a ridge fit from train to test.
pub fn filter_metrics(
    net: &Network,
    filter: &WaveletFilter<f64>,
    train: &MotifTraces,
    test: &MotifTraces,
    config: &DistillConfig,
) -> Result<FilterMetrics> {
    let levels = config.awd.levels;
    let coeffs = dwt_forward(filter, &test.signals, levels)?;
    let attr = coefficient_attributions(net, filter, &test.signals, levels, 0)?;
    let compression = compression_factor(coeffs.data(), attr.data(), config.compression_threshold)?;
    let ridge = Ridge::fit(&features(filter, &train.signals, levels, config.per_scale)?, &train.amplitudes, config.ridge_alpha)?;
    let predicted: Vec<f64> =
        features(filter, &test.signals, levels, config.per_scale)?.iter().map(|f| ridge.predict(f)).collect();
    Ok(FilterMetrics { compression_factor: compression, r2: r2_score(&predicted, &test.amplitudes) })
}

pub fn run_distill_seed(config: &DistillConfig, seed: u64) -> Result<DistillRun> {
    let train = make_motif_traces(config.n_train, &config.motif, seed)?;
    let test = make_motif_traces(config.n_test, &config.motif, seed ^ 0x7e57)?;
    let net = regressor_net(config.motif.length, config.regressor.hidden, seed)?;
    let net = fit_regressor(&net, &train.signals, &train.amplitudes, &config.regressor, seed)?;
    let regressor_r2 = r2_score(&predict_regressor(&net, &test.signals)?, &test.amplitudes);
    let init = WaveletFilter::by_name(&config.awd.init)?;
    let awd = AwdConfig { seed, class_index: 0, ..config.awd.clone() };
    let result = distill(&net, &train.signals, &init, &awd)?;
    Ok(DistillRun {
        seed,
        regressor_r2,
        initial: filter_metrics(&net, &init, &train, &test, config)?,
        learned: filter_metrics(&net, &result.filter, &train, &test, config)?,
        filter: result.filter.h.clone(),
        history: result.history,
    })
}

pub fn run_distill(config: &DistillConfig) -> Result<DistillReport> {
    if config.seeds.is_empty() {
        return Err(BenchError::invalid("at least one seed is required"));
    }
    let runs: Vec<DistillRun> = config.seeds.iter().map(|&s| run_distill_seed(config, s)).collect::<Result<_>>()?;
    let stat = |f: &dyn Fn(&DistillRun) -> f64| mean_and_se(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(DistillReport {
        config: config.clone(),
        initial_compression: stat(&|r| r.initial.compression_factor),
        learned_compression: stat(&|r| r.learned.compression_factor),
        initial_r2: stat(&|r| r.initial.r2),
        learned_r2: stat(&|r| r.learned.r2),
        runs,
    })
}
