//! Color-bias harness: class identity leaks through color in training and
//! the colors are swapped at test time.

use decomp_core::cdep::{accuracy, train, Targets, TrainConfig};
use decomp_core::{ArchitectureDescriptor, LayerDescriptor, Network};
use serde::{Deserialize, Serialize};

use crate::data::make_color_bias_dataset;
use crate::error::{BenchError, Result};
use crate::frequency::mean_and_se;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorBiasConfig {
    pub n_per_class: usize,
    pub size: usize,
    pub n_classes: usize,
    pub seeds: Vec<u64>,
    pub layers: Vec<LayerDescriptor>,
    pub vanilla: TrainConfig,
    /// Settings of the penalized run; its seed is replaced per run.
    pub cdep: TrainConfig,
}

impl Default for ColorBiasConfig {
    fn default() -> Self {
        let base = TrainConfig { lambda: 0.0, learning_rate: 0.002, epochs: 20, batch_size: 16, seed: 0, pixel_samples: 30 };
        Self {
            n_per_class: 40,
            size: 16,
            n_classes: 10,
            seeds: (0..5).collect(),
            layers: vec![
                LayerDescriptor::Conv2d { out_channels: 8, kernel: 3, stride: 1 },
                LayerDescriptor::Tanh,
                LayerDescriptor::Maxpool2d { window: 2, stride: 2 },
                LayerDescriptor::Conv2d { out_channels: 16, kernel: 3, stride: 1 },
                LayerDescriptor::Tanh,
                LayerDescriptor::Maxpool2d { window: 2, stride: 2 },
                LayerDescriptor::Flatten,
                LayerDescriptor::Linear { out: 10 },
            ],
            vanilla: base.clone(),
            cdep: TrainConfig { lambda: 5.0, ..base },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorBiasRun {
    pub seed: u64,
    pub vanilla_train_accuracy: f64,
    pub vanilla_test_accuracy: f64,
    pub cdep_train_accuracy: f64,
    pub cdep_test_accuracy: f64,
    /// Penalized trainer with λ = 0 matched vanilla bit for bit.
    pub zero_lambda_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorBiasReport {
    pub config: ColorBiasConfig,
    pub runs: Vec<ColorBiasRun>,
    pub vanilla_mean: f64,
    pub vanilla_se: f64,
    pub cdep_mean: f64,
    pub cdep_se: f64,
}

pub fn color_net(config: &ColorBiasConfig, seed: u64) -> Result<Network> {
    let arch = ArchitectureDescriptor {
        input_shape: vec![3, config.size, config.size],
        num_classes: config.n_classes,
        layers: config.layers.clone(),
    };
    Ok(arch.init_random(seed)?)
}

fn weight_bits(net: &Network) -> Vec<u64> {
    net.parameters().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

pub fn run_color_seed(config: &ColorBiasConfig, seed: u64) -> Result<ColorBiasRun> {
    let data = make_color_bias_dataset(config.n_per_class, config.size, config.n_classes, seed)?;
    let net = color_net(config, seed)?;
    let vanilla_cfg = TrainConfig { lambda: 0.0, seed, ..config.vanilla.clone() };
    let vanilla = train(&net, &data.train, &Targets::None, &vanilla_cfg)?;
    let zero = train(&net, &data.train, &Targets::SampledPixels, &vanilla_cfg)?;
    let cdep_cfg = TrainConfig { seed, ..config.cdep.clone() };
    let cdep = train(&net, &data.train, &Targets::SampledPixels, &cdep_cfg)?;
    Ok(ColorBiasRun {
        seed,
        vanilla_train_accuracy: accuracy(&vanilla.net, &data.train)?,
        vanilla_test_accuracy: accuracy(&vanilla.net, &data.test)?,
        cdep_train_accuracy: accuracy(&cdep.net, &data.train)?,
        cdep_test_accuracy: accuracy(&cdep.net, &data.test)?,
        zero_lambda_identical: weight_bits(&zero.net) == weight_bits(&vanilla.net),
    })
}

pub fn run_color_bias(config: &ColorBiasConfig) -> Result<ColorBiasReport> {
    if config.seeds.is_empty() {
        return Err(BenchError::invalid("at least one seed is required"));
    }
    let runs: Vec<ColorBiasRun> = config.seeds.iter().map(|&s| run_color_seed(config, s)).collect::<Result<_>>()?;
    let (vanilla_mean, vanilla_se) = mean_and_se(&runs.iter().map(|r| r.vanilla_test_accuracy).collect::<Vec<_>>());
    let (cdep_mean, cdep_se) = mean_and_se(&runs.iter().map(|r| r.cdep_test_accuracy).collect::<Vec<_>>());
    Ok(ColorBiasReport { config: config.clone(), runs, vanilla_mean, vanilla_se, cdep_mean, cdep_se })
}
