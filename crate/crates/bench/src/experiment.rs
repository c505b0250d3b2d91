//! Experiment configurations and the runners that turn them into reports.

use std::fs;
use std::path::{Path, PathBuf};

use decomp_core::acd::build_hierarchy;
use decomp_core::awd::{distill, filter_json, history_csv as awd_history_csv, AwdConfig};
use decomp_core::cdep::{accuracy, history_csv, train, Dataset, ExplanationTarget, Targets, TrainConfig};
use decomp_core::network::argmax;
use decomp_core::trim::{index_mask, AttributionMethod, Transform};
use decomp_core::wavelet::{scale_ranges, WaveletFilter};
use decomp_core::{AcdConfig, Adjacency, ArchitectureDescriptor, FeatureGroup, Layer, Network, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::color::{run_color_bias, ColorBiasConfig};
use crate::data::{make_color_bias_dataset, simulate_frequency_task};
use crate::distill::{run_distill, DistillConfig};
use crate::error::{BenchError, Result};
use crate::frequency::{frequency_masks, frequency_net, run_frequency_recovery, FrequencyConfig};
use crate::negation::{run_negation_with_model, NegationConfig};
use crate::report::{hierarchy_svg, line_plot, Cell, Report};

pub const KINDS: [&str; 8] =
    ["frequency-sim", "color-bias", "negation-sentiment", "awd-distill", "attribute", "acd", "trim", "train-cdep"];

/// Top-level configuration file: a kind, a seed, an output directory and the
/// parameters of that kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "empty_object")]
    pub params: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl ExperimentConfig {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), seed: 0, output_dir: None, params: empty_object() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !KINDS.contains(&self.kind.as_str()) {
            return Err(BenchError::UnknownKind(self.kind.clone()));
        }
        if !self.params.is_object() {
            return Err(BenchError::invalid("params must be a JSON object"));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&self.kind))
    }

    /// Set `params.<dotted path>` to `value`, creating objects on the way.
    pub fn set_param(&mut self, path: &str, value: Value) -> Result<()> {
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(BenchError::invalid(format!("bad parameter path `{path}`")));
        }
        let mut cur = &mut self.params;
        for key in &keys[..keys.len() - 1] {
            let obj = cur.as_object_mut().ok_or_else(|| BenchError::invalid(format!("`{path}` crosses a non-object")))?;
            cur = obj.entry(key.to_string()).or_insert_with(empty_object);
        }
        let obj = cur.as_object_mut().ok_or_else(|| BenchError::invalid(format!("`{path}` crosses a non-object")))?;
        obj.insert(keys[keys.len() - 1].to_string(), value);
        Ok(())
    }

    /// Parameters merged over the kind's defaults, so partial nested objects
    /// keep the defaults of their siblings.
    fn params<P: Default + Serialize + DeserializeOwned>(&self) -> Result<P> {
        let mut merged = serde_json::to_value(P::default())?;
        merge(&mut merged, &self.params);
        let parsed: P = serde_json::from_value(merged)
            .map_err(|e| BenchError::invalid(format!("{} params: {e}", self.kind)))?;
        check_known_fields(&self.params, &serde_json::to_value(&parsed)?, "params")?;
        Ok(parsed)
    }

    fn seeds_given(&self) -> bool {
        self.params.get("seeds").is_some()
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Reject keys of `given` that do not survive a round trip through the typed config.
fn check_known_fields(given: &Value, parsed: &Value, path: &str) -> Result<()> {
    match (given, parsed) {
        (Value::Object(g), Value::Object(p)) => {
            for (k, v) in g {
                let sub = format!("{path}.{k}");
                match p.get(k) {
                    Some(pv) => check_known_fields(v, pv, &sub)?,
                    None => return Err(BenchError::invalid(format!("unknown field `{sub}`"))),
                }
            }
            Ok(())
        }
        (Value::Array(g), Value::Array(p)) if g.len() == p.len() => {
            g.iter().zip(p).enumerate().try_for_each(|(i, (a, b))| check_known_fields(a, b, &format!("{path}[{i}]")))
        }
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| BenchError::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn flatten_numbers(v: &Value, out: &mut Vec<f64>) -> Result<()> {
    match v {
        Value::Number(n) => out.push(n.as_f64().ok_or_else(|| BenchError::invalid("number out of range"))?),
        Value::Array(items) => items.iter().try_for_each(|x| flatten_numbers(x, out))?,
        _ => return Err(BenchError::invalid("expected numbers or nested arrays of numbers")),
    }
    Ok(())
}

fn tensor_from(v: &Value, shape: &[usize]) -> Result<Tensor> {
    let v = v.get("data").unwrap_or(v);
    let mut data = Vec::new();
    flatten_numbers(v, &mut data)?;
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(BenchError::invalid(format!("expected {n} values for shape {shape:?}, found {}", data.len())));
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn load_model(path: &Path) -> Result<Network> {
    Ok(Network::load_model(&read_text(path)?)?)
}

/// One input shaped like the network input; nested arrays or a flat list.
pub fn load_input(path: &Path, shape: &[usize]) -> Result<Tensor> {
    tensor_from(&read_json(path)?, shape)
}

/// `{"inputs": [sample, ...], "labels": [...]}` with samples shaped like `sample_shape`.
pub fn load_dataset(path: &Path, sample_shape: &[usize]) -> Result<Dataset<f64>> {
    let root = read_json(path)?;
    let inputs = root.get("inputs").and_then(Value::as_array).ok_or_else(|| BenchError::invalid("dataset needs `inputs`"))?;
    let labels: Vec<usize> = root
        .get("labels")
        .and_then(Value::as_array)
        .ok_or_else(|| BenchError::invalid("dataset needs `labels`"))?
        .iter()
        .map(|l| l.as_u64().map(|v| v as usize).ok_or_else(|| BenchError::invalid("labels must be non-negative integers")))
        .collect::<Result<_>>()?;
    let items: Vec<Tensor> = inputs.iter().map(|x| tensor_from(x, sample_shape)).collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(BenchError::invalid("dataset is empty"));
    }
    Ok(Dataset::new(Tensor::stack(&items)?, labels)?)
}

/// Signals `[[...], ...]` of equal length as an `[m, L]` tensor.
pub fn load_signals(path: &Path) -> Result<Tensor> {
    let root = read_json(path)?;
    let root = root.get("signals").unwrap_or(&root);
    let rows = root.as_array().ok_or_else(|| BenchError::invalid("signals must be an array of arrays"))?;
    let len = rows.first().and_then(Value::as_array).map(Vec::len).unwrap_or(0);
    if rows.is_empty() || len == 0 {
        return Err(BenchError::invalid("signals are empty"));
    }
    let items: Vec<Tensor> = rows.iter().map(|r| tensor_from(r, &[len])).collect::<Result<_>>()?;
    Ok(Tensor::stack(&items)?)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| BenchError::invalid(format!("`{what}` is required")))
}

fn class_or_predicted(net: &Network, x: &Tensor, class_index: Option<usize>) -> Result<usize> {
    let class = match class_index {
        Some(c) => c,
        None => net.predict(x)?,
    };
    if class >= net.num_classes() {
        return Err(BenchError::invalid(format!("class {class} out of range")));
    }
    Ok(class)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeJob {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    /// Flat input coordinates in the group.
    pub group: Vec<usize>,
    /// Defaults to the predicted class.
    pub class_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyKind {
    #[default]
    Auto,
    Chain,
    Sequence,
    Image,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcdJob {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub class_index: Option<usize>,
    pub k_percent: f64,
    pub max_levels: Option<usize>,
    pub adjacency: AdjacencyKind,
    /// Unit names for the plot; unit indices when empty.
    pub labels: Vec<String>,
}

impl Default for AcdJob {
    fn default() -> Self {
        Self {
            model: None,
            input: None,
            class_index: None,
            k_percent: AcdConfig::default().k_percent,
            max_levels: None,
            adjacency: AdjacencyKind::Auto,
            labels: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    #[default]
    Dft,
    Dwt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimJob {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub transform: TransformKind,
    pub wavelet: String,
    pub levels: usize,
    pub method: AttributionMethod,
    pub ig_steps: usize,
    pub class_index: Option<usize>,
}

impl Default for TrimJob {
    fn default() -> Self {
        Self {
            model: None,
            input: None,
            transform: TransformKind::Dft,
            wavelet: "db5".into(),
            levels: 3,
            method: AttributionMethod::Cd,
            ig_steps: 64,
            class_index: None,
        }
    }
}

/// Explanation target over flat input coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub sample: usize,
    pub indices: Vec<usize>,
    #[serde(default)]
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    #[default]
    None,
    SampledPixels,
    Fixed(Vec<TargetSpec>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinTask {
    #[default]
    ColorBias,
    Frequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCdepJob {
    /// Dataset file; the built-in task is generated when absent.
    pub dataset: Option<PathBuf>,
    pub task: BuiltinTask,
    /// Samples per class (color task) or in total (frequency task).
    pub task_size: usize,
    /// Starting model file; otherwise `arch` (or the task default) is initialized from the seed.
    pub model: Option<PathBuf>,
    pub arch: Option<ArchitectureDescriptor>,
    pub targets: TargetKind,
    pub train: TrainConfig,
}

impl Default for TrainCdepJob {
    fn default() -> Self {
        let color = ColorBiasConfig::default();
        Self {
            dataset: None,
            task: BuiltinTask::ColorBias,
            task_size: 10,
            model: None,
            arch: None,
            targets: TargetKind::SampledPixels,
            train: TrainConfig { epochs: 3, ..color.cdep },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwdJob {
    /// With `model` and `signals`, distill once on them; otherwise run the motif harness.
    pub model: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    #[serde(flatten)]
    pub harness: DistillConfig,
}

/// Run the experiment described by `config` and build its report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let seed = config.seed;
    match config.kind.as_str() {
        "frequency-sim" => {
            let mut c: FrequencyConfig = config.params()?;
            c.seed = seed;
            frequency_report(&c)
        }
        "color-bias" => {
            let mut c: ColorBiasConfig = config.params()?;
            if !config.seeds_given() {
                c.seeds = c.seeds.iter().map(|s| s + seed).collect();
            }
            color_report(&c, seed)
        }
        "negation-sentiment" => {
            let mut c: NegationConfig = config.params()?;
            c.seed = seed;
            negation_report(&c)
        }
        "awd-distill" => {
            let mut job: AwdJob = config.params()?;
            if !config.seeds_given() {
                job.harness.seeds = job.harness.seeds.iter().map(|s| s + seed).collect();
            }
            awd_report(&job, seed)
        }
        "attribute" => attribute_report(&config.params()?, seed),
        "acd" => acd_report(&config.params()?, seed),
        "trim" => trim_report(&config.params()?, seed),
        "train-cdep" => {
            let mut job: TrainCdepJob = config.params()?;
            job.train.seed = seed;
            train_cdep_report(&job, seed)
        }
        other => Err(BenchError::UnknownKind(other.into())),
    }
}

pub fn frequency_report(c: &FrequencyConfig) -> Result<Report> {
    let r = run_frequency_recovery(c)?;
    let mut rep = Report::new("frequency-sim", c.seed, c)?.columns(&[
        "dataset",
        "seed",
        "planted",
        "train_accuracy",
        "diverged",
        "method",
        "recovered",
        "correct",
    ]);
    for d in &r.datasets {
        if d.diverged {
            rep.push_row(vec![d.index.into(), d.seed.into(), d.planted.into(), d.train_accuracy.into(), true.into(), "".into(), Cell::Int(-1), false.into()])?;
            continue;
        }
        for (m, f) in &d.recovered {
            rep.push_row(vec![
                d.index.into(),
                d.seed.into(),
                d.planted.into(),
                d.train_accuracy.into(),
                false.into(),
                m.name().into(),
                (*f).into(),
                (*f == d.planted).into(),
            ])?;
        }
    }
    rep.set("errors", &r.errors)?;
    rep.set("diverged", r.diverged)?;
    if let Some(d) = r.datasets.iter().find(|d| !d.diverged) {
        let series: Vec<(String, Vec<f64>)> = d
            .scores
            .iter()
            .map(|(m, s)| {
                let top = s.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
                (m.name().to_string(), s.iter().map(|v| v / top).collect())
            })
            .collect();
        let title = format!("dataset {} (planted frequency {})", d.index, d.planted);
        rep.plots.push(("frequency_scores.svg".into(), line_plot(&title, "frequency", "normalized importance", &series)));
    }
    Ok(rep)
}

pub fn color_report(c: &ColorBiasConfig, seed: u64) -> Result<Report> {
    let r = run_color_bias(c)?;
    let mut rep = Report::new("color-bias", seed, c)?.columns(&[
        "seed",
        "vanilla_train_accuracy",
        "vanilla_test_accuracy",
        "cdep_train_accuracy",
        "cdep_test_accuracy",
        "zero_lambda_identical",
    ]);
    for run in &r.runs {
        rep.push_row(vec![
            run.seed.into(),
            run.vanilla_train_accuracy.into(),
            run.vanilla_test_accuracy.into(),
            run.cdep_train_accuracy.into(),
            run.cdep_test_accuracy.into(),
            run.zero_lambda_identical.into(),
        ])?;
    }
    rep.set("vanilla_test_mean", r.vanilla_mean)?;
    rep.set("vanilla_test_se", r.vanilla_se)?;
    rep.set("cdep_test_mean", r.cdep_mean)?;
    rep.set("cdep_test_se", r.cdep_se)?;
    rep.set("seeds", &c.seeds)?;
    Ok(rep)
}

pub fn negation_report(c: &NegationConfig) -> Result<Report> {
    let (r, model) = run_negation_with_model(c)?;
    let mut rep =
        Report::new("negation-sentiment", c.seed, c)?.columns(&["sentence", "word", "word_score", "phrase_score", "flipped"]);
    for o in &r.occurrences {
        rep.push_row(vec![
            o.sentence.clone().into(),
            o.word.clone().into(),
            o.word_score.into(),
            o.phrase_score.into(),
            o.flipped.into(),
        ])?;
    }
    rep.set("train_accuracy", r.train_accuracy)?;
    rep.set("test_accuracy", r.test_accuracy)?;
    rep.set("flip_rate", r.flip_rate)?;
    rep.set("occurrences", r.occurrences.len())?;
    let negated = model.test.sentences.iter().find(|s| s.phrases.iter().any(|p| p.negations == 1));
    if let Some(s) = negated {
        let x = model.test.encode(&s.tokens, model.steps);
        let adjacency = Adjacency::sequence(s.tokens.len(), model.steps, model.test.vocab_size());
        let h = build_hierarchy(&model.net, &x, &adjacency, &AcdConfig { class_index: 1, ..AcdConfig::default() })?;
        let words = model.test.spec.vocabulary.words();
        let labels: Vec<String> = s.tokens.iter().map(|&t| words[t].clone()).collect();
        rep.plots.push(("hierarchy.svg".into(), hierarchy_svg(&h, &labels)));
    }
    rep.files.push(("model.json".into(), model.net.save_model() + "\n"));
    Ok(rep)
}

pub fn awd_report(job: &AwdJob, seed: u64) -> Result<Report> {
    if job.model.is_some() || job.signals.is_some() {
        let net = load_model(required(&job.model, "model")?)?;
        let signals = load_signals(required(&job.signals, "signals")?)?;
        let init = WaveletFilter::by_name(&job.harness.awd.init)?;
        let awd = AwdConfig { seed, ..job.harness.awd.clone() };
        let result = distill(&net, &signals, &init, &awd)?;
        let mut rep = Report::new("awd-distill", seed, job)?.columns(&[
            "iteration",
            "reconstruction",
            "sparsity",
            "constraints",
            "interpretation",
            "total",
        ]);
        for h in &result.history {
            rep.push_row(vec![
                h.iteration.into(),
                h.reconstruction.into(),
                h.sparsity.into(),
                h.constraints.into(),
                h.interpretation.into(),
                h.total.into(),
            ])?;
        }
        rep.set("filter", &result.filter.h)?;
        rep.files.push(("filter.json".into(), serde_json::to_string_pretty(&filter_json(&result.filter, &awd))? + "\n"));
        rep.files.push(("history.csv".into(), awd_history_csv(&result.history)));
        rep.plots.push((
            "filter.svg".into(),
            line_plot("lowpass filter", "tap", "h", &[(awd.init.clone(), init.h.clone()), ("learned".into(), result.filter.h.clone())]),
        ));
        return Ok(rep);
    }
    let c = &job.harness;
    let r = run_distill(c)?;
    let mut rep = Report::new("awd-distill", seed, job)?.columns(&[
        "seed",
        "regressor_r2",
        "initial_compression",
        "learned_compression",
        "initial_r2",
        "learned_r2",
    ]);
    for run in &r.runs {
        rep.push_row(vec![
            run.seed.into(),
            run.regressor_r2.into(),
            run.initial.compression_factor.into(),
            run.learned.compression_factor.into(),
            run.initial.r2.into(),
            run.learned.r2.into(),
        ])?;
    }
    rep.set("initial_compression", r.initial_compression)?;
    rep.set("learned_compression", r.learned_compression)?;
    rep.set("initial_r2", r.initial_r2)?;
    rep.set("learned_r2", r.learned_r2)?;
    rep.set("seeds", &c.seeds)?;
    let filters: Vec<Value> = r.runs.iter().map(|run| json!({ "seed": run.seed, "h": run.filter })).collect();
    rep.files.push(("filters.json".into(), serde_json::to_string_pretty(&filters)? + "\n"));
    if let Some(run) = r.runs.first() {
        let init = WaveletFilter::<f64>::by_name(&c.awd.init)?;
        rep.plots.push((
            "filter.svg".into(),
            line_plot(&format!("seed {}", run.seed), "tap", "h", &[(c.awd.init.clone(), init.h), ("learned".into(), run.filter.clone())]),
        ));
    }
    Ok(rep)
}

pub fn attribute_report(job: &AttributeJob, seed: u64) -> Result<Report> {
    let net = load_model(required(&job.model, "model")?)?;
    let x = load_input(required(&job.input, "input")?, net.input_shape())?;
    let group = FeatureGroup::from_indices(net.input_shape(), &job.group)?;
    let class = class_or_predicted(&net, &x, job.class_index)?;
    let pair = net.cd_groups(&x, std::slice::from_ref(&group))?;
    let mut rep = Report::new("attribute", seed, job)?.columns(&["class", "beta", "gamma", "logit"]);
    for k in 0..net.num_classes() {
        let (b, g) = (pair.beta.data()[k], pair.gamma.data()[k]);
        rep.push_row(vec![k.into(), b.into(), g.into(), (b + g).into()])?;
    }
    rep.set("class_index", class)?;
    rep.set("beta", pair.beta.data()[class])?;
    rep.set("gamma", pair.gamma.data()[class])?;
    rep.set("group_size", group.len())?;
    Ok(rep)
}

fn adjacency_for(net: &Network, x: &Tensor, kind: AdjacencyKind) -> Result<Adjacency> {
    let shape = net.input_shape();
    let lstm_first = matches!(net.layers().first(), Some(Layer::Lstm(_)));
    let used_rows = |steps: usize, features: usize| {
        (0..steps).rev().find(|&t| x.data()[t * features..(t + 1) * features].iter().any(|v| *v != 0.0)).map_or(0, |t| t + 1)
    };
    let bad = || BenchError::invalid(format!("adjacency {kind:?} does not fit input shape {shape:?}"));
    Ok(match (kind, shape) {
        (AdjacencyKind::Auto | AdjacencyKind::Chain, [n]) => Adjacency::chain(*n),
        (AdjacencyKind::Auto, [t, f]) if lstm_first => Adjacency::sequence(used_rows(*t, *f), *t, *f),
        (AdjacencyKind::Sequence, [t, f]) => Adjacency::sequence(used_rows(*t, *f), *t, *f),
        (AdjacencyKind::Auto | AdjacencyKind::Grid, [h, w]) => Adjacency::grid(*h, *w),
        (AdjacencyKind::Auto | AdjacencyKind::Image, [c, h, w]) => Adjacency::image(*c, *h, *w),
        (AdjacencyKind::Chain, _) => Adjacency::chain(shape.iter().product()).with_input_shape(shape)?,
        _ => return Err(bad()),
    })
}

pub fn acd_report(job: &AcdJob, seed: u64) -> Result<Report> {
    let net = load_model(required(&job.model, "model")?)?;
    let x = load_input(required(&job.input, "input")?, net.input_shape())?;
    let class = class_or_predicted(&net, &x, job.class_index)?;
    let adjacency = adjacency_for(&net, &x, job.adjacency)?;
    let config = AcdConfig { class_index: class, k_percent: job.k_percent, max_levels: job.max_levels };
    let h = build_hierarchy(&net, &x, &adjacency, &config)?;
    let mut parent = vec![-1i64; h.nodes.len()];
    for (i, n) in h.nodes.iter().enumerate() {
        for &c in &n.children {
            parent[c] = i as i64;
        }
    }
    let mut rep = Report::new("acd", seed, job)?.columns(&["node", "level", "units", "score", "parent"]);
    for (i, n) in h.nodes.iter().enumerate() {
        let units = n.units.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(" ");
        rep.push_row(vec![i.into(), n.level.into(), units.into(), n.score.into(), Cell::Int(parent[i])])?;
    }
    rep.set("class_index", class)?;
    rep.set("merges", h.steps.len())?;
    rep.set("interactions", h.steps.iter().map(|s| s.interaction).collect::<Vec<_>>())?;
    rep.files.push(("hierarchy.json".into(), serde_json::to_string_pretty(&h.to_json())? + "\n"));
    let units = adjacency.num_units();
    if units <= 64 {
        let labels: Vec<String> =
            if job.labels.len() >= units { job.labels.clone() } else { (0..units).map(|u| u.to_string()).collect() };
        rep.plots.push(("hierarchy.svg".into(), hierarchy_svg(&h, &labels[..units])));
    }
    Ok(rep)
}

pub fn trim_report(job: &TrimJob, seed: u64) -> Result<Report> {
    let net = load_model(required(&job.model, "model")?)?;
    let [n] = net.input_shape()[..] else {
        return Err(BenchError::invalid("trim works on networks over 1-D signals"));
    };
    let x = load_input(required(&job.input, "input")?, &[n])?;
    let class = class_or_predicted(&net, &x, job.class_index)?;
    let (transform, bands): (Transform<f64>, Vec<(String, Tensor)>) = match job.transform {
        TransformKind::Dft => {
            let bands = frequency_masks(n)?.into_iter().enumerate().map(|(k, m)| (format!("f{k}"), m)).collect();
            (Transform::Dft, bands)
        }
        TransformKind::Dwt => {
            let filter = WaveletFilter::by_name(&job.wavelet)?;
            let ranges = scale_ranges(n, job.levels);
            let mut bands = Vec::new();
            for (i, r) in ranges.into_iter().enumerate() {
                let name = if i == 0 { format!("a{}", job.levels) } else { format!("d{}", job.levels + 1 - i) };
                bands.push((name, index_mask(&[n], &r.collect::<Vec<_>>())?));
            }
            (Transform::dwt(filter, job.levels), bands)
        }
    };
    let mut rep = Report::new("trim", seed, job)?.columns(&["band", "name", "score"]);
    let mut scores = Vec::new();
    for (i, (name, mask)) in bands.iter().enumerate() {
        let s = net.trim_attribution(&transform, &x, mask, class, job.method, job.ig_steps)?;
        scores.push(s);
        rep.push_row(vec![i.into(), name.clone().into(), s.into()])?;
    }
    rep.set("class_index", class)?;
    rep.set("transform", transform.name())?;
    rep.set("method", job.method.name())?;
    rep.set("top_band", argmax(&scores))?;
    rep.plots.push(("trim_scores.svg".into(), line_plot("transformed-space scores", "band", "score", &[(job.method.name().into(), scores)])));
    Ok(rep)
}

pub fn train_cdep_report(job: &TrainCdepJob, seed: u64) -> Result<Report> {
    let (data, test, default_arch) = match &job.dataset {
        Some(path) => {
            let shape = match (&job.model, &job.arch) {
                (Some(m), _) => load_model(m)?.input_shape().to_vec(),
                (None, Some(a)) => a.input_shape.clone(),
                (None, None) => return Err(BenchError::invalid("a dataset file needs `model` or `arch`")),
            };
            (load_dataset(path, &shape)?, None, None)
        }
        None => match job.task {
            BuiltinTask::ColorBias => {
                let c = ColorBiasConfig::default();
                let d = make_color_bias_dataset(job.task_size, c.size, c.n_classes, seed)?;
                let arch = ArchitectureDescriptor { input_shape: vec![3, c.size, c.size], num_classes: c.n_classes, layers: c.layers };
                (d.train, Some(d.test), Some(arch))
            }
            BuiltinTask::Frequency => {
                let f = FrequencyConfig::default();
                let task = simulate_frequency_task(job.task_size, f.signal_length, seed)?;
                let net = frequency_net(f.signal_length, f.hidden, seed)?;
                (task.data, None, Some(arch_of(&net)))
            }
        },
    };
    let net = match (&job.model, job.arch.as_ref().or(default_arch.as_ref())) {
        (Some(m), _) => load_model(m)?,
        (None, Some(a)) => a.init_random(seed)?,
        (None, None) => return Err(BenchError::invalid("`model` or `arch` is required")),
    };
    let targets = match &job.targets {
        TargetKind::None => Targets::None,
        TargetKind::SampledPixels => Targets::SampledPixels,
        TargetKind::Fixed(list) => Targets::Fixed(
            list.iter()
                .map(|t| {
                    Ok(ExplanationTarget {
                        sample: t.sample,
                        group: FeatureGroup::from_indices(data.sample_shape(), &t.indices)?,
                        value: t.value,
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };
    let result = train(&net, &data, &targets, &job.train)?;
    let mut rep =
        Report::new("train-cdep", seed, job)?.columns(&["epoch", "prediction_loss", "explanation_loss", "train_accuracy"]);
    for e in &result.history {
        rep.push_row(vec![e.epoch.into(), e.prediction_loss.into(), e.explanation_loss.into(), e.train_accuracy.into()])?;
    }
    rep.set("train_accuracy", accuracy(&result.net, &data)?)?;
    if let Some(t) = &test {
        rep.set("test_accuracy", accuracy(&result.net, t)?)?;
    }
    rep.files.push(("model.json".into(), result.net.save_model() + "\n"));
    rep.files.push(("history.csv".into(), history_csv(&result.history)));
    Ok(rep)
}

/// Architecture with the same layer kinds and sizes as `net`.
fn arch_of(net: &Network) -> ArchitectureDescriptor {
    let json = net.to_json();
    let layers = json["layers"]
        .as_array()
        .map(|ls| {
            ls.iter()
                .zip(net.layers())
                .map(|(l, layer)| match layer {
                    Layer::Linear { weight, .. } => decomp_core::LayerDescriptor::Linear { out: weight.shape()[0] },
                    _ => serde_json::from_value(json!({ "kind": l["kind"] })).expect("parameter-free layer"),
                })
                .collect()
        })
        .unwrap_or_default();
    ArchitectureDescriptor { input_shape: net.input_shape().to_vec(), num_classes: net.num_classes(), layers }
}
