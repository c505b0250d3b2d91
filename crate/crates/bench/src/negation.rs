//! Negation sanity check: an LSTM trained on the planted grammar should give
//! "not <positive>" the opposite sign of the positive word alone.

use decomp_core::cdep::{accuracy, train, Targets, TrainConfig};
use decomp_core::{ArchitectureDescriptor, FeatureGroup, LayerDescriptor, Network, Tensor};
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_negation_sentiment, sample_sentences, GrammarSpec, Sentence, SentimentData};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegationConfig {
    pub grammar: GrammarSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for NegationConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarSpec::default(),
            n_train: 1000,
            n_test: 300,
            hidden: 16,
            train: TrainConfig { lambda: 0.0, learning_rate: 0.05, epochs: 60, batch_size: 16, seed: 0, pixel_samples: 0 },
            seed: 0,
        }
    }
}

/// One "not <positive>" occurrence in a test sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationOccurrence {
    pub sentence: String,
    pub word: String,
    /// Positive-minus-negative logit contribution of the word alone.
    pub word_score: f64,
    /// Same for the whole negated phrase.
    pub phrase_score: f64,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationReport {
    pub config: NegationConfig,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub occurrences: Vec<NegationOccurrence>,
    pub flip_rate: f64,
}

pub fn sentiment_net(steps: usize, vocab: usize, hidden: usize, seed: u64) -> Result<Network> {
    let arch = ArchitectureDescriptor {
        input_shape: vec![steps, vocab],
        num_classes: 2,
        layers: vec![LayerDescriptor::Lstm { hidden }, LayerDescriptor::Linear { out: 2 }],
    };
    Ok(arch.init_random(seed)?)
}

/// Group covering token positions of a `[steps, vocab]` one-hot input.
pub fn position_group(steps: usize, vocab: usize, positions: &[usize]) -> Result<FeatureGroup> {
    let idx: Vec<usize> = positions.iter().flat_map(|&p| p * vocab..(p + 1) * vocab).collect();
    Ok(FeatureGroup::from_indices(&[steps, vocab], &idx)?)
}

/// `β` of the positive logit minus `β` of the negative logit.
pub fn polarity_score(net: &Network, x: &Tensor, group: &FeatureGroup) -> Result<f64> {
    let pair = net.cd_groups(x, std::slice::from_ref(group))?;
    Ok(pair.beta.data()[1] - pair.beta.data()[0])
}

fn negated_positive_occurrences(
    net: &Network,
    data: &SentimentData,
    sentence: &Sentence,
    steps: usize,
) -> Result<Vec<NegationOccurrence>> {
    let words = data.spec.vocabulary.words();
    let vocab = data.vocab_size();
    let x = data.encode(&sentence.tokens, steps);
    let mut out = Vec::new();
    for p in &sentence.phrases {
        let head = sentence.tokens[p.head];
        if p.negations != 1 || data.word_scores[head] <= 0.0 {
            continue;
        }
        let word_score = polarity_score(net, &x, &position_group(steps, vocab, &[p.head])?)?;
        let phrase_score = polarity_score(net, &x, &position_group(steps, vocab, &p.positions)?)?;
        out.push(NegationOccurrence {
            sentence: data.render(sentence),
            word: words[head].clone(),
            word_score,
            phrase_score,
            flipped: word_score * phrase_score < 0.0,
        });
    }
    Ok(out)
}

/// Trained model and test split of a negation run, kept for plotting.
pub struct NegationModel {
    pub net: Network,
    pub test: SentimentData,
    pub steps: usize,
}

pub fn run_negation(config: &NegationConfig) -> Result<NegationReport> {
    Ok(run_negation_with_model(config)?.0)
}

pub fn run_negation_with_model(config: &NegationConfig) -> Result<(NegationReport, NegationModel)> {
    let train_data = make_negation_sentiment(config.n_train, &config.grammar, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut test_data = sample_sentences(config.n_test, &config.grammar, train_data.word_scores.clone(), &mut rng)?;
    let steps = train_data.max_len.max(test_data.max_len);
    let mut train_set = train_data;
    train_set.max_len = steps;
    test_data.max_len = steps;
    let train_ds = train_set.dataset()?;
    let test_ds = test_data.dataset()?;
    let net = sentiment_net(steps, train_set.vocab_size(), config.hidden, config.seed)?;
    let tc = TrainConfig { lambda: 0.0, seed: config.seed, ..config.train.clone() };
    let trained = train(&net, &train_ds, &Targets::None, &tc)?.net;
    let mut occurrences = Vec::new();
    for s in &test_data.sentences {
        occurrences.extend(negated_positive_occurrences(&trained, &test_data, s, steps)?);
    }
    let flips = occurrences.iter().filter(|o| o.flipped).count();
    let flip_rate = if occurrences.is_empty() { f64::NAN } else { flips as f64 / occurrences.len() as f64 };
    let report = NegationReport {
        config: config.clone(),
        train_accuracy: accuracy(&trained, &train_ds)?,
        test_accuracy: accuracy(&trained, &test_ds)?,
        occurrences,
        flip_rate,
    };
    Ok((report, NegationModel { net: trained, test: test_data, steps }))
}
