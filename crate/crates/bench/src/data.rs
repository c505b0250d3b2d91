//! Seeded synthetic datasets for the experiment drivers.

use std::f64::consts::PI;

use decomp_core::cdep::Dataset;
use decomp_core::fft::dft_real;
use decomp_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Standard-normal signals labeled by whether one planted frequency's DFT
/// magnitude exceeds its median over the dataset.
#[derive(Clone, Debug)]
pub struct FrequencyTask {
    pub data: Dataset<f64>,
    pub frequency: usize,
}

pub fn simulate_frequency_task(n_samples: usize, signal_length: usize, seed: u64) -> Result<FrequencyTask> {
    if signal_length < 8 || !signal_length.is_power_of_two() {
        return Err(BenchError::invalid(format!("signal length {signal_length} must be a power of two ≥ 8")));
    }
    if n_samples < 2 {
        return Err(BenchError::invalid("need at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frequency = rng.random_range(1..signal_length / 2);
    let mut xs = Vec::with_capacity(n_samples * signal_length);
    let mut mags = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x: Vec<f64> = (0..signal_length).map(|_| rng.sample(StandardNormal)).collect();
        let (re, im) = dft_real(&x);
        mags.push(re[frequency].hypot(im[frequency]));
        xs.extend(x);
    }
    let median = median(&mags);
    let labels = mags.iter().map(|&m| usize::from(m > median)).collect();
    let data = Dataset::new(Tensor::new(vec![n_samples, signal_length], xs)?, labels)?;
    Ok(FrequencyTask { data, frequency })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// Seven-segment layout: a top, b upper right, c lower right, d bottom,
// e lower left, f upper left, g middle.
const SEGMENTS: [&str; 10] = ["abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg"];

/// Train and test splits of the color-bias task, images `[3, size, size]`.
#[derive(Clone, Debug)]
pub struct ColorBias {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Color of class `k` out of `n`: equal-brightness hues around the color wheel.
pub fn class_color(k: usize, n: usize) -> [f64; 3] {
    let theta = 2.0 * PI * k as f64 / n as f64;
    [0.0, 1.0, 2.0].map(|j| 0.5 + 0.45 * (theta + j * 2.0 * PI / 3.0).cos())
}

/// Binary digit-like glyph for `class` with random placement, size and stroke width.
pub fn glyph(class: usize, size: usize, rng: &mut impl Rng) -> Vec<bool> {
    let w = rng.random_range(size * 3 / 8..=size / 2 + 1).max(3);
    let h = rng.random_range(size * 5 / 8..=size * 3 / 4 + 1).max(5).min(size);
    let t = rng.random_range(1..=2);
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    let mid = h / 2;
    let mut img = vec![false; size * size];
    let mut fill = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
        for y in ys {
            for x in xs.clone() {
                img[(y0 + y) * size + x0 + x] = true;
            }
        }
    };
    for seg in SEGMENTS[class].chars() {
        match seg {
            'a' => fill(0..t, 0..w),
            'd' => fill(h - t..h, 0..w),
            'g' => fill(mid - t / 2..mid - t / 2 + t, 0..w),
            'f' => fill(0..mid + 1, 0..t),
            'b' => fill(0..mid + 1, w - t..w),
            'e' => fill(mid..h, 0..t),
            'c' => fill(mid..h, w - t..w),
            _ => unreachable!(),
        }
    }
    img
}

fn paint(shape: &[bool], color: [f64; 3]) -> Vec<f64> {
    color.iter().flat_map(|&c| shape.iter().map(move |&on| if on { c } else { 0.0 })).collect()
}

/// Training images are colored by class; each test image reuses a training
/// glyph's shape with the color of class `n − 1 − k`.
pub fn make_color_bias_dataset(n_per_class: usize, size: usize, n_classes: usize, seed: u64) -> Result<ColorBias> {
    if n_classes < 2 || n_classes > SEGMENTS.len() {
        return Err(BenchError::invalid(format!("n_classes must be in 2..={}", SEGMENTS.len())));
    }
    if size < 8 || n_per_class == 0 {
        return Err(BenchError::invalid("size must be ≥ 8 and n_per_class ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[f64; 3]> = (0..n_classes).map(|k| class_color(k, n_classes)).collect();
    let mut order: Vec<usize> = (0..n_classes).flat_map(|k| std::iter::repeat_n(k, n_per_class)).collect();
    order.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &k in &order {
        let shape = glyph(k, size, &mut rng);
        train.extend(paint(&shape, colors[k]));
        test.extend(paint(&shape, colors[n_classes - 1 - k]));
    }
    let shape = vec![order.len(), 3, size, size];
    Ok(ColorBias {
        train: Dataset::new(Tensor::new(shape.clone(), train)?, order.clone())?,
        test: Dataset::new(Tensor::new(shape, test)?, order)?,
        colors,
    })
}

/// Word classes of the sentiment grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub intensifiers: Vec<String>,
    pub negation: String,
    pub filler: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|w| w.to_string()).collect();
        Self {
            positive: s(&["good", "great", "fun", "lovely"]),
            negative: s(&["bad", "awful", "dull", "boring"]),
            intensifiers: s(&["very", "really"]),
            negation: "not".into(),
            filler: s(&["the", "movie", "was", "it", "is", "plot"]),
        }
    }
}

impl Vocabulary {
    /// All words; token ids index this list.
    pub fn words(&self) -> Vec<String> {
        let mut w = self.positive.clone();
        w.extend(self.negative.iter().cloned());
        w.extend(self.intensifiers.iter().cloned());
        w.push(self.negation.clone());
        w.extend(self.filler.iter().cloned());
        w
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words().iter().position(|w| w == word)
    }
}

/// Knobs of the sentence generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSpec {
    pub vocabulary: Vocabulary,
    pub max_phrases: usize,
    pub max_filler: usize,
    pub negation_rate: f64,
    pub double_negation_rate: f64,
    /// Each "not" multiplies the phrase polarity by `−negation_strength`.
    pub negation_strength: f64,
    pub intensifier_rate: f64,
    pub intensifier_scale: f64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        Self {
            vocabulary: Vocabulary::default(),
            max_phrases: 2,
            max_filler: 2,
            negation_rate: 0.4,
            double_negation_rate: 0.05,
            negation_strength: 1.0,
            intensifier_rate: 0.2,
            intensifier_scale: 2.0,
        }
    }
}

/// A phrase: optional negations, optional intensifier, one polarity word.
#[derive(Clone, Debug, PartialEq)]
pub struct Phrase {
    /// Token positions covered, in order.
    pub positions: Vec<usize>,
    pub negations: usize,
    /// Position of the polarity word.
    pub head: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub phrases: Vec<Phrase>,
    pub score: f64,
}

impl Sentence {
    pub fn label(&self) -> usize {
        usize::from(self.score > 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SentimentData {
    pub spec: GrammarSpec,
    /// Planted word polarities, indexed by token id (0 for non-polarity words).
    pub word_scores: Vec<f64>,
    pub sentences: Vec<Sentence>,
    pub max_len: usize,
}

/// Polarity words get seeded magnitudes in `[1, 2)`; a phrase scores
/// `(−negation_strength)^negations · scale · polarity`, a sentence the sum of its phrases.
/// Sentences with a zero score are redrawn.
pub fn make_negation_sentiment(n_samples: usize, spec: &GrammarSpec, seed: u64) -> Result<SentimentData> {
    let v = &spec.vocabulary;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word_scores = vec![0.0; v.words().len()];
    for s in word_scores.iter_mut().take(v.positive.len()) {
        *s = rng.random_range(1.0..2.0);
    }
    for i in 0..v.negative.len() {
        word_scores[v.positive.len() + i] = -rng.random_range(1.0..2.0);
    }
    sample_sentences(n_samples, spec, word_scores, &mut rng)
}

/// Sentences drawn under a given polarity lexicon (indexed by token id).
pub fn sample_sentences(
    n_samples: usize,
    spec: &GrammarSpec,
    word_scores: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SentimentData> {
    let v = &spec.vocabulary;
    if v.positive.is_empty() || v.negative.is_empty() || spec.max_phrases == 0 {
        return Err(BenchError::invalid("grammar needs polarity words and at least one phrase"));
    }
    if word_scores.len() != v.words().len() {
        return Err(BenchError::invalid("lexicon size does not match the vocabulary"));
    }
    let n_polar = v.positive.len() + v.negative.len();
    let intens0 = n_polar;
    let not_id = n_polar + v.intensifiers.len();
    let filler0 = not_id + 1;
    let mut sentences = Vec::with_capacity(n_samples);
    while sentences.len() < n_samples {
        let mut tokens = Vec::new();
        let mut phrases = Vec::new();
        let n_phr = rng.random_range(1..=spec.max_phrases);
        let push_filler = |tokens: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
            if v.filler.is_empty() {
                return;
            }
            for _ in 0..rng.random_range(0..=spec.max_filler) {
                tokens.push(filler0 + rng.random_range(0..v.filler.len()));
            }
        };
        for _ in 0..n_phr {
            push_filler(&mut tokens, rng);
            let start = tokens.len();
            let negations = if rng.random_bool(spec.negation_rate) {
                if rng.random_bool(spec.double_negation_rate) { 2 } else { 1 }
            } else {
                0
            };
            for _ in 0..negations {
                tokens.push(not_id);
            }
            let mut scale = 1.0;
            if !v.intensifiers.is_empty() && rng.random_bool(spec.intensifier_rate) {
                tokens.push(intens0 + rng.random_range(0..v.intensifiers.len()));
                scale = spec.intensifier_scale;
            }
            let word = rng.random_range(0..n_polar);
            let head = tokens.len();
            tokens.push(word);
            let sign = (-spec.negation_strength).powi(negations as i32);
            phrases.push(Phrase {
                positions: (start..tokens.len()).collect(),
                negations,
                head,
                score: sign * scale * word_scores[word],
            });
        }
        push_filler(&mut tokens, rng);
        let score: f64 = phrases.iter().map(|p| p.score).sum();
        if score != 0.0 {
            sentences.push(Sentence { tokens, phrases, score });
        }
    }
    let max_len = sentences.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    Ok(SentimentData { spec: spec.clone(), word_scores, sentences, max_len })
}

impl SentimentData {
    pub fn vocab_size(&self) -> usize {
        self.word_scores.len()
    }

    /// One-hot encoding `[len, vocab]` padded with zero rows to `len`.
    pub fn encode(&self, tokens: &[usize], len: usize) -> Tensor {
        let v = self.vocab_size();
        let mut data = vec![0.0; len * v];
        for (t, &tok) in tokens.iter().enumerate().take(len) {
            data[t * v + tok] = 1.0;
        }
        Tensor::new(vec![len, v], data).expect("sizes agree")
    }

    /// All sentences as a dataset `[n, max_len, vocab]`.
    pub fn dataset(&self) -> Result<Dataset<f64>> {
        let items: Vec<Tensor> = self.sentences.iter().map(|s| self.encode(&s.tokens, self.max_len)).collect();
        Ok(Dataset::new(Tensor::stack(&items)?, self.sentences.iter().map(Sentence::label).collect())?)
    }

    /// Score text under the planted grammar: each polarity word closes a phrase
    /// opened by any preceding negations and intensifier.
    pub fn parse(&self, text: &str) -> Result<Sentence> {
        let v = &self.spec.vocabulary;
        let n_polar = v.positive.len() + v.negative.len();
        let not_id = n_polar + v.intensifiers.len();
        let mut tokens = Vec::new();
        let mut phrases = Vec::new();
        let (mut start, mut negations, mut scale) = (None, 0, 1.0);
        for word in text.split_whitespace() {
            let id = v.id(word).ok_or_else(|| BenchError::invalid(format!("unknown word `{word}`")))?;
            let pos = tokens.len();
            tokens.push(id);
            if id == not_id {
                start.get_or_insert(pos);
                negations += 1;
            } else if (n_polar..not_id).contains(&id) {
                start.get_or_insert(pos);
                scale = self.spec.intensifier_scale;
            } else if id < n_polar {
                let first = start.take().unwrap_or(pos);
                let sign = (-self.spec.negation_strength).powi(negations);
                phrases.push(Phrase {
                    positions: (first..=pos).collect(),
                    negations: negations as usize,
                    head: pos,
                    score: sign * scale * self.word_scores[id],
                });
                (negations, scale) = (0, 1.0);
            } else {
                (start, negations, scale) = (None, 0, 1.0);
            }
        }
        let score = phrases.iter().map(|p| p.score).sum();
        Ok(Sentence { tokens, phrases, score })
    }

    pub fn render(&self, s: &Sentence) -> String {
        let words = self.spec.vocabulary.words();
        s.tokens.iter().map(|&t| words[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Traces with one planted slow rise followed by a sharp drop; the target is
/// the motif amplitude.
#[derive(Clone, Debug)]
pub struct MotifTraces {
    /// `[n, length]`.
    pub signals: Tensor,
    pub amplitudes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotifSpec {
    pub length: usize,
    pub rise: usize,
    pub drop: usize,
    pub noise: f64,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
}

impl Default for MotifSpec {
    fn default() -> Self {
        Self { length: 64, rise: 16, drop: 2, noise: 0.2, min_amplitude: 0.5, max_amplitude: 2.0 }
    }
}

pub fn make_motif_traces(n: usize, spec: &MotifSpec, seed: u64) -> Result<MotifTraces> {
    if spec.rise + spec.drop >= spec.length || spec.rise == 0 || spec.drop == 0 {
        return Err(BenchError::invalid("motif does not fit the trace"));
    }
    if !(spec.min_amplitude < spec.max_amplitude) || !(spec.noise >= 0.0) {
        return Err(BenchError::invalid("bad amplitude range or noise"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| BenchError::invalid(e.to_string()))?;
    let width = spec.rise + spec.drop;
    let mut signals = Vec::with_capacity(n * spec.length);
    let mut amplitudes = Vec::with_capacity(n);
    for _ in 0..n {
        let amp = rng.random_range(spec.min_amplitude..spec.max_amplitude);
        let start = rng.random_range(0..=spec.length - width);
        let mut x: Vec<f64> = (0..spec.length).map(|_| noise.sample(&mut rng)).collect();
        for k in 0..spec.rise {
            x[start + k] += amp * (k + 1) as f64 / spec.rise as f64;
        }
        for k in 0..spec.drop {
            x[start + spec.rise + k] += amp * (spec.drop - k - 1) as f64 / spec.drop as f64;
        }
        signals.extend(x);
        amplitudes.push(amp);
    }
    Ok(MotifTraces { signals: Tensor::new(vec![n, spec.length], signals)?, amplitudes })
}
