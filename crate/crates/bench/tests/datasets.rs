use decomp_bench::data::{
    class_color, make_color_bias_dataset, make_motif_traces, make_negation_sentiment, simulate_frequency_task, GrammarSpec,
    MotifSpec,
};
use decomp_core::fft::dft_real;

#[test]
fn frequency_labels_split_at_the_median() {
    for seed in 0..5 {
        let task = simulate_frequency_task(200, 32, seed).unwrap();
        let positives = task.data.labels.iter().filter(|&&y| y == 1).count();
        assert_eq!(positives, 100);
        assert!(task.frequency >= 1 && task.frequency < 16);
        // labels agree with a direct DFT of each row
        let mags: Vec<f64> = (0..200)
            .map(|i| {
                let (re, im) = dft_real(task.data.sample(i).unwrap().data());
                re[task.frequency].hypot(im[task.frequency])
            })
            .collect();
        for (i, &y) in task.data.labels.iter().enumerate() {
            let above = mags.iter().filter(|&&m| m < mags[i]).count();
            assert_eq!(y == 1, above >= 100);
        }
    }
}

#[test]
fn frequency_task_is_seeded() {
    let a = simulate_frequency_task(50, 16, 9).unwrap();
    let b = simulate_frequency_task(50, 16, 9).unwrap();
    let c = simulate_frequency_task(50, 16, 10).unwrap();
    assert_eq!(a.data.inputs, b.data.inputs);
    assert_eq!(a.frequency, b.frequency);
    assert_ne!(a.data.inputs, c.data.inputs);
    assert!(simulate_frequency_task(50, 24, 0).is_err());
}

#[test]
fn color_bias_inverts_colors_on_identical_shapes() {
    let n = 10;
    let d = make_color_bias_dataset(6, 16, n, 3).unwrap();
    assert_eq!(d.train.labels, d.test.labels);
    let plane = 16 * 16;
    for i in 0..d.train.len() {
        let k = d.train.labels[i];
        let tr = d.train.sample(i).unwrap();
        let te = d.test.sample(i).unwrap();
        for p in 0..plane {
            let on_tr = (0..3).any(|c| tr.data()[c * plane + p] != 0.0);
            let on_te = (0..3).any(|c| te.data()[c * plane + p] != 0.0);
            assert_eq!(on_tr, on_te);
            if on_tr {
                for c in 0..3 {
                    assert_eq!(tr.data()[c * plane + p], d.colors[k][c]);
                    assert_eq!(te.data()[c * plane + p], d.colors[n - 1 - k][c]);
                }
            }
            // grayscale collapse by channel mean
            let gray = |x: &[f64]| (0..3).map(|c| x[c * plane + p]).sum::<f64>() / 3.0;
            assert!((gray(tr.data()) - gray(te.data())).abs() < 1e-12);
        }
    }
}

#[test]
fn class_colors_are_distinct() {
    for n in 2..=10 {
        let colors: Vec<[f64; 3]> = (0..n).map(|k| class_color(k, n)).collect();
        for a in 0..n {
            for b in a + 1..n {
                let dist: f64 = (0..3).map(|c| (colors[a][c] - colors[b][c]).powi(2)).sum();
                assert!(dist > 1e-3, "classes {a} and {b} share a color");
            }
        }
    }
    assert!(make_color_bias_dataset(2, 16, 11, 0).is_err());
}

#[test]
fn every_class_appears_equally_often() {
    let d = make_color_bias_dataset(4, 16, 10, 1).unwrap();
    for k in 0..10 {
        assert_eq!(d.train.labels.iter().filter(|&&y| y == k).count(), 4);
    }
}

#[test]
fn negation_grammar_examples() {
    let data = make_negation_sentiment(10, &GrammarSpec::default(), 0).unwrap();
    assert_eq!(data.parse("good").unwrap().label(), 1);
    assert_eq!(data.parse("not good").unwrap().label(), 0);
    assert_eq!(data.parse("not not good").unwrap().label(), 1);
    assert_eq!(data.parse("the movie was bad").unwrap().label(), 0);
    assert_eq!(data.parse("not bad").unwrap().label(), 1);
    let very = data.parse("very good").unwrap().score;
    let plain = data.parse("good").unwrap().score;
    assert!((very - 2.0 * plain).abs() < 1e-12);
    assert!(data.parse("gripping").is_err());
}

#[test]
fn generated_labels_follow_the_grammar() {
    let data = make_negation_sentiment(200, &GrammarSpec::default(), 4).unwrap();
    for s in &data.sentences {
        let reparsed = data.parse(&data.render(s)).unwrap();
        assert_eq!(reparsed.score, s.score);
        assert_eq!(reparsed.label(), s.label());
    }
}

#[test]
fn planted_scores_are_reproducible() {
    let a = make_negation_sentiment(30, &GrammarSpec::default(), 5).unwrap();
    let b = make_negation_sentiment(30, &GrammarSpec::default(), 5).unwrap();
    assert_eq!(a.word_scores, b.word_scores);
    assert_eq!(a.dataset().unwrap().inputs, b.dataset().unwrap().inputs);
}

#[test]
fn motif_traces_are_seeded() {
    let spec = MotifSpec::default();
    let a = make_motif_traces(20, &spec, 1).unwrap();
    let b = make_motif_traces(20, &spec, 1).unwrap();
    assert_eq!(a.signals, b.signals);
    assert_eq!(a.amplitudes, b.amplitudes);
    assert_eq!(a.signals.shape(), &[20, spec.length]);
}
