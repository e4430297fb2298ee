use std::collections::HashMap;

use mpmr::wordcount::{
    generate_corpus, oracle_wordcount, run_local, tokenize, Corpus, EngineSettings, GenerateSpec,
};

fn settings(nodes: usize, threads: usize, segments: usize) -> EngineSettings {
    EngineSettings {
        nodes,
        threads,
        segments,
        ..EngineSettings::default()
    }
}

fn corpus() -> Corpus {
    generate_corpus(GenerateSpec {
        vocab_size: 10_000,
        total_words: 1_000_000,
        seed: 42,
    })
    .unwrap()
}

#[test]
fn engine_matches_oracle_across_shapes() {
    let corpus = corpus();
    let expected = oracle_wordcount(&corpus, false).to_tsv();
    for (nodes, threads, segments) in [(1, 1, 1), (1, 4, 16), (2, 2, 4), (4, 1, 16), (4, 4, 1)] {
        let run = run_local(&corpus, &settings(nodes, threads, segments)).unwrap();
        assert_eq!(run.counts.total(), 1_000_000);
        assert!(
            run.counts.to_tsv() == expected,
            "nodes={nodes} threads={threads} segments={segments}"
        );
    }
}

#[test]
fn oracle_agrees_with_naive_count() {
    let corpus = Corpus::from_text(b"b a  b\n\nc b a\n a".to_vec());
    let mut naive: HashMap<&[u8], i64> = HashMap::new();
    for line in corpus.lines() {
        for w in line.split(|&b| b == b' ').filter(|w| !w.is_empty()) {
            *naive.entry(w).or_default() += 1;
        }
    }
    let mut naive: Vec<_> = naive.into_iter().map(|(k, v)| (k.to_vec(), v)).collect();
    naive.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    assert_eq!(oracle_wordcount(&corpus, false).as_slice(), &naive[..]);
    assert_eq!(
        oracle_wordcount(&corpus, false).to_tsv(),
        b"a\t3\nb\t3\nc\t1\n".to_vec()
    );
}

#[test]
fn empty_tokens_counted_only_on_request() {
    let corpus = Corpus::from_text(b"x  y\n".to_vec());
    assert_eq!(tokenize(corpus.line(0), true).count(), 3);
    let kept = run_local(
        &corpus,
        &EngineSettings {
            keep_empty: true,
            ..settings(2, 1, 4)
        },
    )
    .unwrap();
    assert_eq!(kept.counts.to_tsv(), b"\t1\nx\t1\ny\t1\n".to_vec());
    let dropped = run_local(&corpus, &settings(2, 1, 4)).unwrap();
    assert_eq!(dropped.counts.to_tsv(), b"x\t1\ny\t1\n".to_vec());
}

#[test]
fn repetition_scales_emits_but_not_shuffle() {
    let base = generate_corpus(GenerateSpec {
        vocab_size: 2_000,
        total_words: 100_000,
        seed: 7,
    })
    .unwrap();
    let once = run_local(&base, &settings(4, 2, 8)).unwrap();
    let eight = run_local(&base.clone().repeated(8), &settings(4, 2, 8)).unwrap();

    assert_eq!(eight.emits(), 8 * once.emits());
    for (a, b) in once.node_metrics.iter().zip(&eight.node_metrics) {
        assert_eq!(a.shuffled_entries_to, b.shuffled_entries_to);
        assert!(a.shuffled_entries <= 4 * 2_000);
    }
    let scaled: Vec<_> = once
        .counts
        .as_slice()
        .iter()
        .map(|(w, c)| (w.clone(), c * 8))
        .collect();
    assert_eq!(eight.counts.as_slice(), &scaled[..]);
}
