//! Shared inputs for the benchmarks.

use mpmr::wordcount::{generate_corpus, tokenize, Corpus, GenerateSpec};

/// A seeded Zipf corpus of `words` words over `vocab` distinct words.
pub fn zipf_corpus(vocab: u64, words: u64) -> Corpus {
    generate_corpus(GenerateSpec {
        vocab_size: vocab,
        total_words: words,
        seed: 42,
    })
    .expect("vocab is at least 1")
}

/// The tokens of `corpus` in order, as owned keys.
pub fn zipf_keys(corpus: &Corpus) -> Vec<Vec<u8>> {
    corpus
        .lines()
        .flat_map(|l| tokenize(l, false))
        .map(<[u8]>::to_vec)
        .collect()
}
