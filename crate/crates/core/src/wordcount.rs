//! Word count: corpus handling, the engine job, a sequential oracle and the
//! output/report formats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::concurrent_map::ConfigError;
use crate::dist_map::{DistMap, DistMapConfig, DistMapError, MapMetrics};
use crate::mapreduce::{DistRange, MapReduceError, DEFAULT_CHUNK};
use crate::reducer::Sum;
use crate::transport::{spawn_local_cluster, Cluster, NodeId, TransportError};

/// Words per line in generated corpora.
pub const WORDS_PER_LINE: usize = 20;

#[derive(Debug, Error)]
pub enum WordCountError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{phase}: {source}")]
    Transport {
        phase: &'static str,
        #[source]
        source: TransportError,
    },
    #[error("{phase}: {source}")]
    Shuffle {
        phase: &'static str,
        #[source]
        source: DistMapError,
    },
    #[error("map phase: {0}")]
    MapReduce(#[from] MapReduceError),
    #[error("metrics from {0} are malformed")]
    Metrics(NodeId),
}

impl From<ConfigError> for WordCountError {
    fn from(e: ConfigError) -> Self {
        WordCountError::Config(e.to_string())
    }
}

impl WordCountError {
    /// True when the root cause is a cluster communication failure.
    pub fn is_transport(&self) -> bool {
        match self {
            WordCountError::Transport { .. } => true,
            WordCountError::Shuffle { source, .. } => matches!(source, DistMapError::Transport(_)),
            WordCountError::MapReduce(MapReduceError::Barrier(_)) => true,
            WordCountError::MapReduce(MapReduceError::Sync(DistMapError::Transport(_))) => true,
            _ => false,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, WordCountError::Config(_))
    }
}

fn transport(phase: &'static str) -> impl FnOnce(TransportError) -> WordCountError {
    move |source| WordCountError::Transport { phase, source }
}

fn shuffle(phase: &'static str) -> impl FnOnce(DistMapError) -> WordCountError {
    move |source| WordCountError::Shuffle { phase, source }
}

/// Newline-delimited text, optionally repeated end to end.
///
/// The base text is stored once; repetition is by index, so a corpus
/// repeated 200 times costs no more memory than one copy.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    text: Vec<u8>,
    lines: Vec<(usize, usize)>,
    repeat: usize,
}

impl Corpus {
    /// Splits `text` on `\n`. A final empty line after a trailing newline is
    /// dropped.
    pub fn from_text(text: Vec<u8>) -> Self {
        let mut lines = Vec::new();
        let mut start = 0;
        for (i, &b) in text.iter().enumerate() {
            if b == b'\n' {
                lines.push((start, i));
                start = i + 1;
            }
        }
        if start < text.len() {
            lines.push((start, text.len()));
        }
        Corpus {
            text,
            lines,
            repeat: 1,
        }
    }

    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut text = Vec::new();
        for l in lines {
            text.extend_from_slice(l.as_ref());
            text.push(b'\n');
        }
        Corpus::from_text(text)
    }

    /// The same lines concatenated `repeat` times.
    pub fn repeated(mut self, repeat: usize) -> Self {
        self.repeat = repeat;
        self
    }

    pub fn repeat(&self) -> usize {
        self.repeat
    }

    pub fn line_count(&self) -> usize {
        self.lines.len() * self.repeat
    }

    /// Bytes of text including newlines, across all repetitions.
    pub fn byte_count(&self) -> u64 {
        self.text.len() as u64 * self.repeat as u64
    }

    #[inline]
    pub fn line(&self, i: usize) -> &[u8] {
        let (lo, hi) = self.lines[i % self.lines.len()];
        &self.text[lo..hi]
    }

    pub fn lines(&self) -> impl Iterator<Item = &[u8]> + '_ {
        (0..self.line_count()).map(|i| self.line(i))
    }

    /// Line index visited at position `ordinal` of a job.
    ///
    /// A permutation of `0..line_count()` that takes every copy of base line
    /// `j` before base line `j + 1`. A contiguous run of ordinals therefore
    /// covers whole copies of a contiguous run of base lines, so each node
    /// sees the same distinct words whatever the repeat factor.
    #[inline]
    pub fn visit_order(&self, ordinal: usize) -> usize {
        let copy = ordinal % self.repeat;
        copy * self.lines.len() + ordinal / self.repeat
    }
}

pub fn load_corpus(path: &Path, repeat: usize) -> Result<Corpus, WordCountError> {
    let text = fs::read(path).map_err(|source| WordCountError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Corpus::from_text(text).repeated(repeat))
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateSpec {
    pub vocab_size: u64,
    pub total_words: u64,
    pub seed: u64,
}

/// Deterministic Zipf(1.0) text over the words `w0 .. w{vocab_size-1}`,
/// [`WORDS_PER_LINE`] words per line separated by single spaces.
pub fn generate_corpus(spec: GenerateSpec) -> Result<Corpus, WordCountError> {
    if spec.vocab_size == 0 {
        return Err(WordCountError::Config(
            "vocabulary size must be at least 1".into(),
        ));
    }
    let zipf = Zipf::new(spec.vocab_size as f64, 1.0)
        .map_err(|e| WordCountError::Config(format!("zipf distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut text = Vec::with_capacity(spec.total_words as usize * 7);
    for i in 0..spec.total_words {
        if i > 0 {
            text.push(if (i as usize).is_multiple_of(WORDS_PER_LINE) {
                b'\n'
            } else {
                b' '
            });
        }
        let rank = zipf.sample(&mut rng) as u64 - 1;
        write!(TextSink(&mut text), "w{rank}").unwrap();
    }
    if spec.total_words > 0 {
        text.push(b'\n');
    }
    Ok(Corpus::from_text(text))
}

struct TextSink<'a>(&'a mut Vec<u8>);

impl std::fmt::Write for TextSink<'_> {
    fn write_str(&mut self, s: &str) -> std::fmt::Result {
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

/// Splits a line on single spaces, with `std::getline(ss, word, ' ')`
/// semantics: consecutive spaces produce empty tokens and a trailing empty
/// token is not produced. Empty tokens are dropped unless `keep_empty`.
#[inline]
pub fn tokenize(line: &[u8], keep_empty: bool) -> impl Iterator<Item = &[u8]> {
    let body = (!line.is_empty()).then(|| line.strip_suffix(b" ").unwrap_or(line));
    body.into_iter()
        .flat_map(|b| b.split(|&c| c == b' '))
        .filter(move |t| keep_empty || !t.is_empty())
}

/// Word counts ordered by count descending, then word ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts(Vec<(Vec<u8>, i64)>);

impl WordCounts {
    pub fn from_unsorted(mut counts: Vec<(Vec<u8>, i64)>) -> Self {
        counts.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        WordCounts(counts)
    }

    pub fn as_slice(&self) -> &[(Vec<u8>, i64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of all counts.
    pub fn total(&self) -> i64 {
        self.0.iter().map(|(_, c)| c).sum()
    }

    /// Writes one `word\tcount\n` record per entry.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (word, count) in &self.0 {
            w.write_all(word)?;
            writeln!(w, "\t{count}")?;
        }
        w.flush()
    }

    pub fn to_tsv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_tsv(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

/// Single-threaded reference count using a std `HashMap`.
pub fn oracle_wordcount(corpus: &Corpus, keep_empty: bool) -> WordCounts {
    let mut counts: HashMap<&[u8], i64> = HashMap::new();
    for line in corpus.lines() {
        for word in tokenize(line, keep_empty) {
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    WordCounts::from_unsorted(counts.into_iter().map(|(k, v)| (k.to_vec(), v)).collect())
}

pub fn write_output(counts: &WordCounts, path: &Path) -> Result<(), WordCountError> {
    let err = |source| WordCountError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(err)?;
    counts.write_tsv(BufWriter::new(file)).map_err(err)
}

/// Engine parameters for one word-count job.
#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub nodes: usize,
    pub threads: usize,
    pub segments: usize,
    pub segment_capacity: usize,
    pub chunk: usize,
    pub keep_empty: bool,
    pub cache_watermark: Option<usize>,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            nodes: 1,
            threads: 1,
            segments: 64,
            segment_capacity: 1024,
            chunk: DEFAULT_CHUNK,
            keep_empty: false,
            cache_watermark: None,
        }
    }
}

impl EngineSettings {
    pub fn validate(&self) -> Result<(), WordCountError> {
        if self.nodes == 0 {
            return Err(WordCountError::Config("nodes must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(WordCountError::Config("threads must be at least 1".into()));
        }
        if self.chunk == 0 {
            return Err(WordCountError::Config("chunk must be at least 1".into()));
        }
        if !self.segments.is_power_of_two() {
            return Err(WordCountError::Config(format!(
                "segments must be a power of two, got {}",
                self.segments
            )));
        }
        Ok(())
    }

    fn map_config(&self) -> DistMapConfig {
        DistMapConfig {
            segments: self.segments,
            segment_capacity: self.segment_capacity,
            threads: self.threads,
            cache_watermark: self.cache_watermark,
        }
    }
}

/// Result of a job as seen by the root node.
#[derive(Debug, Clone)]
pub struct WordCountRun {
    pub counts: WordCounts,
    /// Metrics of every node, in node order.
    pub node_metrics: Vec<MapMetrics>,
    /// Wall time of map + sync, between the surrounding barriers.
    pub elapsed: Duration,
}

impl WordCountRun {
    pub fn emits(&self) -> u64 {
        self.node_metrics.iter().map(|m| m.emits).sum()
    }

    /// Emitted words per second of map + sync time; zero for an empty job.
    pub fn words_per_sec(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if self.emits() == 0 || secs == 0.0 {
            0.0
        } else {
            self.emits() as f64 / secs
        }
    }
}

/// Runs this node's share of the job. Returns `Some` on node 0 only.
pub fn run_node<C: Cluster>(
    cluster: C,
    corpus: &Corpus,
    settings: &EngineSettings,
) -> Result<Option<WordCountRun>, WordCountError> {
    settings.validate()?;
    let mut target = DistMap::<i64, C>::new(cluster, &settings.map_config())?;
    let range = DistRange::new(0, corpus.line_count() as i64, 1)?;
    let keep_empty = settings.keep_empty;

    target
        .cluster_mut()
        .barrier()
        .map_err(transport("start barrier"))?;
    let started = Instant::now();
    range.mapreduce_with(
        |i, out| {
            for word in tokenize(corpus.line(corpus.visit_order(i as usize)), keep_empty) {
                out.emit(word, 1);
            }
        },
        &Sum,
        &mut target,
        settings.chunk,
    )?;
    target
        .cluster_mut()
        .barrier()
        .map_err(transport("end barrier"))?;
    let elapsed = started.elapsed();

    let entries = target
        .gather_to_root()
        .map_err(shuffle("gathering counts"))?;

    let n = target.cluster().size();
    let mut outgoing = vec![Vec::new(); n];
    outgoing[0] = target.metrics().encode();
    let incoming = target
        .cluster_mut()
        .all_to_all(outgoing)
        .map_err(transport("gathering metrics"))?;
    if target.cluster().self_id() != NodeId(0) {
        return Ok(None);
    }
    let node_metrics = incoming
        .iter()
        .enumerate()
        .map(|(i, b)| MapMetrics::decode(b).ok_or(WordCountError::Metrics(NodeId(i))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(WordCountRun {
        counts: WordCounts::from_unsorted(entries),
        node_metrics,
        elapsed,
    }))
}

/// Runs the job on an in-process cluster of `settings.nodes` nodes.
pub fn run_local(
    corpus: &Corpus,
    settings: &EngineSettings,
) -> Result<WordCountRun, WordCountError> {
    settings.validate()?;
    let results = spawn_local_cluster(settings.nodes, |c| run_node(c, corpus, settings))
        .map_err(transport("local cluster"))?;
    // Report the first real failure rather than a peer's disconnect.
    let mut first_err = None;
    let mut root = None;
    for r in results {
        match r {
            Ok(Some(run)) => root = Some(run),
            Ok(None) => {}
            Err(e) => {
                let replace = match &first_err {
                    None => true,
                    Some(prev) => is_disconnect(prev) && !is_disconnect(&e),
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(root.expect("node 0 returns the run")),
    }
}

fn is_disconnect(e: &WordCountError) -> bool {
    let t = match e {
        WordCountError::Transport { source, .. } => Some(source),
        WordCountError::Shuffle {
            source: DistMapError::Transport(t),
            ..
        } => Some(t),
        WordCountError::MapReduce(MapReduceError::Barrier(t)) => Some(t),
        WordCountError::MapReduce(MapReduceError::Sync(DistMapError::Transport(t))) => Some(t),
        _ => None,
    };
    matches!(t, Some(TransportError::PeerDisconnected { .. }))
}

/// Ordered `key=value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    fields: Vec<(String, String)>,
}

impl Report {
    pub fn build(run: &WordCountRun, corpus: &Corpus, settings: &EngineSettings) -> Report {
        let mut r = Report::default();
        let ms = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1e3);
        let metrics = &run.node_metrics;
        let sum = |f: fn(&MapMetrics) -> u64| metrics.iter().map(f).sum::<u64>();
        // Phases overlap across nodes; report the slowest node.
        let slowest =
            |f: fn(&MapMetrics) -> Duration| metrics.iter().map(f).max().unwrap_or_default();

        r.push("nodes", settings.nodes);
        r.push("threads", settings.threads);
        r.push("segments", settings.segments);
        r.push("chunk", settings.chunk);
        r.push("keep_empty_tokens", settings.keep_empty);
        r.push("lines", corpus.line_count());
        r.push("bytes", corpus.byte_count());
        r.push("repeat", corpus.repeat());
        r.push("distinct_words", run.counts.len());
        r.push("total_count", run.counts.total());
        r.push("emits", run.emits());
        r.push("cache_flushes", sum(|m| m.cache_flushes));
        r.push("shuffled_entries", sum(|m| m.shuffled_entries));
        r.push("shuffled_bytes", sum(|m| m.shuffled_bytes));
        for (i, m) in metrics.iter().enumerate() {
            r.push(format!("node{i}.emits"), m.emits);
            r.push(format!("node{i}.cache_flushes"), m.cache_flushes);
            r.push(format!("node{i}.shuffled_entries"), m.shuffled_entries);
            r.push(format!("node{i}.shuffled_bytes"), m.shuffled_bytes);
        }
        r.push("map_ms", ms(slowest(|m| m.map_time)));
        r.push("cache_sync_ms", ms(slowest(|m| m.cache_sync_time)));
        r.push("shuffle_ms", ms(slowest(|m| m.shuffle_time)));
        r.push("merge_ms", ms(slowest(|m| m.merge_time)));
        r.push("elapsed_ms", ms(run.elapsed));
        r.push("words_per_sec", format!("{:.0}", run.words_per_sec()));
        r
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.fields.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.fields {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Report {
        Report {
            fields: text
                .lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), WordCountError> {
    fs::write(path, report.render()).map_err(|source| WordCountError::Write {
        path: path.to_path_buf(),
        source,
    })
}
