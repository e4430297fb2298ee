use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use mpmr::mapreduce::DEFAULT_CHUNK;
use mpmr::transport::{read_endpoints, SocketCluster};
use mpmr::wordcount::{
    generate_corpus, load_corpus, oracle_wordcount, run_local, run_node, write_output,
    write_report, Corpus, EngineSettings, GenerateSpec, Report, WordCountError, WordCountRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    /// All nodes as threads of this process.
    Local,
    /// One process per node over TCP; see --endpoints and --self-id.
    Sockets,
}

/// Counts words with the mpmr MapReduce engine.
#[derive(Debug, Parser)]
#[command(name = "mpmr-wordcount", version)]
struct Args {
    /// Newline-delimited text to count.
    #[arg(long, value_name = "PATH", required_unless_present = "generate")]
    input: Option<PathBuf>,

    /// Generate a Zipf corpus instead of reading one.
    #[arg(
        long,
        value_name = "VOCAB,WORDS,SEED",
        value_parser = parse_generate,
        conflicts_with = "input"
    )]
    generate: Option<GenerateSpec>,

    /// Concatenate the corpus with itself this many times.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    repeat: u32,

    /// Cluster size. With sockets it defaults to the number of endpoints.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    nodes: Option<u32>,

    /// Mapper threads per node.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Segments per concurrent map (power of two).
    #[arg(long, default_value_t = 64, value_parser = parse_power_of_two)]
    segments: usize,

    /// Lines handed to a mapper thread at a time.
    #[arg(long, default_value_t = DEFAULT_CHUNK, value_parser = parse_positive)]
    chunk: usize,

    /// Count empty tokens between consecutive spaces.
    #[arg(long)]
    keep_empty_tokens: bool,

    #[arg(long, value_enum, default_value_t = Transport::Local)]
    transport: Transport,

    /// One host:port per line; line order gives node ids.
    #[arg(long, value_name = "FILE", required_if_eq("transport", "sockets"))]
    endpoints: Option<PathBuf>,

    /// This process's node id in the endpoints file.
    #[arg(long, value_name = "N", required_if_eq("transport", "sockets"))]
    self_id: Option<usize>,

    /// Seconds to wait for the socket mesh to form.
    #[arg(long, value_name = "SECS", default_value_t = 30)]
    connect_timeout: u64,

    /// Where to write "word<TAB>count" lines; stdout if omitted.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,

    /// Where to write the key=value run report.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,

    /// Recount sequentially and fail if the results differ.
    #[arg(long)]
    oracle_check: bool,
}

fn parse_generate(s: &str) -> Result<GenerateSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [vocab, words, seed] = parts[..] else {
        return Err("expected VOCAB,WORDS,SEED".into());
    };
    let num = |what: &str, v: &str| v.parse::<u64>().map_err(|e| format!("{what} {v:?}: {e}"));
    let spec = GenerateSpec {
        vocab_size: num("vocabulary size", vocab)?,
        total_words: num("word count", words)?,
        seed: num("seed", seed)?,
    };
    if spec.vocab_size == 0 {
        return Err("vocabulary size must be at least 1".into());
    }
    Ok(spec)
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_power_of_two(s: &str) -> Result<usize, String> {
    let v = parse_positive(s)?;
    if !v.is_power_of_two() {
        return Err(format!("{v} is not a power of two"));
    }
    Ok(v)
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Transport(String),
    Mismatch(String),
    Other(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Transport(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::Transport(m)
            | Failure::Mismatch(m)
            | Failure::Other(m) => m,
        }
    }
}

impl From<WordCountError> for Failure {
    fn from(e: WordCountError) -> Self {
        if e.is_config() || matches!(e, WordCountError::Read { .. }) {
            Failure::Config(e.to_string())
        } else if e.is_transport() {
            Failure::Transport(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mpmr-wordcount: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(args: &Args) -> Result<(), Failure> {
    let corpus = match (&args.input, args.generate) {
        (Some(path), _) => load_corpus(path, args.repeat as usize)?,
        (None, Some(spec)) => generate_corpus(spec)?.repeated(args.repeat as usize),
        (None, None) => unreachable!("clap requires --input or --generate"),
    };
    let mut settings = EngineSettings {
        nodes: args.nodes.unwrap_or(1) as usize,
        threads: args.threads as usize,
        segments: args.segments,
        chunk: args.chunk,
        keep_empty: args.keep_empty_tokens,
        ..EngineSettings::default()
    };

    let run = match args.transport {
        Transport::Local => Some(run_local(&corpus, &settings)?),
        Transport::Sockets => run_socket_node(args, &corpus, &mut settings)?,
    };
    // Only the root has results.
    let Some(run) = run else {
        return Ok(());
    };

    match &args.output {
        Some(path) => write_output(&run.counts, path)?,
        None => {
            let stdout = io::stdout().lock();
            run.counts
                .write_tsv(io::BufWriter::new(stdout))
                .map_err(|e| Failure::Other(format!("writing to stdout: {e}")))?;
        }
    }
    let report = Report::build(&run, &corpus, &settings);
    if let Some(path) = &args.report {
        write_report(&report, path)?;
    }
    summarize(&run);

    if args.oracle_check {
        let expected = oracle_wordcount(&corpus, settings.keep_empty);
        if expected.as_slice() != run.counts.as_slice() {
            return Err(Failure::Mismatch(format!(
                "engine result differs from the sequential count ({} vs {} distinct words)",
                run.counts.len(),
                expected.len()
            )));
        }
        eprintln!("oracle check passed");
    }
    Ok(())
}

fn run_socket_node(
    args: &Args,
    corpus: &Corpus,
    settings: &mut EngineSettings,
) -> Result<Option<WordCountRun>, Failure> {
    let path = args.endpoints.as_ref().expect("clap requires --endpoints");
    let self_id = args.self_id.expect("clap requires --self-id");
    let endpoints = read_endpoints(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    if endpoints.is_empty() {
        return Err(Failure::Config(format!(
            "{} lists no endpoints",
            path.display()
        )));
    }
    if let Some(n) = args.nodes {
        if n as usize != endpoints.len() {
            return Err(Failure::Config(format!(
                "--nodes {n} does not match the {} endpoints listed",
                endpoints.len()
            )));
        }
    }
    if self_id >= endpoints.len() {
        return Err(Failure::Config(format!(
            "--self-id {self_id} is out of range for {} endpoints",
            endpoints.len()
        )));
    }
    settings.nodes = endpoints.len();
    settings.validate()?;

    let timeout = Duration::from_secs(args.connect_timeout);
    let cluster = SocketCluster::connect(&endpoints, self_id, timeout)
        .map_err(|e| Failure::Transport(format!("joining the cluster: {e}")))?;
    Ok(run_node(cluster, corpus, settings)?)
}

fn summarize(run: &WordCountRun) {
    let mut err = io::stderr().lock();
    let _ = writeln!(
        err,
        "{} words, {} distinct, {:.1} ms, {:.0} words/s",
        run.counts.total(),
        run.counts.len(),
        run.elapsed.as_secs_f64() * 1e3,
        run.words_per_sec()
    );
}
