//! `lattix` command-line frontend: corpus generation, decoding, benchmarks.
//!
//! Exit codes: 0 full success, 1 any runtime failure (bad input file, failed
//! utterance), 2 invalid invocation (bad flags or flag combinations).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use lattix_core::bench::{bench_beam_sweep, bench_throughput, beam_sweep_csv, throughput_csv};
use lattix_core::corpus::{generate, Corpus, CorpusError, CorpusSpec, Utterance};
use lattix_core::decoder::DecoderConfig;
use lattix_core::fst::CsrFst;
use lattix_core::lattice::{oracle_wer, wer};
use lattix_core::posteriors::PosteriorMatrix;
use lattix_core::reference::{serial_decode, SerialConfig};

#[derive(Parser)]
#[command(name = "lattix", version, about = "Batched streaming WFST decoder with lattice output")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: graph, posteriors, references
    Generate(GenerateArgs),
    /// Decode posterior files against a graph
    Decode(DecodeArgs),
    /// Measure decoding speed trends
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    states: u32,
    /// Total arcs, emitting plus epsilon
    #[arg(long)]
    arcs: u32,
    /// Fraction of arcs that are epsilon, in [0, 1)
    #[arg(long = "epsilon-frac", default_value_t = 0.0)]
    epsilon_frac: f64,
    /// Frames per utterance
    #[arg(long)]
    frames: u32,
    /// Utterance count
    #[arg(long)]
    utts: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    /// Batched lane decoder with lattice output
    Parallel,
    /// Single-threaded reference decoder, one-best only
    Serial,
}

/// Decoder tuning knobs; defaults mirror `DecoderConfig::default`.
#[derive(Args)]
struct TuningArgs {
    /// Beam width; "inf" disables beam pruning
    #[arg(long, default_value_t = 15.0)]
    beam: f64,
    /// Lattice slack kept around the best path; at most the beam
    #[arg(long = "lattice-beam", default_value_t = 8.0)]
    lattice_beam: f64,
    /// Token budget per frame
    #[arg(long = "max-active", default_value_t = 10_000)]
    max_active: usize,
    /// Parallel compute lanes
    #[arg(long, default_value_t = 4)]
    nlanes: usize,
    /// Utterance channels multiplexed onto the lanes
    #[arg(long, default_value_t = 64)]
    nchannels: usize,
    /// Frontier size at which epsilon expansion goes wide
    #[arg(long = "ne-persistent-threshold", default_value_t = 4000)]
    ne_persistent_threshold: usize,
    /// Histogram resolution for the max-active cutoff
    #[arg(long = "histogram-bins", default_value_t = 256)]
    histogram_bins: usize,
    /// Debug: let duplicate tokens re-expand instead of recombining
    #[arg(long = "no-soft-pruning")]
    no_soft_pruning: bool,
    /// Segment queue depth before emission back-pressures
    #[arg(long = "emit-high-water", default_value_t = 8192)]
    emit_high_water: usize,
}

impl TuningArgs {
    fn to_config(&self) -> DecoderConfig {
        DecoderConfig {
            beam: self.beam,
            lattice_beam: self.lattice_beam,
            max_active: self.max_active,
            n_lanes: self.nlanes,
            n_channels: self.nchannels,
            ne_persistent_threshold: self.ne_persistent_threshold,
            histogram_bins: self.histogram_bins,
            soft_pruning: !self.no_soft_pruning,
            emit_high_water: self.emit_high_water,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    /// Decode graph in text format
    #[arg(long)]
    graph: PathBuf,
    /// Posterior files; each utterance is named after its file stem
    posteriors: Vec<PathBuf>,
    /// Manifest of `utt_id path` lines, paths relative to the manifest
    #[arg(long)]
    list: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Engine::Parallel)]
    engine: Engine,
    /// Output directory for transcripts.txt and per-utterance .lat files
    #[arg(long)]
    out: PathBuf,
    /// Reference transcripts (`utt_id w1 w2 ...` lines), enables metrics
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Write per-utterance `utt_id,wer,ower,density,best_cost` CSV here
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    which: BenchCommand,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Wall clock and throughput over a lanes/channels grid
    Throughput {
        /// Corpus directory produced by `generate`
        #[arg(long)]
        corpus: PathBuf,
        /// Grid points `LANESxCHANNELS`, comma separated
        #[arg(long, default_value = "1x64,4x64")]
        grid: String,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: TuningArgs,
    },
    /// Wall clock and corpus WER per beam
    BeamSweep {
        /// Corpus directory produced by `generate`
        #[arg(long)]
        corpus: PathBuf,
        /// Beams to sweep, comma separated
        #[arg(long, default_value = "6,10,15")]
        beams: String,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: TuningArgs,
    },
}

const EXIT_FAILURES: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn invalid(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    env_logger::init();
    lattix_core::init_thread_pool();
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURES)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    if args.states == 0 || args.arcs == 0 || args.frames == 0 || args.utts == 0 {
        return Ok(invalid("states, arcs, frames, and utts must all be positive"));
    }
    let spec = CorpusSpec {
        states: args.states,
        arcs: args.arcs,
        epsilon_frac: args.epsilon_frac,
        frames: args.frames,
        utts: args.utts,
        seed: args.seed,
    };
    let corpus = match generate(&spec) {
        Ok(c) => c,
        Err(CorpusError::BadSpec(msg)) => return Ok(invalid(&msg)),
        Err(e) => return Err(e.into()),
    };
    corpus
        .write_to_dir(&args.out)
        .with_context(|| format!("writing corpus to {}", args.out.display()))?;
    println!(
        "wrote graph ({} states, {} arcs) and {} utterances of {} frames to {}",
        corpus.fst.num_states(),
        corpus.fst.num_arcs(),
        corpus.utterances.len(),
        args.frames,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Reads `utt_id w1 w2 ...` lines.
fn load_refs(path: &Path) -> anyhow::Result<HashMap<String, Vec<u32>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading references {}", path.display()))?;
    let mut refs = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id = it.next().expect("non-empty line").to_string();
        let words = it
            .map(|w| w.parse::<u32>())
            .collect::<Result<Vec<u32>, _>>()
            .with_context(|| format!("{}:{}: bad word id", path.display(), i + 1))?;
        refs.insert(id, words);
    }
    Ok(refs)
}

/// Resolves the utterance list: positional paths (named by file stem) or a
/// `--list` manifest with explicit ids.
fn gather_inputs(args: &DecodeArgs) -> anyhow::Result<Result<Vec<(String, PathBuf)>, String>> {
    match (&args.list, args.posteriors.is_empty()) {
        (Some(_), false) => {
            Ok(Err("pass posterior files either positionally or via --list, not both".into()))
        }
        (None, true) => Ok(Err("no posterior files given".into())),
        (None, false) => Ok(Ok(args
            .posteriors
            .iter()
            .map(|p| {
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.to_string_lossy().into_owned());
                (id, p.clone())
            })
            .collect())),
        (Some(list), true) => {
            let text = std::fs::read_to_string(list)
                .with_context(|| format!("reading manifest {}", list.display()))?;
            let base = list.parent().unwrap_or(Path::new("."));
            let mut inputs = Vec::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let mut it = line.split_whitespace();
                let id = it.next().expect("non-empty line").to_string();
                let Some(raw) = it.next() else {
                    anyhow::bail!("manifest {}: line {:?} has no path", list.display(), line);
                };
                let path = PathBuf::from(raw);
                let path = if path.is_absolute() { path } else { base.join(path) };
                inputs.push((id, path));
            }
            Ok(Ok(inputs))
        }
    }
}

fn cmd_decode(args: DecodeArgs) -> anyhow::Result<ExitCode> {
    let config = args.tuning.to_config();
    if let Err(e) = config.validate() {
        return Ok(invalid(&e.to_string()));
    }
    if args.metrics.is_some() && args.refs.is_none() {
        return Ok(invalid("--metrics needs --refs for the word error rates"));
    }
    if args.metrics.is_some() && args.engine == Engine::Serial {
        return Ok(invalid("--metrics needs lattices; use --engine parallel"));
    }
    let inputs = match gather_inputs(&args)? {
        Ok(inputs) => inputs,
        Err(msg) => return Ok(invalid(&msg)),
    };
    let refs = match &args.refs {
        Some(p) => Some(load_refs(p)?),
        None => None,
    };
    let fst = Arc::new(
        CsrFst::load_path(&args.graph)
            .with_context(|| format!("loading graph {}", args.graph.display()))?,
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;

    // Unreadable posterior files fail their utterance, not the run.
    let mut failures = 0usize;
    let mut utterances: Vec<Utterance> = Vec::new();
    for (id, path) in inputs {
        match PosteriorMatrix::read_path(&path) {
            Ok(posteriors) => {
                utterances.push(Utterance { id, posteriors, reference: Vec::new() })
            }
            Err(e) => {
                eprintln!("utt {id}: cannot read {}: {e}", path.display());
                failures += 1;
            }
        }
    }

    let mut transcripts = String::new();
    let mut metrics_csv = String::from("utt_id,wer,ower,density,best_cost\n");
    match args.engine {
        Engine::Parallel => {
            let run = lattix_core::bench::decode_corpus(&fst, &utterances, &config)?;
            for (utt, res) in utterances.iter().zip(&run.results) {
                match &res.outcome {
                    Ok(r) => {
                        push_transcript(&mut transcripts, &utt.id, &r.words);
                        let lat_path = args.out.join(format!("{}.lat", utt.id));
                        let mut f = std::io::BufWriter::new(
                            std::fs::File::create(&lat_path)
                                .with_context(|| format!("creating {}", lat_path.display()))?,
                        );
                        r.lattice.write_text(&mut f)?;
                        f.flush()?;
                        if let Some(refs) = &refs {
                            let empty = Vec::new();
                            let reference = refs.get(&utt.id).unwrap_or(&empty);
                            let ower = oracle_wer(&r.lattice, reference)?;
                            let _ = writeln!(
                                metrics_csv,
                                "{},{},{},{},{}",
                                utt.id,
                                wer(reference, &r.words),
                                ower,
                                r.lattice.density(),
                                r.best_cost
                            );
                        }
                    }
                    Err(e) => {
                        eprintln!("utt {}: {e}", utt.id);
                        failures += 1;
                    }
                }
            }
        }
        Engine::Serial => {
            let serial = SerialConfig { beam: config.beam, max_active: config.max_active };
            for utt in &utterances {
                match serial_decode(&fst, &utt.posteriors, &serial) {
                    Ok(r) => push_transcript(&mut transcripts, &utt.id, &r.best_path_words),
                    Err(e) => {
                        eprintln!("utt {}: {e}", utt.id);
                        failures += 1;
                    }
                }
            }
        }
    }

    let transcript_path = args.out.join("transcripts.txt");
    std::fs::write(&transcript_path, transcripts)
        .with_context(|| format!("writing {}", transcript_path.display()))?;
    if let Some(metrics_path) = &args.metrics {
        std::fs::write(metrics_path, metrics_csv)
            .with_context(|| format!("writing {}", metrics_path.display()))?;
    }
    let decoded = utterances.len() + failures;
    println!("decoded {} utterances, {failures} failed", decoded - failures);
    Ok(if failures > 0 { ExitCode::from(EXIT_FAILURES) } else { ExitCode::SUCCESS })
}

fn push_transcript(out: &mut String, id: &str, words: &[u32]) {
    out.push_str(id);
    for w in words {
        let _ = write!(out, " {w}");
    }
    out.push('\n');
}

fn parse_grid(grid: &str) -> Result<Vec<(usize, usize)>, String> {
    let mut points = Vec::new();
    for part in grid.split(',').filter(|p| !p.trim().is_empty()) {
        let (l, c) = part
            .trim()
            .split_once('x')
            .ok_or_else(|| format!("grid point {part:?} is not LANESxCHANNELS"))?;
        let l: usize = l.parse().map_err(|_| format!("bad lane count {l:?}"))?;
        let c: usize = c.parse().map_err(|_| format!("bad channel count {c:?}"))?;
        points.push((l, c));
    }
    Ok(points)
}

fn parse_beams(beams: &str) -> Result<Vec<f64>, String> {
    beams
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad beam {p:?}")))
        .collect()
}

fn write_csv(out: Option<&PathBuf>, csv: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, csv)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<ExitCode> {
    match args.which {
        BenchCommand::Throughput { corpus, grid, out, tuning } => {
            let config = tuning.to_config();
            if let Err(e) = config.validate() {
                return Ok(invalid(&e.to_string()));
            }
            let points = match parse_grid(&grid) {
                Ok(p) => p,
                Err(msg) => return Ok(invalid(&msg)),
            };
            let corpus = Corpus::load_dir(&corpus)
                .with_context(|| format!("loading corpus {}", corpus.display()))?;
            let rows = bench_throughput(&corpus, &points, &config)?;
            write_csv(out.as_ref(), &throughput_csv(&rows))?;
            Ok(ExitCode::SUCCESS)
        }
        BenchCommand::BeamSweep { corpus, beams, out, tuning } => {
            let config = tuning.to_config();
            if let Err(e) = config.validate() {
                return Ok(invalid(&e.to_string()));
            }
            let beams = match parse_beams(&beams) {
                Ok(b) => b,
                Err(msg) => return Ok(invalid(&msg)),
            };
            let corpus = Corpus::load_dir(&corpus)
                .with_context(|| format!("loading corpus {}", corpus.display()))?;
            let rows = bench_beam_sweep(&corpus, &beams, &config)?;
            write_csv(out.as_ref(), &beam_sweep_csv(&rows))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_strings_parse_or_explain() {
        assert_eq!(parse_grid("1x64,8x64").unwrap(), vec![(1, 64), (8, 64)]);
        assert_eq!(parse_grid("").unwrap(), vec![]);
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("axb").is_err());
    }

    #[test]
    fn beam_lists_parse_including_inf() {
        assert_eq!(parse_beams("6,10,15").unwrap(), vec![6.0, 10.0, 15.0]);
        assert_eq!(parse_beams("inf").unwrap(), vec![f64::INFINITY]);
        assert!(parse_beams("x").is_err());
    }
}
