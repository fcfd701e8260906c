//! Wall-clock harness: throughput over a lane/channel grid and beam sweeps,
//! with CSV output.
//!
//! Numbers are trends, not absolutes; callers wanting stability should take
//! the median over repeated calls. The throughput figure is an xRTF analog:
//! decoded audio seconds (10 ms per frame by convention) over wall seconds.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::corpus::{Corpus, Utterance};
use crate::fst::CsrFst;
use crate::decoder::DecoderConfig;
use crate::lattice::edit_distance;
use crate::scheduler::{BatchDecoder, DecodeError, DecodeResult};

/// Seconds of audio one posterior frame stands for.
pub const SECONDS_PER_FRAME: f64 = 0.01;

/// One utterance's outcome inside a corpus run.
#[derive(Debug)]
pub struct UttResult {
    pub id: String,
    pub outcome: Result<DecodeResult, DecodeError>,
}

/// A timed decode of a whole corpus under one configuration.
#[derive(Debug)]
pub struct CorpusRun {
    pub wall_clock: f64,
    pub total_frames: u64,
    pub results: Vec<UttResult>,
}

/// Decodes every utterance, filling at most `n_channels` channels at a time.
/// The clock covers submission through finalization. A bad utterance (wrong
/// posterior width, mid-decode failure) is reported in its slot and the rest
/// of the corpus still runs; only setup errors abort.
pub fn decode_corpus(
    fst: &Arc<CsrFst>,
    utterances: &[Utterance],
    config: &DecoderConfig,
) -> Result<CorpusRun, DecodeError> {
    let decoder = BatchDecoder::new(Arc::clone(fst), config.clone())?;
    let total_frames: u64 =
        utterances.iter().map(|u| u.posteriors.num_frames() as u64).sum();
    let mut results = Vec::with_capacity(utterances.len());
    let start = Instant::now();
    for wave in utterances.chunks(config.n_channels.max(1)) {
        let mut fed: Vec<(usize, u32)> = Vec::with_capacity(wave.len());
        let mut outcomes: Vec<Option<Result<DecodeResult, DecodeError>>> =
            (0..wave.len()).map(|_| None).collect();
        for (i, utt) in wave.iter().enumerate() {
            let id = decoder.open_channel()?;
            match decoder
                .submit_frames(id, &utt.posteriors)
                .and_then(|_| decoder.finish_channel(id))
            {
                Ok(()) => fed.push((i, id)),
                Err(e) => {
                    let _ = decoder.close_channel(id);
                    outcomes[i] = Some(Err(e));
                }
            }
        }
        decoder.drain();
        for (i, id) in fed {
            outcomes[i] = Some(decoder.finalize(id));
        }
        for (utt, outcome) in wave.iter().zip(outcomes) {
            results.push(UttResult {
                id: utt.id.clone(),
                outcome: outcome.expect("every slot filled"),
            });
        }
    }
    let wall_clock = start.elapsed().as_secs_f64();
    Ok(CorpusRun { wall_clock, total_frames, results })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    /// Grid point label, `nl<lanes>_nc<channels>` style.
    pub config: String,
    pub wall_clock: f64,
    /// Audio-seconds decoded per wall second.
    pub xrtf: f64,
}

/// Times the corpus once per `(n_lanes, n_channels)` grid point.
pub fn bench_throughput(
    corpus: &Corpus,
    grid: &[(usize, usize)],
    base: &DecoderConfig,
) -> Result<Vec<ThroughputRow>, DecodeError> {
    let fst = Arc::new(corpus.fst.clone());
    let mut rows = Vec::with_capacity(grid.len());
    for &(n_lanes, n_channels) in grid {
        let config = DecoderConfig { n_lanes, n_channels, ..base.clone() };
        let run = decode_corpus(&fst, &corpus.utterances, &config)?;
        let audio = run.total_frames as f64 * SECONDS_PER_FRAME;
        rows.push(ThroughputRow {
            config: format!("nl{n_lanes}_nc{n_channels}"),
            wall_clock: run.wall_clock,
            xrtf: if run.wall_clock > 0.0 { audio / run.wall_clock } else { 0.0 },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamRow {
    pub beam: f64,
    pub wall_clock: f64,
    /// Corpus word error rate: summed edit distance over summed ref length.
    pub wer: f64,
}

/// Times the corpus once per beam; `lattice_beam` shrinks along with tight
/// beams to stay valid. A failed utterance counts as a fully wrong one.
pub fn bench_beam_sweep(
    corpus: &Corpus,
    beams: &[f64],
    base: &DecoderConfig,
) -> Result<Vec<BeamRow>, DecodeError> {
    let fst = Arc::new(corpus.fst.clone());
    let mut rows = Vec::with_capacity(beams.len());
    for &beam in beams {
        let config = DecoderConfig {
            beam,
            lattice_beam: base.lattice_beam.min(beam),
            ..base.clone()
        };
        let run = decode_corpus(&fst, &corpus.utterances, &config)?;
        let mut errors = 0usize;
        let mut ref_len = 0usize;
        for (utt, res) in corpus.utterances.iter().zip(&run.results) {
            ref_len += utt.reference.len();
            errors += match &res.outcome {
                Ok(r) => edit_distance(&utt.reference, &r.words),
                Err(_) => utt.reference.len(),
            };
        }
        rows.push(BeamRow {
            beam,
            wall_clock: run.wall_clock,
            wer: if ref_len > 0 { errors as f64 / ref_len as f64 } else { 0.0 },
        });
    }
    Ok(rows)
}

pub fn throughput_csv(rows: &[ThroughputRow]) -> String {
    let mut out = String::from("config,wall_clock,xrtf\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.config, r.wall_clock, r.xrtf);
    }
    out
}

pub fn beam_sweep_csv(rows: &[BeamRow]) -> String {
    let mut out = String::from("beam,wall_clock,wer\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.beam, r.wall_clock, r.wer);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};

    fn corpus() -> Corpus {
        generate(&CorpusSpec {
            states: 12,
            arcs: 40,
            epsilon_frac: 0.2,
            frames: 8,
            utts: 4,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn repeated_runs_decode_identically() {
        let c = corpus();
        let fst = Arc::new(c.fst.clone());
        let cfg = DecoderConfig { n_lanes: 1, n_channels: 2, ..DecoderConfig::default() };
        let a = decode_corpus(&fst, &c.utterances, &cfg).unwrap();
        let b = decode_corpus(&fst, &c.utterances, &cfg).unwrap();
        assert_eq!(a.total_frames, 32);
        for (x, y) in a.results.iter().zip(&b.results) {
            let (x, y) = (x.outcome.as_ref().unwrap(), y.outcome.as_ref().unwrap());
            assert_eq!(x.words, y.words);
            assert_eq!(x.best_cost, y.best_cost);
            assert_eq!(x.lattice, y.lattice);
        }
    }

    #[test]
    fn throughput_rows_cover_the_grid() {
        let c = corpus();
        let rows =
            bench_throughput(&c, &[(1, 1), (2, 4)], &DecoderConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].config, "nl1_nc1");
        assert_eq!(rows[1].config, "nl2_nc4");
        for r in &rows {
            assert!(r.wall_clock > 0.0);
            assert!(r.xrtf > 0.0);
        }
    }

    #[test]
    fn empty_corpus_yields_header_only_csv() {
        let empty = generate(&CorpusSpec {
            states: 4,
            arcs: 8,
            epsilon_frac: 0.0,
            frames: 0,
            utts: 0,
            seed: 1,
        })
        .unwrap();
        let rows = bench_throughput(&empty, &[], &DecoderConfig::default()).unwrap();
        assert_eq!(throughput_csv(&rows), "config,wall_clock,xrtf\n");
        let rows = bench_beam_sweep(&empty, &[], &DecoderConfig::default()).unwrap();
        assert_eq!(beam_sweep_csv(&rows), "beam,wall_clock,wer\n");
    }

    #[test]
    fn wide_beam_recovers_the_planted_references() {
        let c = corpus();
        let rows = bench_beam_sweep(&c, &[15.0], &DecoderConfig::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].wer, 0.0);
    }

    #[test]
    fn csv_rows_are_parseable() {
        let c = corpus();
        let rows = bench_beam_sweep(&c, &[8.0, 15.0], &DecoderConfig::default()).unwrap();
        let csv = beam_sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("beam,wall_clock,wer"));
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 3);
            cols[0].parse::<f64>().unwrap();
            cols[1].parse::<f64>().unwrap();
            cols[2].parse::<f64>().unwrap();
        }
    }
}
