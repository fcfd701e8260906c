//! Synthetic decode corpora: a random graph plus utterances with planted
//! reference paths.
//!
//! Every state gets an emitting out-arc (a cycle through all states), so a
//! decode can run for any number of frames, and every state is final, so a
//! complete path exists at every length. Epsilon arcs only go from lower to
//! higher state ids, which rules out epsilon cycles by construction. Each
//! utterance plants a random walk of emitting arcs and boosts the walk's
//! input labels in the posteriors; with the default boost the walk's label
//! sequence is the unique Viterbi optimum, so references are exact.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fst::{CsrFst, FstError, EPSILON};
use crate::posteriors::{PosteriorError, PosteriorMatrix};

/// Input-label alphabet size; label 0 stays reserved for epsilon.
pub const NUM_ILABELS: u32 = 16;

/// Log-likelihood boost on each planted frame's label. Noise spans [-1, 1]
/// and arc weights span [0, 1), so a 6.0 boost makes the planted label
/// sequence win any deviation by a wide margin.
pub const PLANT_SHARPNESS: f64 = 6.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("bad corpus spec: {0}")]
    BadSpec(String),
    #[error("graph: {0}")]
    Fst(#[from] FstError),
    #[error("posteriors: {0}")]
    Posterior(#[from] PosteriorError),
    #[error("reference file line {line}: {msg}")]
    Refs { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Generation parameters; fully determines the corpus together with `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub states: u32,
    /// Total arc count; emitting arcs fill whatever epsilon arcs leave.
    pub arcs: u32,
    /// Fraction of arcs that are epsilon, in [0, 1).
    pub epsilon_frac: f64,
    /// Frames per utterance.
    pub frames: u32,
    pub utts: u32,
    pub seed: u64,
}

/// One utterance: posteriors plus the planted reference words.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub posteriors: PosteriorMatrix,
    pub reference: Vec<u32>,
}

#[derive(Debug)]
pub struct Corpus {
    pub fst: CsrFst,
    pub utterances: Vec<Utterance>,
}

/// Generates a corpus deterministically from its spec.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    if spec.states == 0 {
        return Err(CorpusError::BadSpec("states must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.epsilon_frac) {
        return Err(CorpusError::BadSpec(format!(
            "epsilon_frac must be in [0, 1), got {}",
            spec.epsilon_frac
        )));
    }
    let n_eps = if spec.states < 2 {
        0
    } else {
        (spec.epsilon_frac * spec.arcs as f64).round() as u32
    };
    let n_emit = spec.arcs.saturating_sub(n_eps);
    if n_emit < spec.states {
        return Err(CorpusError::BadSpec(format!(
            "need at least {} emitting arcs to keep every state alive, got {}",
            spec.states, n_emit
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.states;
    let mut text = String::new();

    // Emitting cycle through all states, then random emitting extras.
    let mut emitting: Vec<(u32, u32, u32)> = Vec::with_capacity(n_emit as usize);
    for s in 0..n {
        emitting.push((s, (s + 1) % n, rng.gen_range(1..NUM_ILABELS)));
    }
    for _ in n..n_emit {
        let src = rng.gen_range(0..n);
        let dst = rng.gen_range(0..n);
        emitting.push((src, dst, rng.gen_range(1..NUM_ILABELS)));
    }
    for &(src, dst, il) in &emitting {
        let w: f64 = rng.gen_range(0.0..1.0);
        text.push_str(&format!("{src} {dst} {il} {il} {w}\n"));
    }
    for _ in 0..n_eps {
        let src = rng.gen_range(0..n - 1);
        let dst = rng.gen_range(src + 1..n);
        let w: f64 = rng.gen_range(0.0..1.0);
        text.push_str(&format!("{src} {dst} 0 0 {w}\n"));
    }
    for s in 0..n {
        let fc: f64 = rng.gen_range(0.0..0.5);
        text.push_str(&format!("{s} {fc}\n"));
    }
    let fst = CsrFst::load_text(text.as_bytes())?;

    // Emitting out-arcs per state, for the planted walks. Taken from the
    // normalized graph so a walk is reproducible from the graph alone.
    let mut utterances = Vec::with_capacity(spec.utts as usize);
    for u in 0..spec.utts {
        let mut state = fst.start_state();
        let mut rows = Vec::with_capacity(spec.frames as usize);
        let mut reference = Vec::with_capacity(spec.frames as usize);
        for _ in 0..spec.frames {
            let range = fst.state_emitting(state);
            let pick = rng.gen_range(range.start..range.end);
            let il = fst.arc_ilabel(pick);
            reference.push(fst.arc_olabel(pick));
            state = fst.arc_next(pick);
            let mut row = vec![0.0f32; NUM_ILABELS as usize];
            for v in row.iter_mut().skip(1) {
                *v = rng.gen_range(-1.0f32..1.0);
            }
            row[il as usize] += PLANT_SHARPNESS as f32;
            rows.push(row);
        }
        utterances.push(Utterance {
            id: format!("utt{u:03}"),
            posteriors: PosteriorMatrix::from_rows(NUM_ILABELS, &rows),
            reference,
        });
    }
    Ok(Corpus { fst, utterances })
}

impl Corpus {
    /// Writes `graph.fst`, one `<id>.post` per utterance, `refs.txt`, and a
    /// `manifest.txt` of `id path` lines.
    pub fn write_to_dir<P: AsRef<Path>>(&self, dir: P) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut g = std::io::BufWriter::new(std::fs::File::create(dir.join("graph.fst"))?);
        self.fst.write_text(&mut g)?;
        g.flush()?;
        let mut refs = std::io::BufWriter::new(std::fs::File::create(dir.join("refs.txt"))?);
        let mut manifest =
            std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
        for utt in &self.utterances {
            let file = format!("{}.post", utt.id);
            utt.posteriors.write_path(dir.join(&file))?;
            write!(refs, "{}", utt.id)?;
            for w in &utt.reference {
                write!(refs, " {w}")?;
            }
            writeln!(refs)?;
            writeln!(manifest, "{} {}", utt.id, file)?;
        }
        refs.flush()?;
        manifest.flush()?;
        Ok(())
    }

    /// Loads a corpus written by `write_to_dir`.
    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<Corpus, CorpusError> {
        let dir = dir.as_ref();
        let fst = CsrFst::load_path(dir.join("graph.fst"))?;
        let refs = std::fs::File::open(dir.join("refs.txt"))?;
        let mut utterances = Vec::new();
        for (i, line) in std::io::BufReader::new(refs).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let id = it.next().expect("non-empty line").to_string();
            let mut reference = Vec::new();
            for tok in it {
                let w: u32 = tok.parse().map_err(|_| CorpusError::Refs {
                    line: i + 1,
                    msg: format!("bad word id {tok:?}"),
                })?;
                if w == EPSILON {
                    return Err(CorpusError::Refs {
                        line: i + 1,
                        msg: "word id 0 is reserved".into(),
                    });
                }
                reference.push(w);
            }
            let posteriors = PosteriorMatrix::read_path(dir.join(format!("{id}.post")))?;
            utterances.push(Utterance { id, posteriors, reference });
        }
        Ok(Corpus { fst, utterances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::scheduler::BatchDecoder;
    use std::sync::Arc;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            states: 12,
            arcs: 40,
            epsilon_frac: 0.25,
            frames: 6,
            utts: 3,
            seed: 99,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.fst.to_text_string(), b.fst.to_text_string());
        assert_eq!(a.utterances, b.utterances);
    }

    #[test]
    fn arc_budget_and_epsilon_fraction_are_respected() {
        let c = generate(&small_spec()).unwrap();
        assert_eq!(c.fst.num_arcs(), 40);
        assert_eq!(c.fst.num_arcs() - c.fst.num_emitting_arcs(), 10);

        let none = generate(&CorpusSpec { epsilon_frac: 0.0, ..small_spec() }).unwrap();
        assert_eq!(none.fst.num_emitting_arcs(), none.fst.num_arcs());
    }

    #[test]
    fn every_state_keeps_an_emitting_out_arc_across_seeds() {
        for seed in 0..100 {
            let c = generate(&CorpusSpec {
                states: 10,
                arcs: 30,
                epsilon_frac: 0.3,
                frames: 0,
                utts: 0,
                seed,
            })
            .unwrap();
            for s in 0..c.fst.num_states() {
                assert!(!c.fst.state_emitting(s).is_empty(), "seed {seed} state {s}");
            }
        }
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let err = generate(&CorpusSpec { arcs: 5, ..small_spec() });
        assert!(matches!(err, Err(CorpusError::BadSpec(_))));
        let err = generate(&CorpusSpec { epsilon_frac: 1.0, ..small_spec() });
        assert!(matches!(err, Err(CorpusError::BadSpec(_))));
        let err = generate(&CorpusSpec { states: 0, ..small_spec() });
        assert!(matches!(err, Err(CorpusError::BadSpec(_))));
    }

    #[test]
    fn directory_round_trip_preserves_everything() {
        let c = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_to_dir(dir.path()).unwrap();
        let back = Corpus::load_dir(dir.path()).unwrap();
        assert_eq!(back.fst.to_text_string(), c.fst.to_text_string());
        assert_eq!(back.utterances, c.utterances);
    }

    #[test]
    fn planted_reference_is_the_viterbi_optimum() {
        let c = generate(&small_spec()).unwrap();
        let config = DecoderConfig {
            beam: f64::INFINITY,
            lattice_beam: f64::INFINITY,
            max_active: usize::MAX / 2,
            n_lanes: 1,
            n_channels: 1,
            ..DecoderConfig::default()
        };
        let dec = BatchDecoder::new(Arc::new(c.fst), config).unwrap();
        for utt in &c.utterances {
            let r = dec.decode_utterance(&utt.posteriors).unwrap();
            assert_eq!(r.words, utt.reference, "{}", utt.id);
        }
    }
}
