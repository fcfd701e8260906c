//! lattix: a batched, streaming WFST Viterbi decoder with lattice output.
//!
//! The decode graph lives in a flat CSR layout ([`fst::CsrFst`]) with each
//! state's emitting arcs stored ahead of its epsilon arcs. Per-frame acoustic
//! scores come from a [`posteriors::PosteriorMatrix`]. The frame pipeline
//! ([`decoder`]) expands emitting arcs into pre-assigned output slots, prunes
//! with an adaptive histogram beam, converges epsilon chains, and hands each
//! frame's surviving tokens to the lattice machinery ([`lattice`]), which
//! groups duplicates, picks per-state representatives, and streams segments
//! to a consumer that never blocks the compute path. Many utterances share a
//! small pool of compute lanes through the channel scheduler ([`scheduler`]).
//!
//! Costs are negative log probabilities combined in the tropical semiring:
//! lower is better, path cost is the sum of graph weights minus acoustic
//! log-likelihoods.

pub mod bench;
pub mod corpus;
pub mod decoder;
pub mod fst;
pub mod lattice;
pub mod posteriors;
pub mod reference;
pub mod scheduler;

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "LATTIX_THREADS";

/// Initializes the global worker pool, honoring `LATTIX_THREADS` when set.
///
/// Defaults to the hardware thread count. Safe to call more than once; only
/// the first call takes effect.
pub fn init_thread_pool() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let _ = builder.build_global();
}
