//! The per-frame decode pipeline: expand, prune, converge, group.
//!
//! A frame advances in four stages. `expand_emitting` walks every frontier
//! token's emitting arcs, scoring candidates against the posterior row and
//! dropping those provably outside the beam as it goes. `set_beam_via_max_active`
//! builds a cost histogram and tightens the cutoff so roughly `max_active`
//! tokens survive. `contract` keeps candidates strictly under the cutoff.
//! `expand_nonemitting` then relaxes epsilon arcs in rounds, switching
//! between a single sequential worker and a data-parallel sweep depending on
//! frontier size; both produce identical token stores. The surviving store is
//! grouped into a [`LatticeSegment`] and the next frame's frontier is read
//! back off the segment.
//!
//! All costs combine as `token.cost + arc_weight - loglike`; the expression
//! is kept identical everywhere so independent implementations agree bitwise.

use rayon::prelude::*;
use thiserror::Error;

use crate::fst::CsrFst;
use crate::lattice::{preprocess_segment, LatticeSegment, PreprocScratch};

/// Sentinel for "no predecessor token".
pub const NO_TOKEN: u32 = u32::MAX;
/// Sentinel for "no arc" (only the start token carries it).
pub const NO_ARC: u32 = u32::MAX;

/// One search token. `prev_token` holds a group index: into the previous
/// slot's segment for emitting tokens, into the same slot for epsilon tokens
/// (a raw store index until the slot is grouped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub fst_state: u32,
    pub cost: f64,
    pub prev_token: u32,
    pub arc_idx: u32,
}

/// One frontier entry feeding the next frame's expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierEntry {
    pub state: u32,
    pub cost: f64,
    /// Group index of this entry's state in the segment just emitted.
    pub seg_token: u32,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("beam must be positive (got {0})")]
    Beam(f64),
    #[error("lattice_beam must be in (0, beam], got {0} with beam {1}")]
    LatticeBeam(f64, f64),
    #[error("max_active must be at least 1")]
    MaxActive,
    #[error("histogram_bins must be at least 1")]
    HistogramBins,
    #[error("need 1 <= n_lanes <= n_channels, got {lanes} lanes for {channels} channels")]
    Lanes { lanes: usize, channels: usize },
    #[error("emit_high_water must be at least 1")]
    EmitHighWater,
}

/// Decoder tuning knobs. `Default` gives the standard operating point.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Pruning width around the frame best; `f64::INFINITY` disables it.
    pub beam: f64,
    /// Lattice width: alternatives within this of the best survive.
    pub lattice_beam: f64,
    /// Soft per-frame cap on surviving tokens.
    pub max_active: usize,
    /// Compute lanes decoding concurrently.
    pub n_lanes: usize,
    /// Resident channels (utterances in flight).
    pub n_channels: usize,
    /// Epsilon frontier size at which rounds go data-parallel.
    pub ne_persistent_threshold: usize,
    /// Histogram resolution for the max-active cutoff.
    pub histogram_bins: usize,
    /// Recombine the frontier to one token per state between frames.
    pub soft_pruning: bool,
    /// Segment queue depth before emission blocks the producer.
    pub emit_high_water: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 15.0,
            lattice_beam: 8.0,
            max_active: 10_000,
            n_lanes: 4,
            n_channels: 64,
            ne_persistent_threshold: 4000,
            histogram_bins: 256,
            soft_pruning: true,
            emit_high_water: 8192,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beam.is_nan() || self.beam <= 0.0 {
            return Err(ConfigError::Beam(self.beam));
        }
        if self.lattice_beam.is_nan() || self.lattice_beam <= 0.0 || self.lattice_beam > self.beam
        {
            return Err(ConfigError::LatticeBeam(self.lattice_beam, self.beam));
        }
        if self.max_active == 0 {
            return Err(ConfigError::MaxActive);
        }
        if self.histogram_bins == 0 {
            return Err(ConfigError::HistogramBins);
        }
        if self.n_lanes == 0 || self.n_lanes > self.n_channels {
            return Err(ConfigError::Lanes { lanes: self.n_lanes, channels: self.n_channels });
        }
        if self.emit_high_water == 0 {
            return Err(ConfigError::EmitHighWater);
        }
        Ok(())
    }
}

/// Steady-state decode memory estimate in bytes: 64 B per channel-resident
/// token slot, 544 B per lane working-set slot, and 1 KiB of fixed lane
/// overhead. Graph storage and transient scratch are separate.
pub fn state_memory_bytes(max_active: usize, n_channels: usize, n_lanes: usize) -> u64 {
    let a = max_active as u64;
    64 * a * n_channels as u64 + 544 * a * n_lanes as u64 + 1024 * n_lanes as u64
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum DecodeFailure {
    #[error("no token survived pruning at frame {frame}")]
    NoSurvivors { frame: u32 },
    #[error("epsilon expansion did not converge at frame {frame}")]
    Divergence { frame: u32 },
}

/// Per-frame accounting, kept per channel for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSummary {
    pub frame_index: u32,
    /// Candidates that survived the expansion-time estimate.
    pub active_tokens: u32,
    pub best_cost: f64,
    /// Tokens kept by the final cutoff, before epsilon expansion.
    pub post_contract_tokens: u32,
    /// Population of the histogram bin the cutoff landed in (0 when the
    /// max-active stage did not engage).
    pub cutoff_bin_tokens: u32,
    pub effective_beam: f64,
    pub ne_wide_rounds: u32,
    pub ne_persistent_rounds: u32,
}

struct BeamFrame {
    best_cost: f64,
    cutoff: f64,
    effective_beam: f64,
    cutoff_bin_count: u32,
}

/// State-indexed scalar map with O(1) reset via epoch stamps.
#[derive(Debug, Default)]
struct StateScalars {
    value: Vec<f64>,
    aux: Vec<u32>,
    stamp: Vec<u32>,
    epoch: u32,
}

impl StateScalars {
    fn ensure(&mut self, n: usize) {
        if self.value.len() < n {
            self.value.resize(n, f64::INFINITY);
            self.aux.resize(n, 0);
            self.stamp.resize(n, 0);
        }
    }

    fn begin(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
    }

    fn get(&self, s: u32) -> f64 {
        if self.stamp[s as usize] == self.epoch {
            self.value[s as usize]
        } else {
            f64::INFINITY
        }
    }

    fn set(&mut self, s: u32, v: f64, aux: u32) {
        self.value[s as usize] = v;
        self.aux[s as usize] = aux;
        self.stamp[s as usize] = self.epoch;
    }

    fn aux_of(&self, s: u32) -> u32 {
        self.aux[s as usize]
    }
}

/// Reusable per-lane working set; contents are scratch, never carried
/// between frames.
#[derive(Debug, Default)]
pub struct LaneState {
    aux_q: Vec<Token>,
    store: Vec<Token>,
    state_best: StateScalars,
    round_best: StateScalars,
    histogram: Vec<u32>,
    frontier: Vec<u32>,
    improved: Vec<u32>,
    cands: Vec<(u32, f64, u32, u32)>,
    preproc: PreprocScratch,
}

impl LaneState {
    pub fn new() -> Self {
        LaneState::default()
    }
}

/// Output of advancing one frame: the slot's segment, the next frontier, and
/// the frame's accounting.
#[derive(Debug)]
pub struct FrameOutput {
    pub segment: LatticeSegment,
    pub main_q: Vec<FrontierEntry>,
    pub summary: FrameSummary,
}

/// Builds slot 0: the start token plus its epsilon closure.
pub fn init_slot_zero(
    fst: &CsrFst,
    config: &DecoderConfig,
    lane: &mut LaneState,
) -> Result<(LatticeSegment, Vec<FrontierEntry>), DecodeFailure> {
    lane.store.clear();
    lane.store.push(Token {
        fst_state: fst.start_state(),
        cost: 0.0,
        prev_token: NO_TOKEN,
        arc_idx: NO_ARC,
    });
    let cutoff = 0.0 + config.beam;
    expand_nonemitting(fst, config, lane, cutoff, 0)?;
    let segment = preprocess_segment(fst, 0, &lane.store, config.lattice_beam, &mut lane.preproc);
    let main_q = frontier_from_segment(&segment, config.soft_pruning);
    Ok((segment, main_q))
}

/// Advances one posterior frame: consumes `row` (frame `frame_index`), emits
/// the segment for slot `frame_index + 1`.
pub fn advance_frame(
    fst: &CsrFst,
    config: &DecoderConfig,
    lane: &mut LaneState,
    main_q: &[FrontierEntry],
    row: &[f32],
    frame_index: u32,
) -> Result<FrameOutput, DecodeFailure> {
    expand_emitting(fst, config, lane, main_q, row);
    if lane.aux_q.is_empty() {
        return Err(DecodeFailure::NoSurvivors { frame: frame_index });
    }
    let active_tokens = lane.aux_q.len() as u32;
    let beam_frame = set_beam_via_max_active(config, lane);
    contract(lane, beam_frame.cutoff);
    debug_assert!(!lane.store.is_empty(), "the best candidate always survives");
    let post_contract_tokens = lane.store.len() as u32;
    let (ne_wide_rounds, ne_persistent_rounds) =
        expand_nonemitting(fst, config, lane, beam_frame.cutoff, frame_index)?;
    let segment = preprocess_segment(
        fst,
        frame_index + 1,
        &lane.store,
        config.lattice_beam,
        &mut lane.preproc,
    );
    let main_q = frontier_from_segment(&segment, config.soft_pruning);
    Ok(FrameOutput {
        segment,
        main_q,
        summary: FrameSummary {
            frame_index,
            active_tokens,
            best_cost: beam_frame.best_cost,
            post_contract_tokens,
            cutoff_bin_tokens: beam_frame.cutoff_bin_count,
            effective_beam: beam_frame.effective_beam,
            ne_wide_rounds,
            ne_persistent_rounds,
        },
    })
}

/// Reads the next frontier off a finished segment: representatives only
/// under soft pruning, every surviving token otherwise.
pub fn frontier_from_segment(seg: &LatticeSegment, soft_pruning: bool) -> Vec<FrontierEntry> {
    let mut q = Vec::new();
    for g in 0..seg.num_groups() {
        if soft_pruning {
            let t = seg.rep_token(g);
            q.push(FrontierEntry { state: seg.states[g], cost: t.cost, seg_token: g as u32 });
        } else {
            for t in seg.group_tokens(g) {
                q.push(FrontierEntry { state: t.fst_state, cost: t.cost, seg_token: g as u32 });
            }
        }
    }
    q
}

fn expand_emitting(
    fst: &CsrFst,
    config: &DecoderConfig,
    lane: &mut LaneState,
    main_q: &[FrontierEntry],
    row: &[f32],
) {
    lane.aux_q.clear();
    // Running estimate of the eventual cutoff. Anything at or above
    // running_best + beam also fails the final cutoff and sits outside the
    // histogram range, so early drops are invisible downstream.
    let mut running_best = f64::INFINITY;
    for entry in main_q {
        for a in fst.state_emitting(entry.state) {
            let ll = f64::from(row[fst.arc_ilabel(a) as usize]);
            let cand = entry.cost + fst.arc_weight(a) - ll;
            if cand < running_best + config.beam {
                lane.aux_q.push(Token {
                    fst_state: fst.arc_next(a),
                    cost: cand,
                    prev_token: entry.seg_token,
                    arc_idx: a as u32,
                });
                if cand < running_best {
                    running_best = cand;
                }
            }
        }
    }
}

fn set_beam_via_max_active(config: &DecoderConfig, lane: &mut LaneState) -> BeamFrame {
    let mut best = f64::INFINITY;
    let mut worst = f64::NEG_INFINITY;
    for t in &lane.aux_q {
        best = best.min(t.cost);
        worst = worst.max(t.cost);
    }
    if lane.aux_q.len() <= config.max_active {
        return BeamFrame {
            best_cost: best,
            cutoff: best + config.beam,
            effective_beam: config.beam,
            cutoff_bin_count: 0,
        };
    }
    // Histogram range: [best, best + beam), or the observed span when the
    // beam is infinite.
    let width = if config.beam.is_finite() { config.beam } else { worst - best };
    if width <= 0.0 {
        // Every candidate ties: no cost cutoff can separate them.
        return BeamFrame {
            best_cost: best,
            cutoff: f64::INFINITY,
            effective_beam: f64::INFINITY,
            cutoff_bin_count: lane.aux_q.len() as u32,
        };
    }
    let bins = config.histogram_bins;
    lane.histogram.clear();
    lane.histogram.resize(bins, 0);
    for t in &lane.aux_q {
        let mut b = ((t.cost - best) / width * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        lane.histogram[b] += 1;
    }
    let mut cum = 0u64;
    let mut k = bins - 1;
    for (i, &c) in lane.histogram.iter().enumerate() {
        cum += u64::from(c);
        if cum >= config.max_active as u64 {
            k = i;
            break;
        }
    }
    let bin_width = width / bins as f64;
    let cutoff = best + bin_width * (k + 1) as f64;
    BeamFrame {
        best_cost: best,
        cutoff,
        effective_beam: cutoff - best,
        cutoff_bin_count: lane.histogram[k],
    }
}

fn contract(lane: &mut LaneState, cutoff: f64) {
    lane.store.clear();
    for t in &lane.aux_q {
        if t.cost < cutoff {
            lane.store.push(*t);
        }
    }
}

/// Relaxes epsilon arcs in rounds until no state's best cost improves.
///
/// Candidates are generated from the round's frontier in order, then merged
/// sequentially with strict-improvement semantics, so the sweep is
/// deterministic whether candidates were computed by one worker or many.
fn expand_nonemitting(
    fst: &CsrFst,
    config: &DecoderConfig,
    lane: &mut LaneState,
    cutoff: f64,
    frame_index: u32,
) -> Result<(u32, u32), DecodeFailure> {
    lane.state_best.ensure(fst.num_states() as usize);
    lane.round_best.ensure(fst.num_states() as usize);
    lane.state_best.begin();

    // Seed: each state's best store token, in store order.
    for (i, t) in lane.store.iter().enumerate() {
        if t.cost < lane.state_best.get(t.fst_state) {
            lane.state_best.set(t.fst_state, t.cost, i as u32);
        }
    }
    lane.frontier.clear();
    for (i, t) in lane.store.iter().enumerate() {
        if lane.state_best.aux_of(t.fst_state) == i as u32
            && lane.state_best.get(t.fst_state) == t.cost
        {
            lane.frontier.push(i as u32);
        }
    }

    let mut wide_rounds = 0u32;
    let mut persistent_rounds = 0u32;
    let guard = fst.num_states() as u64 + 2;
    let mut rounds = 0u64;
    while !lane.frontier.is_empty() {
        rounds += 1;
        if rounds > guard {
            return Err(DecodeFailure::Divergence { frame: frame_index });
        }
        let wide = lane.frontier.len() >= config.ne_persistent_threshold;
        if wide {
            wide_rounds += 1;
        } else {
            persistent_rounds += 1;
        }

        lane.cands.clear();
        if wide {
            let store = &lane.store;
            let per_entry: Vec<Vec<(u32, f64, u32, u32)>> = lane
                .frontier
                .par_iter()
                .map(|&i| {
                    let t = store[i as usize];
                    let mut local = Vec::new();
                    for a in fst.state_epsilon(t.fst_state) {
                        let cand = t.cost + fst.arc_weight(a);
                        if cand < cutoff {
                            local.push((fst.arc_next(a), cand, i, a as u32));
                        }
                    }
                    local
                })
                .collect();
            for mut v in per_entry {
                lane.cands.append(&mut v);
            }
        } else {
            for &i in &lane.frontier {
                let t = lane.store[i as usize];
                for a in fst.state_epsilon(t.fst_state) {
                    let cand = t.cost + fst.arc_weight(a);
                    if cand < cutoff {
                        lane.cands.push((fst.arc_next(a), cand, i, a as u32));
                    }
                }
            }
        }

        lane.round_best.begin();
        lane.improved.clear();
        for &(dst, cand, prev, arc) in &lane.cands {
            if cand < lane.state_best.get(dst) {
                lane.store.push(Token { fst_state: dst, cost: cand, prev_token: prev, arc_idx: arc });
                let idx = (lane.store.len() - 1) as u32;
                lane.state_best.set(dst, cand, idx);
                if lane.round_best.get(dst).is_infinite() {
                    lane.improved.push(dst);
                }
                lane.round_best.set(dst, cand, idx);
            }
        }
        lane.frontier.clear();
        for &dst in &lane.improved {
            lane.frontier.push(lane.round_best.aux_of(dst));
        }
        lane.frontier.sort_unstable();
    }
    Ok((wide_rounds, persistent_rounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posteriors::PosteriorMatrix;

    fn load(text: &str) -> CsrFst {
        CsrFst::load_text(text.as_bytes()).unwrap()
    }

    const THREE_STATE: &str = "0 1 1 1 0.5\n0 2 0 0 1.0\n1 2 2 2 0.3\n2 0.0\n";

    fn open_config() -> DecoderConfig {
        DecoderConfig {
            beam: f64::INFINITY,
            lattice_beam: f64::INFINITY,
            max_active: usize::MAX / 2,
            ..DecoderConfig::default()
        }
    }

    type RunOutput = (Vec<LatticeSegment>, Vec<FrameSummary>, Vec<FrontierEntry>);

    /// Drives init + every frame, returning segments and summaries.
    fn run(
        fst: &CsrFst,
        post: &PosteriorMatrix,
        config: &DecoderConfig,
    ) -> Result<RunOutput, DecodeFailure> {
        let mut lane = LaneState::new();
        let (seg0, mut main_q) = init_slot_zero(fst, config, &mut lane)?;
        let mut segments = vec![seg0];
        let mut summaries = Vec::new();
        for t in 0..post.num_frames() {
            let out = advance_frame(fst, config, &mut lane, &main_q, post.row(t), t)?;
            segments.push(out.segment);
            summaries.push(out.summary);
            main_q = out.main_q;
        }
        Ok((segments, summaries, main_q))
    }

    fn best_with_finals(fst: &CsrFst, main_q: &[FrontierEntry]) -> f64 {
        main_q
            .iter()
            .map(|e| e.cost + fst.final_cost(e.state))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn default_config_matches_documented_operating_point() {
        let c = DecoderConfig::default();
        assert_eq!(c.beam, 15.0);
        assert_eq!(c.lattice_beam, 8.0);
        assert_eq!(c.max_active, 10_000);
        assert_eq!(c.n_lanes, 4);
        assert_eq!(c.n_channels, 64);
        assert_eq!(c.ne_persistent_threshold, 4000);
        assert_eq!(c.histogram_bins, 256);
        assert!(c.soft_pruning);
        assert_eq!(c.emit_high_water, 8192);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = DecoderConfig::default();
        let cases: Vec<DecoderConfig> = vec![
            DecoderConfig { beam: 0.0, ..base.clone() },
            DecoderConfig { beam: -1.0, ..base.clone() },
            DecoderConfig { beam: f64::NAN, ..base.clone() },
            DecoderConfig { lattice_beam: 0.0, ..base.clone() },
            DecoderConfig { lattice_beam: 16.0, ..base.clone() },
            DecoderConfig { lattice_beam: f64::NAN, ..base.clone() },
            DecoderConfig { max_active: 0, ..base.clone() },
            DecoderConfig { histogram_bins: 0, ..base.clone() },
            DecoderConfig { n_lanes: 0, ..base.clone() },
            DecoderConfig { n_lanes: 65, ..base.clone() },
            DecoderConfig { emit_high_water: 0, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?} should be invalid");
        }
        // Infinite beam admits an infinite lattice beam.
        let inf = DecoderConfig {
            beam: f64::INFINITY,
            lattice_beam: f64::INFINITY,
            ..base
        };
        assert!(inf.validate().is_ok());
    }

    #[test]
    fn state_memory_estimate_matches_documented_examples() {
        assert_eq!(state_memory_bytes(10_000, 1, 1), 6_081_024);
        assert_eq!(state_memory_bytes(10_000, 5000, 500), 5_920_512_000);
    }

    #[test]
    fn three_state_walkthrough_pins_every_slot() {
        let fst = load(THREE_STATE);
        let post = PosteriorMatrix::from_rows(3, &[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let (segments, summaries, main_q) = run(&fst, &post, &open_config()).unwrap();

        assert_eq!(segments.len(), 3);
        assert_eq!(segments[0].states, vec![0, 2]);
        assert_eq!(segments[0].rep_token(0).cost, 0.0);
        assert_eq!(segments[0].rep_token(1).cost, 1.0);
        assert_eq!(segments[1].states, vec![1]);
        assert!((segments[1].rep_token(0).cost - (-1.5)).abs() < 1e-12);
        assert_eq!(segments[2].states, vec![2]);
        assert!((segments[2].rep_token(0).cost - (-2.2)).abs() < 1e-12);

        assert_eq!(summaries[0].post_contract_tokens, 1);
        assert!((summaries[0].best_cost - (-1.5)).abs() < 1e-12);
        assert_eq!(summaries[1].post_contract_tokens, 1);
        assert!((summaries[1].best_cost - (-2.2)).abs() < 1e-12);

        assert!((best_with_finals(&fst, &main_q) - (-2.2)).abs() < 1e-12);
    }

    /// Fan of `n` arcs from the start, one per distinct state, then a join.
    fn fan_graph(n: usize, descending: bool) -> CsrFst {
        let mut text = String::new();
        for i in 0..n {
            let w = if descending { 0.01 * (n - i) as f64 } else { 0.01 * (i + 1) as f64 };
            text.push_str(&format!("0 {} 1 {} {}\n", i + 1, i + 1, w));
        }
        for i in 0..n {
            text.push_str(&format!("{} {} 2 0 0.0\n", i + 1, n + 1));
        }
        text.push_str(&format!("{} 0.0\n", n + 1));
        load(&text)
    }

    #[test]
    fn histogram_cutoff_is_exact_with_fine_bins() {
        let fst = fan_graph(100, false);
        let post = PosteriorMatrix::from_rows(3, &[vec![0.0, 0.0, 0.0]]);
        let config = DecoderConfig {
            beam: f64::INFINITY,
            lattice_beam: f64::INFINITY,
            max_active: 10,
            histogram_bins: 1_000_000,
            ..DecoderConfig::default()
        };
        let (segments, summaries, _) = run(&fst, &post, &config).unwrap();
        assert_eq!(summaries[0].active_tokens, 100);
        assert_eq!(summaries[0].post_contract_tokens, 10);
        // The ten cheapest arcs lead to states 1..=10.
        assert_eq!(segments[1].states, (1..=10).collect::<Vec<u32>>());
        assert!(
            summaries[0].post_contract_tokens
                <= 10 + summaries[0].cutoff_bin_tokens
        );
    }

    #[test]
    fn expansion_estimate_never_leaks_into_the_outcome() {
        // The same weight multiset generated in ascending vs descending
        // order: ascending tightens the running estimate immediately and
        // drops half the candidates early; descending keeps them all. The
        // contracted survivors must not notice the difference.
        let post = PosteriorMatrix::from_rows(3, &[vec![0.0, 0.0, 0.0]]);
        let config = DecoderConfig {
            beam: 0.5,
            lattice_beam: 0.5,
            max_active: 10,
            histogram_bins: 1_000_000,
            ..DecoderConfig::default()
        };
        let mut outcomes = Vec::new();
        let mut actives = Vec::new();
        for descending in [false, true] {
            let fst = fan_graph(100, descending);
            let (segments, summaries, _) = run(&fst, &post, &config).unwrap();
            actives.push(summaries[0].active_tokens);
            let mut costs: Vec<f64> =
                (0..segments[1].num_groups()).map(|g| segments[1].rep_token(g).cost).collect();
            costs.sort_by(f64::total_cmp);
            outcomes.push((
                summaries[0].post_contract_tokens,
                summaries[0].effective_beam,
                costs,
            ));
        }
        assert_eq!(outcomes[0], outcomes[1]);
        assert_eq!(outcomes[0].0, 10);
        // The estimate really did fire in one order and not the other.
        assert_eq!(actives[0], 50);
        assert_eq!(actives[1], 100);
    }

    #[test]
    fn coarse_bins_overshoot_at_most_one_bin() {
        let fst = fan_graph(100, false);
        let post = PosteriorMatrix::from_rows(3, &[vec![0.0, 0.0, 0.0]]);
        let config = DecoderConfig {
            beam: 15.0,
            lattice_beam: 8.0,
            max_active: 10,
            histogram_bins: 1,
            ..DecoderConfig::default()
        };
        let (_, summaries, _) = run(&fst, &post, &config).unwrap();
        // One bin spans the whole beam: nothing can be cut.
        assert_eq!(summaries[0].post_contract_tokens, 100);
        assert_eq!(summaries[0].cutoff_bin_tokens, 100);
        assert!(summaries[0].post_contract_tokens <= 10 + summaries[0].cutoff_bin_tokens);
    }

    /// All-equal candidate costs: a fan with one shared weight.
    fn flat_fan(n: usize) -> CsrFst {
        let mut text = String::new();
        for i in 0..n {
            text.push_str(&format!("0 {} 1 {} 0.25\n", i + 1, i + 1));
        }
        for i in 0..n {
            text.push_str(&format!("{} {} 2 0 0.0\n", i + 1, n + 1));
        }
        text.push_str(&format!("{} 0.0\n", n + 1));
        load(&text)
    }

    #[test]
    fn tied_candidates_cannot_be_separated_by_cost() {
        let fst = flat_fan(100);
        let post = PosteriorMatrix::from_rows(3, &[vec![0.0, 0.0, 0.0]]);
        for beam in [15.0, f64::INFINITY] {
            let config = DecoderConfig {
                beam,
                lattice_beam: beam.min(8.0),
                max_active: 10,
                ..DecoderConfig::default()
            };
            let (_, summaries, _) = run(&fst, &post, &config).unwrap();
            assert_eq!(summaries[0].post_contract_tokens, 100, "beam {beam}");
            assert_eq!(summaries[0].cutoff_bin_tokens, 100);
        }
    }

    /// Two identical-cost self-loops: token counts double every frame unless
    /// the frontier is recombined.
    const DOUBLING: &str = "0 0 1 1 0.1\n0 0 1 2 0.1\n0 0.0\n";

    #[test]
    fn soft_pruning_recombines_the_frontier() {
        let fst = load(DOUBLING);
        let rows: Vec<Vec<f32>> = (0..5).map(|_| vec![0.0, 0.0]).collect();
        let post = PosteriorMatrix::from_rows(2, &rows);

        let soft = DecoderConfig { soft_pruning: true, ..open_config() };
        let (_, summaries, _) = run(&fst, &post, &soft).unwrap();
        let counts: Vec<u32> = summaries.iter().map(|s| s.post_contract_tokens).collect();
        assert_eq!(counts, vec![2, 2, 2, 2, 2]);

        let hard = DecoderConfig { soft_pruning: false, ..open_config() };
        let (_, summaries, _) = run(&fst, &post, &hard).unwrap();
        let counts: Vec<u32> = summaries.iter().map(|s| s.post_contract_tokens).collect();
        assert_eq!(counts, vec![2, 4, 8, 16, 32]);
    }

    /// Epsilon chain 1 -> 2 -> 3 with a negative hop, entered from a single
    /// emitting arc.
    const EPS_CHAIN: &str =
        "0 1 1 1 0.5\n1 2 0 0 -0.2\n2 3 0 7 0.4\n3 0.0\n";

    #[test]
    fn epsilon_rounds_propagate_improvements_and_record_links() {
        let fst = load(EPS_CHAIN);
        let post = PosteriorMatrix::from_rows(2, &[vec![0.0, 1.0]]);
        let (segments, summaries, main_q) = run(&fst, &post, &open_config()).unwrap();
        let seg = &segments[1];
        assert_eq!(seg.states, vec![1, 2, 3]);
        assert!((seg.rep_token(0).cost - (-0.5)).abs() < 1e-12);
        assert!((seg.rep_token(1).cost - (-0.7)).abs() < 1e-12);
        assert!((seg.rep_token(2).cost - (-0.3)).abs() < 1e-12);
        // Epsilon prevs point at groups of this segment.
        assert_eq!(seg.rep_token(1).prev_token, 0);
        assert_eq!(seg.rep_token(2).prev_token, 1);
        assert_eq!(summaries[0].ne_persistent_rounds + summaries[0].ne_wide_rounds, 3);
        assert_eq!(main_q.len(), 3);
    }

    #[test]
    fn wide_and_persistent_epsilon_modes_agree_exactly() {
        let fst = load(EPS_CHAIN);
        let post = PosteriorMatrix::from_rows(2, &[vec![0.0, 1.0]]);
        let wide = DecoderConfig { ne_persistent_threshold: 0, ..open_config() };
        let persistent = DecoderConfig { ne_persistent_threshold: usize::MAX, ..open_config() };
        let (seg_w, sum_w, q_w) = run(&fst, &post, &wide).unwrap();
        let (seg_p, sum_p, q_p) = run(&fst, &post, &persistent).unwrap();
        assert_eq!(seg_w, seg_p);
        assert_eq!(q_w, q_p);
        assert!(sum_w.iter().all(|s| s.ne_persistent_rounds == 0));
        assert!(sum_p.iter().all(|s| s.ne_wide_rounds == 0));
    }

    #[test]
    fn beam_pruning_matches_reference_behavior() {
        // Star graph from the reference tests: beam 0.25 prunes the branch
        // that frame 1 would have rewarded.
        let mut text = String::new();
        for i in 0..4u32 {
            text.push_str(&format!("0 {} {} {} {}\n", i + 1, i + 1, i + 1, 0.1 * f64::from(i + 1)));
        }
        for i in 0..4u32 {
            text.push_str(&format!("{} 5 {} {} 0.1\n", i + 1, 5 + i, 5 + i));
        }
        text.push_str("5 0.0\n");
        let fst = load(&text);
        let mut row1 = vec![0.0f32; 9];
        row1[8] = 10.0;
        let post = PosteriorMatrix::from_rows(9, &[vec![0.0; 9], row1]);

        let narrow = DecoderConfig { beam: 0.25, lattice_beam: 0.25, ..DecoderConfig::default() };
        let (_, _, main_q) = run(&fst, &post, &narrow).unwrap();
        assert!((best_with_finals(&fst, &main_q) - 0.2).abs() < 1e-12);

        let (_, _, main_q) = run(&fst, &post, &open_config()).unwrap();
        assert!((best_with_finals(&fst, &main_q) - (-9.5)).abs() < 1e-12);
    }

    #[test]
    fn dead_frontier_reports_the_failing_frame() {
        let fst = load("0 1 1 1 0.5\n0 0.0\n");
        let post = PosteriorMatrix::from_rows(2, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let err = run(&fst, &post, &open_config()).unwrap_err();
        assert_eq!(err, DecodeFailure::NoSurvivors { frame: 1 });
    }
}
