//! Slow, obviously-correct decoders used as test oracles.
//!
//! [`serial_decode`] is classic single-threaded token passing: one token per
//! state per frame, an explicit `best + beam` cutoff, and an exact sort-based
//! max-active cutoff (no histogram). [`exhaustive_paths`] enumerates every
//! complete path outright and only accepts tiny inputs. Neither produces a
//! lattice; they exist so the batched decoder has something independent to be
//! checked against.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::fst::CsrFst;
use crate::posteriors::PosteriorMatrix;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no token survived pruning at frame {frame}")]
    NoSurvivors { frame: u32 },
    #[error("no complete path reaches a final state")]
    NoCompletePath,
    #[error("exhaustive enumeration refused: {states} states / {frames} frames exceeds the 8/8 guard")]
    TooLarge { states: u32, frames: u32 },
}

#[derive(Debug, Clone)]
pub struct SerialConfig {
    /// Pruning width; `f64::INFINITY` disables beam pruning.
    pub beam: f64,
    /// Exact cap on tokens kept per frame.
    pub max_active: usize,
}

impl Default for SerialConfig {
    fn default() -> Self {
        SerialConfig { beam: 15.0, max_active: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best_cost: f64,
    pub best_path_words: Vec<u32>,
}

/// One complete path found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub words: Vec<u32>,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy)]
struct TraceNode {
    prev: usize,
    olabel: u32,
}

const NO_TRACE: usize = usize::MAX;

/// One emitting expansion step with duplicates kept: every (token, arc)
/// pair contributes a candidate.
pub fn emitting_candidates(
    fst: &CsrFst,
    frontier: &[(u32, f64)],
    row: &[f32],
) -> Vec<(u32, f64)> {
    let mut out = Vec::new();
    for &(state, cost) in frontier {
        for a in fst.state_emitting(state) {
            let ll = f64::from(row[fst.arc_ilabel(a) as usize]);
            out.push((fst.arc_next(a), cost + fst.arc_weight(a) - ll));
        }
    }
    out
}

/// Reference Viterbi decode. Deterministic: states are visited in id order
/// and only strict cost improvements replace a token.
pub fn serial_decode(
    fst: &CsrFst,
    posteriors: &PosteriorMatrix,
    config: &SerialConfig,
) -> Result<OracleResult, OracleError> {
    let num_frames = posteriors.num_frames();
    let mut trace: Vec<TraceNode> = Vec::new();

    if num_frames == 0 {
        // Degenerate utterance: only the bare start state counts.
        let f = fst.final_cost(fst.start_state());
        if f.is_finite() {
            return Ok(OracleResult { best_cost: f, best_path_words: Vec::new() });
        }
        return Err(OracleError::NoCompletePath);
    }

    let mut frontier: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    frontier.insert(fst.start_state(), (0.0, NO_TRACE));
    epsilon_closure(fst, &mut frontier, config.beam, &mut trace);

    for t in 0..num_frames {
        let row = posteriors.row(t);

        let mut merged: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (&state, &(cost, tr)) in frontier.iter() {
            for a in fst.state_emitting(state) {
                let ll = f64::from(row[fst.arc_ilabel(a) as usize]);
                let cand = cost + fst.arc_weight(a) - ll;
                let slot = merged.entry(fst.arc_next(a)).or_insert((f64::INFINITY, NO_TRACE));
                if cand < slot.0 {
                    trace.push(TraceNode { prev: tr, olabel: fst.arc_olabel(a) });
                    *slot = (cand, trace.len() - 1);
                }
            }
        }
        if merged.is_empty() {
            return Err(OracleError::NoSurvivors { frame: t });
        }

        let best = merged.values().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let mut cutoff = best + config.beam;
        if merged.len() > config.max_active {
            let mut costs: Vec<f64> = merged.values().map(|v| v.0).collect();
            costs.sort_by(f64::total_cmp);
            // Keep strictly better than the (max_active+1)-th cost; boundary
            // ties are dropped rather than over-admitted.
            cutoff = cutoff.min(costs[config.max_active]);
        }
        merged.retain(|_, v| v.0 < cutoff);
        if merged.is_empty() {
            return Err(OracleError::NoSurvivors { frame: t });
        }

        epsilon_closure(fst, &mut merged, cutoff, &mut trace);
        frontier = merged;
    }

    let mut best_cost = f64::INFINITY;
    let mut best_trace = NO_TRACE;
    for (&state, &(cost, tr)) in frontier.iter() {
        let f = fst.final_cost(state);
        if f.is_finite() {
            let total = cost + f;
            if total < best_cost {
                best_cost = total;
                best_trace = tr;
            }
        }
    }
    if !best_cost.is_finite() {
        return Err(OracleError::NoCompletePath);
    }

    let mut words = Vec::new();
    let mut cur = best_trace;
    while cur != NO_TRACE {
        let node = trace[cur];
        if node.olabel != 0 {
            words.push(node.olabel);
        }
        cur = node.prev;
    }
    words.reverse();
    Ok(OracleResult { best_cost, best_path_words: words })
}

/// Relaxes epsilon arcs to a fixed point; only strict improvements under the
/// cutoff propagate, so termination needs no cycle bound on validated graphs.
fn epsilon_closure(
    fst: &CsrFst,
    tokens: &mut BTreeMap<u32, (f64, usize)>,
    cutoff: f64,
    trace: &mut Vec<TraceNode>,
) {
    let mut frontier: Vec<u32> = tokens.keys().copied().collect();
    while !frontier.is_empty() {
        let mut improved: Vec<u32> = Vec::new();
        for &state in &frontier {
            let (cost, tr) = tokens[&state];
            for a in fst.state_epsilon(state) {
                let cand = cost + fst.arc_weight(a);
                if cand >= cutoff {
                    continue;
                }
                let dst = fst.arc_next(a);
                let slot = tokens.entry(dst).or_insert((f64::INFINITY, NO_TRACE));
                if cand < slot.0 {
                    trace.push(TraceNode { prev: tr, olabel: fst.arc_olabel(a) });
                    *slot = (cand, trace.len() - 1);
                    if !improved.contains(&dst) {
                        improved.push(dst);
                    }
                }
            }
        }
        improved.sort_unstable();
        frontier = improved;
    }
}

/// Enumerates every complete path: exactly one emitting arc per frame, with
/// epsilon chains capped at `num_states` hops per frame slot. Refuses inputs
/// beyond 8 states or 8 frames.
pub fn exhaustive_paths(
    fst: &CsrFst,
    posteriors: &PosteriorMatrix,
    cost_bound: f64,
) -> Result<Vec<PathRecord>, OracleError> {
    let num_frames = posteriors.num_frames();
    if fst.num_states() > 8 || num_frames > 8 {
        return Err(OracleError::TooLarge { states: fst.num_states(), frames: num_frames });
    }

    if num_frames == 0 {
        let f = fst.final_cost(fst.start_state());
        if f.is_finite() && f <= cost_bound {
            return Ok(vec![PathRecord { words: Vec::new(), cost: f }]);
        }
        return Ok(Vec::new());
    }

    // Optimistic lower bound on the cost still to be added from each frame
    // slot onward, so branches provably over the bound can stop early.
    let t = num_frames as usize;
    let mut min_step = vec![f64::INFINITY; t];
    for (f, slot) in min_step.iter_mut().enumerate() {
        let row = posteriors.row(f as u32);
        for s in 0..fst.num_states() {
            for a in fst.state_emitting(s) {
                let step = fst.arc_weight(a) - f64::from(row[fst.arc_ilabel(a) as usize]);
                *slot = slot.min(step);
            }
        }
    }
    let mut min_eps = 0.0f64;
    for s in 0..fst.num_states() {
        for a in fst.state_epsilon(s) {
            min_eps = min_eps.min(fst.arc_weight(a));
        }
    }
    let mut min_final = f64::INFINITY;
    for s in 0..fst.num_states() {
        min_final = min_final.min(fst.final_cost(s));
    }
    let eps_budget = fst.num_states() as usize;
    let mut future_min = vec![0.0f64; t + 1];
    for f in (0..t).rev() {
        future_min[f] = future_min[f + 1] + min_step[f] + eps_budget as f64 * min_eps;
    }
    for slot in future_min.iter_mut() {
        *slot += min_final.min(0.0) + eps_budget as f64 * min_eps;
    }

    let mut out = Vec::new();
    let mut words = Vec::new();
    dfs(
        fst,
        posteriors,
        cost_bound,
        &future_min,
        fst.start_state(),
        0,
        eps_budget,
        0.0,
        &mut words,
        &mut out,
    );
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    fst: &CsrFst,
    posteriors: &PosteriorMatrix,
    cost_bound: f64,
    future_min: &[f64],
    state: u32,
    slot: u32,
    eps_left: usize,
    cost: f64,
    words: &mut Vec<u32>,
    out: &mut Vec<PathRecord>,
) {
    let t = posteriors.num_frames();
    if cost + future_min[slot as usize] > cost_bound {
        return;
    }
    if slot == t {
        let f = fst.final_cost(state);
        if f.is_finite() && cost + f <= cost_bound {
            out.push(PathRecord { words: words.clone(), cost: cost + f });
        }
    } else {
        let row = posteriors.row(slot);
        for a in fst.state_emitting(state) {
            let ll = f64::from(row[fst.arc_ilabel(a) as usize]);
            let next_cost = cost + fst.arc_weight(a) - ll;
            let ol = fst.arc_olabel(a);
            if ol != 0 {
                words.push(ol);
            }
            dfs(
                fst,
                posteriors,
                cost_bound,
                future_min,
                fst.arc_next(a),
                slot + 1,
                fst.num_states() as usize,
                next_cost,
                words,
                out,
            );
            if ol != 0 {
                words.pop();
            }
        }
    }
    if eps_left > 0 {
        for a in fst.state_epsilon(state) {
            let next_cost = cost + fst.arc_weight(a);
            let ol = fst.arc_olabel(a);
            if ol != 0 {
                words.push(ol);
            }
            dfs(
                fst,
                posteriors,
                cost_bound,
                future_min,
                fst.arc_next(a),
                slot,
                eps_left - 1,
                next_cost,
                words,
                out,
            );
            if ol != 0 {
                words.pop();
            }
        }
    }
}
