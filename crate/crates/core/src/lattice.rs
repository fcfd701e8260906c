//! Lattice segments, pruning, finalization, and lattice-level metrics.
//!
//! Each decoded frame slot yields a [`LatticeSegment`]: the slot's surviving
//! tokens grouped by graph state, one representative (Viterbi-best) token per
//! group, and alternatives kept when they fall within `lattice_beam` of the
//! slot's best cost. Segments stream out of the decoder as soon as a slot is
//! done; [`finalize_lattice`] later stitches them into a [`Lattice`] over
//! (slot, state) nodes, recovers per-arc acoustic costs, and prunes arcs
//! whose exact path slack exceeds `lattice_beam`.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::decoder::{Token, NO_ARC};
use crate::fst::{CsrFst, EPSILON};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("no complete path reaches a final state")]
    NoPath,
    #[error("missing lattice segment for slot {expected}")]
    MissingSegment { expected: u32 },
    #[error("lattice structure is inconsistent: {0}")]
    Inconsistent(String),
    #[error("lattice parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One frame slot's surviving tokens, grouped by graph state.
///
/// `states` is ascending and parallel to `representative`; `group_offsets`
/// is CSR over `tokens`. Token `prev_token` fields hold group indices: into
/// the previous slot's segment for emitting tokens, into this segment for
/// epsilon tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSegment {
    pub frame_index: u32,
    pub states: Vec<u32>,
    pub group_offsets: Vec<u32>,
    pub tokens: Vec<Token>,
    pub representative: Vec<u32>,
    pub best_cost: f64,
}

impl LatticeSegment {
    pub fn num_groups(&self) -> usize {
        self.states.len()
    }

    /// The Viterbi-best token for a group.
    pub fn rep_token(&self, group: usize) -> &Token {
        &self.tokens[self.representative[group] as usize]
    }

    pub fn group_tokens(&self, group: usize) -> &[Token] {
        let lo = self.group_offsets[group] as usize;
        let hi = self.group_offsets[group + 1] as usize;
        &self.tokens[lo..hi]
    }

    /// Rough heap footprint, for streaming accounting.
    pub fn memory_bytes(&self) -> usize {
        self.states.len() * 8
            + self.group_offsets.len() * 4
            + self.tokens.len() * std::mem::size_of::<Token>()
            + self.representative.len() * 4
    }
}

/// Reusable state-indexed scratch for segment construction.
#[derive(Debug, Default)]
pub struct PreprocScratch {
    stamp: Vec<u32>,
    group: Vec<u32>,
    epoch: u32,
    seen: Vec<u32>,
    cursor: Vec<u32>,
}

impl PreprocScratch {
    pub fn ensure(&mut self, num_states: usize) {
        if self.stamp.len() < num_states {
            self.stamp.resize(num_states, 0);
            self.group.resize(num_states, 0);
        }
    }
}

/// Groups a slot's raw token store into a segment.
///
/// Keeps every group's representative unconditionally; alternatives survive
/// only within `lattice_beam` of the slot best. Epsilon `prev_token` fields
/// are rewritten from raw store indices to group indices.
pub fn preprocess_segment(
    fst: &CsrFst,
    frame_index: u32,
    store: &[Token],
    lattice_beam: f64,
    scratch: &mut PreprocScratch,
) -> LatticeSegment {
    assert!(!store.is_empty(), "empty token store has no segment");
    scratch.ensure(fst.num_states() as usize);
    scratch.epoch = scratch.epoch.wrapping_add(1);
    if scratch.epoch == 0 {
        scratch.stamp.fill(0);
        scratch.epoch = 1;
    }
    let epoch = scratch.epoch;

    let mut best_cost = f64::INFINITY;
    scratch.seen.clear();
    for tok in store {
        best_cost = best_cost.min(tok.cost);
        let s = tok.fst_state as usize;
        if scratch.stamp[s] != epoch {
            scratch.stamp[s] = epoch;
            scratch.seen.push(tok.fst_state);
        }
    }
    scratch.seen.sort_unstable();
    let states = scratch.seen.clone();
    for (g, &s) in states.iter().enumerate() {
        scratch.group[s as usize] = g as u32;
    }

    // Representative per group: cheapest token, earliest store index on ties.
    let mut rep_idx = vec![u32::MAX; states.len()];
    let mut rep_cost = vec![f64::INFINITY; states.len()];
    for (i, tok) in store.iter().enumerate() {
        let g = scratch.group[tok.fst_state as usize] as usize;
        if tok.cost < rep_cost[g] {
            rep_cost[g] = tok.cost;
            rep_idx[g] = i as u32;
        }
    }

    let keep = |i: usize, tok: &Token| -> bool {
        rep_idx[scratch.group[tok.fst_state as usize] as usize] == i as u32
            || tok.cost - best_cost <= lattice_beam
    };

    let mut counts = vec![0u32; states.len()];
    for (i, tok) in store.iter().enumerate() {
        if keep(i, tok) {
            counts[scratch.group[tok.fst_state as usize] as usize] += 1;
        }
    }
    let mut group_offsets = vec![0u32; states.len() + 1];
    for g in 0..states.len() {
        group_offsets[g + 1] = group_offsets[g] + counts[g];
    }

    scratch.cursor.clear();
    scratch.cursor.extend_from_slice(&group_offsets[..states.len()]);
    let mut tokens = vec![
        Token { fst_state: 0, cost: 0.0, prev_token: 0, arc_idx: 0 };
        group_offsets[states.len()] as usize
    ];
    let mut representative = vec![0u32; states.len()];
    for (i, tok) in store.iter().enumerate() {
        if !keep(i, tok) {
            continue;
        }
        let g = scratch.group[tok.fst_state as usize] as usize;
        let slot = scratch.cursor[g];
        scratch.cursor[g] += 1;
        let mut t = *tok;
        if t.arc_idx != NO_ARC && fst.arc_ilabel(t.arc_idx as usize) == EPSILON {
            // Raw parent index -> parent state's group in this segment. The
            // parent's group always exists: its representative is kept even
            // when the parent token itself was dropped as an alternative.
            let parent_state = store[t.prev_token as usize].fst_state;
            t.prev_token = scratch.group[parent_state as usize];
        }
        if rep_idx[g] == i as u32 {
            representative[g] = slot;
        }
        tokens[slot as usize] = t;
    }

    LatticeSegment { frame_index, states, group_offsets, tokens, representative, best_cost }
}

/// One arc of a finalized lattice; costs stay split so downstream rescoring
/// can rescale the acoustic part.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeArc {
    pub from: u32,
    pub to: u32,
    pub ilabel: u32,
    pub olabel: u32,
    pub graph_cost: f64,
    pub acoustic_cost: f64,
}

/// A pruned word lattice. Node 0 is the start node.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub num_nodes: u32,
    pub arcs: Vec<LatticeArc>,
    pub finals: Vec<(u32, f64)>,
}

/// Slack tolerance: arcs within this of the pruning threshold survive.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// Stitches a channel's segments into a pruned lattice.
///
/// Forward costs come from segment representatives; backward costs from an
/// exact sweep (epsilon arcs relaxed to a fixed point within each slot).
/// Arcs with slack over `lattice_beam` are dropped, as are arcs off every
/// complete path. Duplicate arcs collapse to one.
pub fn finalize_lattice(
    fst: &CsrFst,
    segments: &[LatticeSegment],
    lattice_beam: f64,
) -> Result<Lattice, LatticeError> {
    if segments.is_empty() {
        return Err(LatticeError::MissingSegment { expected: 0 });
    }
    for (i, seg) in segments.iter().enumerate() {
        if seg.frame_index != i as u32 {
            return Err(LatticeError::MissingSegment { expected: i as u32 });
        }
    }

    let mut node_base = vec![0u32; segments.len() + 1];
    for (s, seg) in segments.iter().enumerate() {
        node_base[s + 1] = node_base[s] + seg.num_groups() as u32;
    }
    let num_nodes = node_base[segments.len()] as usize;

    let mut fwd = vec![f64::INFINITY; num_nodes];
    let mut node_state = vec![0u32; num_nodes];
    for (s, seg) in segments.iter().enumerate() {
        for g in 0..seg.num_groups() {
            let n = (node_base[s] + g as u32) as usize;
            fwd[n] = seg.rep_token(g).cost;
            node_state[n] = seg.states[g];
        }
    }

    struct Raw {
        from: u32,
        to: u32,
        arc_idx: u32,
        acoustic: f64,
        slot: usize,
        epsilon: bool,
    }
    let mut raw: Vec<Raw> = Vec::new();
    let mut dedupe: HashSet<(u32, u32, u32, u64)> = HashSet::new();
    for (s, seg) in segments.iter().enumerate() {
        for g in 0..seg.num_groups() {
            for tok in seg.group_tokens(g) {
                if tok.arc_idx == NO_ARC {
                    continue;
                }
                let a = tok.arc_idx as usize;
                let to = node_base[s] + g as u32;
                let (from, acoustic, epsilon) = if fst.arc_ilabel(a) == EPSILON {
                    if tok.prev_token as usize >= seg.num_groups() {
                        return Err(LatticeError::Inconsistent(format!(
                            "epsilon token in slot {s} references group {}",
                            tok.prev_token
                        )));
                    }
                    (node_base[s] + tok.prev_token, 0.0f64, true)
                } else {
                    if s == 0 {
                        return Err(LatticeError::Inconsistent(
                            "emitting token in slot 0".into(),
                        ));
                    }
                    let from = node_base[s - 1] + tok.prev_token;
                    if tok.prev_token as usize >= segments[s - 1].num_groups() {
                        return Err(LatticeError::Inconsistent(format!(
                            "token in slot {s} references group {} of slot {}",
                            tok.prev_token,
                            s - 1
                        )));
                    }
                    let ac = tok.cost - fwd[from as usize] - fst.arc_weight(a);
                    (from, ac, false)
                };
                if dedupe.insert((from, to, tok.arc_idx, acoustic.to_bits())) {
                    raw.push(Raw { from, to, arc_idx: tok.arc_idx, acoustic, slot: s, epsilon });
                }
            }
        }
    }

    // Final nodes live in the last slot only.
    let last = segments.len() - 1;
    let mut finals: Vec<(u32, f64)> = Vec::new();
    for g in 0..segments[last].num_groups() {
        let n = node_base[last] + g as u32;
        let fc = fst.final_cost(node_state[n as usize]);
        if fc.is_finite() {
            finals.push((n, fc));
        }
    }
    let mut best_total = f64::INFINITY;
    for &(n, fc) in &finals {
        best_total = best_total.min(fwd[n as usize] + fc);
    }
    if !best_total.is_finite() {
        return Err(LatticeError::NoPath);
    }

    // Backward sweep: per slot, epsilon arcs to a fixed point, then emitting
    // arcs hand costs back to the previous slot.
    let mut bwd = vec![f64::INFINITY; num_nodes];
    for &(n, fc) in &finals {
        bwd[n as usize] = fc;
    }
    let mut eps_by_slot: Vec<Vec<&Raw>> = vec![Vec::new(); segments.len()];
    let mut emit_by_slot: Vec<Vec<&Raw>> = vec![Vec::new(); segments.len()];
    for r in &raw {
        if r.epsilon {
            eps_by_slot[r.slot].push(r);
        } else {
            emit_by_slot[r.slot].push(r);
        }
    }
    for s in (0..segments.len()).rev() {
        let mut rounds = 0usize;
        loop {
            let mut changed = false;
            for r in &eps_by_slot[s] {
                let cand = fst.arc_weight(r.arc_idx as usize) + bwd[r.to as usize];
                if cand < bwd[r.from as usize] {
                    bwd[r.from as usize] = cand;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            rounds += 1;
            if rounds > segments[s].num_groups() + 1 {
                return Err(LatticeError::Inconsistent(format!(
                    "epsilon relaxation in slot {s} did not settle"
                )));
            }
        }
        for r in &emit_by_slot[s] {
            let cand =
                fst.arc_weight(r.arc_idx as usize) + r.acoustic + bwd[r.to as usize];
            if cand < bwd[r.from as usize] {
                bwd[r.from as usize] = cand;
            }
        }
    }

    // Exact arc slack; infinite slack (off every complete path) always goes.
    let bound = lattice_beam + SLACK_TOLERANCE;
    let mut used = vec![false; num_nodes];
    let mut kept: Vec<&Raw> = Vec::new();
    for r in &raw {
        let gc = fst.arc_weight(r.arc_idx as usize);
        let slack = fwd[r.from as usize] + gc + r.acoustic + bwd[r.to as usize] - best_total;
        if slack <= bound {
            kept.push(r);
            used[r.from as usize] = true;
            used[r.to as usize] = true;
        }
    }

    let mut renumber = vec![u32::MAX; num_nodes];
    let mut next = 0u32;
    for (n, &u) in used.iter().enumerate() {
        if u {
            renumber[n] = next;
            next += 1;
        }
    }
    if next == 0 || renumber[0] != 0 {
        return Err(LatticeError::Inconsistent("start node fell off the lattice".into()));
    }

    let arcs = kept
        .iter()
        .map(|r| {
            let a = r.arc_idx as usize;
            LatticeArc {
                from: renumber[r.from as usize],
                to: renumber[r.to as usize],
                ilabel: fst.arc_ilabel(a),
                olabel: fst.arc_olabel(a),
                graph_cost: fst.arc_weight(a),
                acoustic_cost: r.acoustic,
            }
        })
        .collect();
    let finals = finals
        .into_iter()
        .filter(|&(n, _)| used[n as usize])
        .map(|(n, fc)| (renumber[n as usize], fc))
        .collect();

    Ok(Lattice { num_nodes: next, arcs, finals })
}

impl Lattice {
    /// Cheapest complete path: (words, total cost). Ties resolve to the
    /// earliest-stored arc, so equal runs yield identical transcripts.
    pub fn best_path(&self) -> Result<(Vec<u32>, f64), LatticeError> {
        let n = self.num_nodes as usize;
        let mut cost = vec![f64::INFINITY; n];
        let mut parent: Vec<Option<usize>> = vec![None; n];
        cost[0] = 0.0;
        let mut rounds = 0usize;
        loop {
            let mut changed = false;
            for (i, a) in self.arcs.iter().enumerate() {
                let c = cost[a.from as usize] + a.graph_cost + a.acoustic_cost;
                if c < cost[a.to as usize] {
                    cost[a.to as usize] = c;
                    parent[a.to as usize] = Some(i);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            rounds += 1;
            if rounds > n + 1 {
                return Err(LatticeError::Inconsistent("best-path relaxation did not settle".into()));
            }
        }
        let mut best = f64::INFINITY;
        let mut best_node = None;
        for &(f, fc) in &self.finals {
            let total = cost[f as usize] + fc;
            if total < best {
                best = total;
                best_node = Some(f);
            }
        }
        let Some(mut node) = best_node else {
            return Err(LatticeError::NoPath);
        };
        let mut words = Vec::new();
        while let Some(i) = parent[node as usize] {
            let a = &self.arcs[i];
            if a.olabel != 0 {
                words.push(a.olabel);
            }
            node = a.from;
        }
        words.reverse();
        Ok((words, best))
    }

    /// Arcs per node.
    pub fn density(&self) -> f64 {
        self.arcs.len() as f64 / self.num_nodes as f64
    }

    /// All complete paths with total cost at or under `cost_bound`, or None
    /// once more than `limit` are found. Loops stay bounded because every
    /// cycle in a valid lattice has positive cost.
    pub fn enumerate_paths(
        &self,
        cost_bound: f64,
        limit: usize,
    ) -> Option<Vec<(Vec<u32>, f64)>> {
        let n = self.num_nodes as usize;
        // Exact cost-to-go, so the search can prune precisely.
        let mut togo = vec![f64::INFINITY; n];
        for &(f, fc) in &self.finals {
            togo[f as usize] = fc;
        }
        loop {
            let mut changed = false;
            for a in &self.arcs {
                let c = a.graph_cost + a.acoustic_cost + togo[a.to as usize];
                if c < togo[a.from as usize] {
                    togo[a.from as usize] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut adj: Vec<Vec<&LatticeArc>> = vec![Vec::new(); n];
        for a in &self.arcs {
            adj[a.from as usize].push(a);
        }
        let final_cost: HashMap<u32, f64> = self.finals.iter().copied().collect();
        let mut out = Vec::new();
        let mut words: Vec<u32> = Vec::new();
        // DFS frames: (node, cost at node, next arc to try, words prefix len).
        let mut frames: Vec<(u32, f64, usize, usize)> = vec![(0, 0.0, 0, 0)];
        while let Some(&(node, cost, next_arc, wlen)) = frames.last() {
            if next_arc == 0 {
                if let Some(&fc) = final_cost.get(&node) {
                    if cost + fc <= cost_bound {
                        out.push((words.clone(), cost + fc));
                        if out.len() > limit {
                            return None;
                        }
                    }
                }
            }
            let arcs = &adj[node as usize];
            if next_arc < arcs.len() {
                frames.last_mut().expect("frame present").2 += 1;
                words.truncate(wlen);
                let a = arcs[next_arc];
                let c = cost + a.graph_cost + a.acoustic_cost;
                if c + togo[a.to as usize] <= cost_bound {
                    if a.olabel != 0 {
                        words.push(a.olabel);
                    }
                    frames.push((a.to, c, 0, words.len()));
                }
            } else {
                words.truncate(wlen);
                frames.pop();
            }
        }
        Some(out)
    }

    /// Writes the text form: arc lines, then final lines.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for a in &self.arcs {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                a.from, a.to, a.ilabel, a.olabel, a.graph_cost, a.acoustic_cost
            )?;
        }
        for &(n, fc) in &self.finals {
            writeln!(w, "{} {}", n, fc)?;
        }
        Ok(())
    }

    pub fn to_text_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("lattice text is ascii")
    }

    /// Parses the text form written by [`Lattice::write_text`].
    pub fn parse_text<R: BufRead>(r: R) -> Result<Lattice, LatticeError> {
        let mut arcs = Vec::new();
        let mut finals = Vec::new();
        let mut max_node = 0u32;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = |msg: &str| LatticeError::Parse { line: idx + 1, msg: msg.to_string() };
            let num = |s: &str| -> Result<u32, LatticeError> {
                s.parse::<u32>().map_err(|_| bad("expected an unsigned integer"))
            };
            let fnum = |s: &str| -> Result<f64, LatticeError> {
                let v = s.parse::<f64>().map_err(|_| bad("expected a float"))?;
                if v.is_nan() {
                    return Err(bad("cost is NaN"));
                }
                Ok(v)
            };
            match fields.len() {
                6 => {
                    let a = LatticeArc {
                        from: num(fields[0])?,
                        to: num(fields[1])?,
                        ilabel: num(fields[2])?,
                        olabel: num(fields[3])?,
                        graph_cost: fnum(fields[4])?,
                        acoustic_cost: fnum(fields[5])?,
                    };
                    max_node = max_node.max(a.from).max(a.to);
                    arcs.push(a);
                }
                2 => {
                    let n = num(fields[0])?;
                    max_node = max_node.max(n);
                    finals.push((n, fnum(fields[1])?));
                }
                _ => return Err(bad("expected 6 fields (arc) or 2 fields (final)")),
            }
        }
        if arcs.is_empty() && finals.is_empty() {
            return Err(LatticeError::Parse { line: 0, msg: "empty lattice".to_string() });
        }
        Ok(Lattice { num_nodes: max_node + 1, arcs, finals })
    }
}

/// Word error rate: edit distance over reference length. An empty reference
/// scores 0.0 against an empty hypothesis and 1.0 otherwise.
pub fn wer(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(reference, hypothesis) as f64 / reference.len() as f64
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Oracle word error rate: the lowest WER over every path in the lattice,
/// found with a shortest-path search over (node, reference position) pairs.
pub fn oracle_wer(lattice: &Lattice, reference: &[u32]) -> Result<f64, LatticeError> {
    let n = lattice.num_nodes as usize;
    let m = reference.len();
    let mut adj: Vec<Vec<&LatticeArc>> = vec![Vec::new(); n];
    for a in &lattice.arcs {
        adj[a.from as usize].push(a);
    }
    let final_cost: HashMap<u32, f64> = lattice.finals.iter().copied().collect();

    let mut dist: HashMap<(u32, usize), usize> = HashMap::new();
    let mut heap: BinaryHeap<std::cmp::Reverse<(usize, u32, usize)>> = BinaryHeap::new();
    dist.insert((0, 0), 0);
    heap.push(std::cmp::Reverse((0, 0, 0)));
    let mut best: Option<usize> = None;
    while let Some(std::cmp::Reverse((edits, node, pos))) = heap.pop() {
        if dist.get(&(node, pos)).is_some_and(|&d| d < edits) {
            continue;
        }
        if let Some(b) = best {
            if edits >= b {
                continue;
            }
        }
        if final_cost.contains_key(&node) {
            let total = edits + (m - pos);
            if best.is_none_or(|b| total < b) {
                best = Some(total);
            }
        }
        let mut push = |state: (u32, usize), cost: usize| {
            if dist.get(&state).is_none_or(|&d| cost < d) {
                dist.insert(state, cost);
                heap.push(std::cmp::Reverse((cost, state.0, state.1)));
            }
        };
        // Skip a reference word: deletion.
        if pos < m {
            push((node, pos + 1), edits + 1);
        }
        for a in &adj[node as usize] {
            if a.olabel == 0 {
                push((a.to, pos), edits);
            } else {
                // Insertion: hypothesis word with no reference move.
                push((a.to, pos), edits + 1);
                if pos < m {
                    let sub = usize::from(a.olabel != reference[pos]);
                    push((a.to, pos + 1), edits + sub);
                }
            }
        }
    }
    let Some(best) = best else {
        return Err(LatticeError::NoPath);
    };
    if reference.is_empty() {
        return Ok(if best == 0 { 0.0 } else { 1.0 });
    }
    Ok(best as f64 / reference.len() as f64)
}
