//! Decode-graph loading, validation, and CSR storage.
//!
//! Graphs arrive as text: one arc per line (`src dst ilabel olabel weight`)
//! plus final-state lines (`state final_cost`). State ids must be dense
//! `0..num_states`, state 0 is the start state, and input label 0 marks an
//! epsilon (non-emitting) arc. Loading canonicalizes the arc order per state
//! (emitting arcs first, then sorted by label/target/weight) so that decode
//! results do not depend on the order of lines in the input file.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

/// Input label reserved for non-emitting arcs.
pub const EPSILON: u32 = 0;

#[derive(Debug, Error)]
pub enum FstError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("graph rejected: epsilon cycle with non-positive total cost (minimum cycle mean {mean})")]
    EpsilonCycle { mean: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A weighted FST in compressed sparse row form.
///
/// One flat arc slab, indexed by per-state offsets. Within a state's span the
/// emitting arcs occupy the prefix `arc_offsets[s]..emitting_end[s]` and the
/// epsilon arcs the remainder, so the emitting expand walks contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrFst {
    num_states: u32,
    arc_offsets: Vec<u32>,
    emitting_end: Vec<u32>,
    arc_next_state: Vec<u32>,
    arc_ilabel: Vec<u32>,
    arc_olabel: Vec<u32>,
    arc_weight: Vec<f64>,
    final_costs: Vec<f64>,
    num_emitting: u32,
    max_ilabel: u32,
}

#[derive(Debug, Clone, Copy)]
struct RawArc {
    src: u32,
    dst: u32,
    ilabel: u32,
    olabel: u32,
    weight: f64,
}

impl CsrFst {
    /// Loads and validates a graph from its text form.
    pub fn load_text<R: BufRead>(reader: R) -> Result<Self, FstError> {
        let mut arcs: Vec<RawArc> = Vec::new();
        let mut finals: Vec<(u32, f64)> = Vec::new();
        let mut max_id: u32 = 0;
        let mut saw_line = false;

        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            saw_line = true;
            match fields.len() {
                2 => {
                    let state = parse_id(fields[0], lineno, "state")?;
                    let cost = parse_weight(fields[1], lineno, "final cost")?;
                    finals.push((state, cost));
                    max_id = max_id.max(state);
                }
                5 => {
                    let src = parse_id(fields[0], lineno, "source state")?;
                    let dst = parse_id(fields[1], lineno, "next state")?;
                    let ilabel = parse_id(fields[2], lineno, "ilabel")?;
                    let olabel = parse_id(fields[3], lineno, "olabel")?;
                    let weight = parse_weight(fields[4], lineno, "weight")?;
                    arcs.push(RawArc { src, dst, ilabel, olabel, weight });
                    max_id = max_id.max(src).max(dst);
                }
                n => {
                    return Err(FstError::Parse {
                        line: lineno,
                        msg: format!("expected 2 fields (final) or 5 fields (arc), got {n}"),
                    });
                }
            }
        }

        if !saw_line {
            return Err(FstError::Validation("empty graph: no arcs and no final states".into()));
        }

        let num_states = max_id + 1;

        // Dense-id check: every id below the largest must appear somewhere.
        let mut mentioned = vec![false; num_states as usize];
        for a in &arcs {
            mentioned[a.src as usize] = true;
            mentioned[a.dst as usize] = true;
        }
        for &(s, _) in &finals {
            mentioned[s as usize] = true;
        }
        if let Some(missing) = mentioned.iter().position(|m| !m) {
            return Err(FstError::Validation(format!(
                "dangling state reference: state {missing} never appears but ids reach {max_id}"
            )));
        }

        let mut final_costs = vec![f64::INFINITY; num_states as usize];
        for &(s, c) in &finals {
            // Repeated final lines combine tropically (keep the cheaper one).
            if c < final_costs[s as usize] {
                final_costs[s as usize] = c;
            }
        }

        // Canonical per-state order: emitting before epsilon, then by
        // (ilabel, olabel, next state, weight). This makes the loaded
        // structure independent of input line order.
        arcs.sort_by(|a, b| {
            let ka = (a.src, a.ilabel == EPSILON, a.ilabel, a.olabel, a.dst);
            let kb = (b.src, b.ilabel == EPSILON, b.ilabel, b.olabel, b.dst);
            ka.cmp(&kb).then(a.weight.total_cmp(&b.weight))
        });

        let mut arc_offsets = vec![0u32; num_states as usize + 1];
        for a in &arcs {
            arc_offsets[a.src as usize + 1] += 1;
        }
        for i in 0..num_states as usize {
            arc_offsets[i + 1] += arc_offsets[i];
        }

        let mut emitting_end = vec![0u32; num_states as usize];
        for s in 0..num_states as usize {
            let lo = arc_offsets[s] as usize;
            let hi = arc_offsets[s + 1] as usize;
            let split = arcs[lo..hi].partition_point(|a| a.ilabel != EPSILON);
            emitting_end[s] = (lo + split) as u32;
        }

        let num_emitting = arcs.iter().filter(|a| a.ilabel != EPSILON).count() as u32;
        let max_ilabel = arcs.iter().map(|a| a.ilabel).max().unwrap_or(0);

        let fst = CsrFst {
            num_states,
            arc_offsets,
            emitting_end,
            arc_next_state: arcs.iter().map(|a| a.dst).collect(),
            arc_ilabel: arcs.iter().map(|a| a.ilabel).collect(),
            arc_olabel: arcs.iter().map(|a| a.olabel).collect(),
            arc_weight: arcs.iter().map(|a| a.weight).collect(),
            final_costs,
            num_emitting,
            max_ilabel,
        };

        fst.check_epsilon_cycles()?;
        Ok(fst)
    }

    pub fn load_path<P: AsRef<Path>>(path: P) -> Result<Self, FstError> {
        let file = std::fs::File::open(path)?;
        Self::load_text(std::io::BufReader::new(file))
    }

    /// Writes the graph back out in its (canonical) text form.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for s in 0..self.num_states {
            for a in self.state_arcs(s) {
                writeln!(
                    w,
                    "{} {} {} {} {}",
                    s,
                    self.arc_next_state[a],
                    self.arc_ilabel[a],
                    self.arc_olabel[a],
                    self.arc_weight[a]
                )?;
            }
        }
        for s in 0..self.num_states as usize {
            if self.final_costs[s].is_finite() {
                writeln!(w, "{} {}", s, self.final_costs[s])?;
            }
        }
        Ok(())
    }

    pub fn to_text_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("graph text is ASCII")
    }

    /// Rejects epsilon cycles whose total cost is not strictly positive;
    /// those would let the non-emitting expansion loop forever.
    fn check_epsilon_cycles(&self) -> Result<(), FstError> {
        let n = self.num_states as usize;
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut has_eps = false;
        for s in 0..self.num_states {
            for a in self.state_epsilon(s) {
                adj[s as usize].push((self.arc_next_state[a], self.arc_weight[a]));
                has_eps = true;
            }
        }
        if !has_eps {
            return Ok(());
        }
        for scc in strongly_connected_components(&adj) {
            let cyclic = scc.len() > 1
                || adj[scc[0] as usize].iter().any(|&(d, _)| d == scc[0]);
            if !cyclic {
                continue;
            }
            let mean = min_mean_cycle(&adj, &scc);
            if mean <= 0.0 {
                return Err(FstError::EpsilonCycle { mean });
            }
        }
        Ok(())
    }

    /// Estimated resident size in bytes: 12 per state, 8 per arc, plus 4 per
    /// emitting arc. Linear, so disjoint unions add.
    pub fn memory_bytes(&self) -> u64 {
        12 * self.num_states as u64
            + 8 * self.num_arcs() as u64
            + 4 * self.num_emitting as u64
    }

    pub fn num_states(&self) -> u32 {
        self.num_states
    }

    pub fn num_arcs(&self) -> u32 {
        self.arc_next_state.len() as u32
    }

    pub fn num_emitting_arcs(&self) -> u32 {
        self.num_emitting
    }

    pub fn start_state(&self) -> u32 {
        0
    }

    /// Largest input label on any arc; posterior rows must be wider than this.
    pub fn max_ilabel(&self) -> u32 {
        self.max_ilabel
    }

    pub fn final_cost(&self, state: u32) -> f64 {
        self.final_costs[state as usize]
    }

    pub fn is_final(&self, state: u32) -> bool {
        self.final_costs[state as usize].is_finite()
    }

    /// All arcs out of `state`, as indexes into the arc slab.
    #[inline]
    pub fn state_arcs(&self, state: u32) -> std::ops::Range<usize> {
        self.arc_offsets[state as usize] as usize..self.arc_offsets[state as usize + 1] as usize
    }

    /// The emitting prefix of a state's span.
    #[inline]
    pub fn state_emitting(&self, state: u32) -> std::ops::Range<usize> {
        self.arc_offsets[state as usize] as usize..self.emitting_end[state as usize] as usize
    }

    /// The epsilon suffix of a state's span.
    #[inline]
    pub fn state_epsilon(&self, state: u32) -> std::ops::Range<usize> {
        self.emitting_end[state as usize] as usize..self.arc_offsets[state as usize + 1] as usize
    }

    #[inline]
    pub fn emitting_degree(&self, state: u32) -> u32 {
        self.emitting_end[state as usize] - self.arc_offsets[state as usize]
    }

    #[inline]
    pub fn arc_next(&self, arc: usize) -> u32 {
        self.arc_next_state[arc]
    }

    #[inline]
    pub fn arc_ilabel(&self, arc: usize) -> u32 {
        self.arc_ilabel[arc]
    }

    #[inline]
    pub fn arc_olabel(&self, arc: usize) -> u32 {
        self.arc_olabel[arc]
    }

    #[inline]
    pub fn arc_weight(&self, arc: usize) -> f64 {
        self.arc_weight[arc]
    }
}

fn parse_id(field: &str, line: usize, what: &str) -> Result<u32, FstError> {
    let v: u64 = field.parse().map_err(|_| FstError::Parse {
        line,
        msg: format!("{what} `{field}` is not a non-negative integer"),
    })?;
    if v >= u32::MAX as u64 {
        return Err(FstError::Parse { line, msg: format!("{what} {v} is out of range") });
    }
    Ok(v as u32)
}

fn parse_weight(field: &str, line: usize, what: &str) -> Result<f64, FstError> {
    let v: f64 = field.parse().map_err(|_| FstError::Parse {
        line,
        msg: format!("{what} `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(FstError::Parse { line, msg: format!("{what} must be finite, got {v}") });
    }
    Ok(v)
}

/// Kosaraju's algorithm, iterative to stay off the call stack.
fn strongly_connected_components(adj: &[Vec<(u32, f64)>]) -> Vec<Vec<u32>> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        seen[root] = true;
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            if *i < adj[v].len() {
                let w = adj[v][*i].0 as usize;
                *i += 1;
                if !seen[w] {
                    seen[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }

    let mut radj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (v, out) in adj.iter().enumerate() {
        for &(w, _) in out {
            radj[w as usize].push(v as u32);
        }
    }

    let mut comp = vec![usize::MAX; n];
    let mut comps: Vec<Vec<u32>> = Vec::new();
    for &root in order.iter().rev() {
        if comp[root] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![root as u32];
        comp[root] = id;
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            for &w in &radj[v] {
                let w = w as usize;
                if comp[w] == usize::MAX {
                    comp[w] = id;
                    members.push(w as u32);
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// Karp's minimum mean cycle over one strongly connected component.
fn min_mean_cycle(adj: &[Vec<(u32, f64)>], scc: &[u32]) -> f64 {
    let n = scc.len();
    let mut local = std::collections::HashMap::new();
    for (i, &s) in scc.iter().enumerate() {
        local.insert(s, i);
    }
    // d[k][v]: cheapest walk of exactly k edges from scc[0] to v.
    let mut d = vec![vec![f64::INFINITY; n]; n + 1];
    d[0][0] = 0.0;
    for k in 0..n {
        for (i, &s) in scc.iter().enumerate() {
            if !d[k][i].is_finite() {
                continue;
            }
            for &(dst, w) in &adj[s as usize] {
                if let Some(&j) = local.get(&dst) {
                    let cand = d[k][i] + w;
                    if cand < d[k + 1][j] {
                        d[k + 1][j] = cand;
                    }
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    for (v, &dnv) in d[n].iter().enumerate() {
        if !dnv.is_finite() {
            continue;
        }
        let mut worst = f64::NEG_INFINITY;
        for (k, dk) in d.iter().take(n).enumerate() {
            if dk[v].is_finite() {
                let mean = (dnv - dk[v]) / (n - k) as f64;
                if mean > worst {
                    worst = mean;
                }
            }
        }
        if worst > f64::NEG_INFINITY && worst < best {
            best = worst;
        }
    }
    best
}
