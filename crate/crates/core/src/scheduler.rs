//! Multiplexes many decode channels onto a few compute lanes.
//!
//! A channel holds one utterance's persistent search state between frame
//! batches; a lane is a reusable working set that executes one channel at a
//! time. Ready channels are served FIFO in batches of up to `n_lanes`, lanes
//! run in parallel, and finished slot segments stream to a consumer thread so
//! frame advance never waits on lattice hand-off. Back-pressure engages only
//! once `emit_high_water` segments are in flight.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rayon::prelude::*;
use thiserror::Error;

use crate::decoder::{
    advance_frame, init_slot_zero, ConfigError, DecodeFailure, DecoderConfig, FrameSummary,
    FrontierEntry, LaneState, NO_ARC,
};
use crate::fst::{CsrFst, EPSILON};
use crate::lattice::{finalize_lattice, Lattice, LatticeError, LatticeSegment};
use crate::posteriors::PosteriorMatrix;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("all {0} channels are in use")]
    ChannelsExhausted(usize),
    #[error("channel {0} is not open")]
    UnknownChannel(u32),
    #[error("channel {0} is suspended; restore it first")]
    Suspended(u32),
    #[error("channel {0} has work in flight")]
    ChannelBusy(u32),
    #[error("channel {0} already finished")]
    AlreadyFinished(u32),
    #[error("channel {0} is not finished")]
    NotFinished(u32),
    #[error("channel {0} is open; cannot restore over it")]
    RestoreBusy(u32),
    #[error("posterior rows carry {got} labels, the graph indexes up to label {needed}")]
    PosteriorWidth { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Decode(#[from] DecodeFailure),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Where a channel sits in its lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelStatus {
    /// Open with no queued frames.
    Idle,
    /// Queued frames are waiting for a lane.
    Ready,
    /// Bound to a lane inside a running batch.
    Active,
    /// End of utterance reached (or decode failed); awaiting finalize.
    Finished,
    /// State saved out via `save_state`; the id is parked until restore.
    Suspended,
}

/// Full persisted decode state of one channel between frame batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub channel_id: u32,
    /// Frames consumed so far.
    pub frame_index: u32,
    /// Surviving frontier, with linkage into the last emitted slot.
    pub main_q: Vec<FrontierEntry>,
    /// Best token cost in the last emitted slot.
    pub best_cost: f64,
}

/// Everything a finished channel yields.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub channel_id: u32,
    /// Best-path output labels, epsilons elided.
    pub words: Vec<u32>,
    pub best_cost: f64,
    pub lattice: Lattice,
    pub summaries: Vec<FrameSummary>,
}

/// Hook invoked on the consumer thread for every delivered segment.
pub type SegmentObserver = Box<dyn Fn(u32, &LatticeSegment) + Send>;

#[derive(Debug)]
struct Channel {
    frame_index: u32,
    main_q: Vec<FrontierEntry>,
    pending: Vec<Vec<f32>>,
    slot0_sent: bool,
    finish_requested: bool,
    failed: Option<DecodeFailure>,
    summaries: Vec<FrameSummary>,
    best_cost: f64,
    status: ChannelStatus,
}

impl Channel {
    fn new() -> Self {
        Channel {
            frame_index: 0,
            main_q: Vec::new(),
            pending: Vec::new(),
            slot0_sent: false,
            finish_requested: false,
            failed: None,
            summaries: Vec::new(),
            best_cost: 0.0,
            status: ChannelStatus::Idle,
        }
    }
}

#[derive(Debug)]
enum Slot {
    Free,
    Suspended,
    Open(Channel),
}

struct Core {
    slots: Vec<Slot>,
    ready: VecDeque<u32>,
    newly_finished: Vec<u32>,
}

impl Core {
    fn channel_mut(&mut self, id: u32) -> Result<&mut Channel, DecodeError> {
        match self.slots.get_mut(id as usize) {
            Some(Slot::Open(ch)) => Ok(ch),
            Some(Slot::Suspended) => Err(DecodeError::Suspended(id)),
            _ => Err(DecodeError::UnknownChannel(id)),
        }
    }
}

/// One channel's extracted working set for the duration of a batch.
struct BatchWork {
    id: u32,
    rows: Vec<Vec<f32>>,
    main_q: Vec<FrontierEntry>,
    frame_index: u32,
    slot0_sent: bool,
    best_cost: f64,
    summaries: Vec<FrameSummary>,
    failed: Option<DecodeFailure>,
}

enum PipelineMsg {
    Segment(u32, LatticeSegment),
    Close(u32),
    Flush(SyncSender<()>),
    Shutdown,
}

struct Collector {
    segments: Vec<Vec<LatticeSegment>>,
    discarded: u64,
}

/// Ordered hand-off queue between frame advance and segment storage.
struct SegmentPipeline {
    tx: SyncSender<PipelineMsg>,
    collector: Arc<Mutex<Collector>>,
    observer: Arc<Mutex<Option<SegmentObserver>>>,
    consumer: Option<JoinHandle<()>>,
}

impl SegmentPipeline {
    fn start(n_channels: usize, high_water: usize) -> Self {
        let (tx, rx) = mpsc::sync_channel(high_water);
        let collector = Arc::new(Mutex::new(Collector {
            segments: vec![Vec::new(); n_channels],
            discarded: 0,
        }));
        let observer: Arc<Mutex<Option<SegmentObserver>>> = Arc::new(Mutex::new(None));
        let consumer = {
            let collector = Arc::clone(&collector);
            let observer = Arc::clone(&observer);
            std::thread::spawn(move || consume(rx, collector, observer))
        };
        SegmentPipeline { tx, collector, observer, consumer: Some(consumer) }
    }

    /// Blocks until every segment sent so far has been delivered.
    fn flush(&self) {
        let (ack_tx, ack_rx) = mpsc::sync_channel(1);
        if self.tx.send(PipelineMsg::Flush(ack_tx)).is_ok() {
            let _ = ack_rx.recv();
        }
    }
}

impl Drop for SegmentPipeline {
    fn drop(&mut self) {
        let _ = self.tx.send(PipelineMsg::Shutdown);
        if let Some(h) = self.consumer.take() {
            let _ = h.join();
        }
    }
}

fn consume(
    rx: Receiver<PipelineMsg>,
    collector: Arc<Mutex<Collector>>,
    observer: Arc<Mutex<Option<SegmentObserver>>>,
) {
    while let Ok(msg) = rx.recv() {
        match msg {
            PipelineMsg::Segment(id, seg) => {
                if let Some(hook) = observer.lock().unwrap().as_ref() {
                    hook(id, &seg);
                }
                collector.lock().unwrap().segments[id as usize].push(seg);
            }
            PipelineMsg::Close(id) => {
                let mut c = collector.lock().unwrap();
                let dropped = c.segments[id as usize].len();
                c.segments[id as usize].clear();
                if dropped > 0 {
                    c.discarded += dropped as u64;
                    log::warn!("channel {id} closed with {dropped} undelivered segments");
                }
            }
            PipelineMsg::Flush(ack) => {
                let _ = ack.send(());
            }
            PipelineMsg::Shutdown => break,
        }
    }
}

/// Batched streaming decoder: many channels, few lanes, FIFO scheduling.
///
/// All methods take `&self`; submissions may come from several threads.
/// Batch formation is serialized internally, and a batch runs its channels
/// in parallel across lanes.
pub struct BatchDecoder {
    fst: Arc<CsrFst>,
    config: DecoderConfig,
    core: Mutex<Core>,
    lanes: Mutex<Vec<LaneState>>,
    pipeline: SegmentPipeline,
}

impl BatchDecoder {
    pub fn new(fst: Arc<CsrFst>, config: DecoderConfig) -> Result<Self, DecodeError> {
        config.validate()?;
        let lanes = (0..config.n_lanes).map(|_| LaneState::new()).collect();
        let pipeline = SegmentPipeline::start(config.n_channels, config.emit_high_water);
        Ok(BatchDecoder {
            fst,
            core: Mutex::new(Core {
                slots: (0..config.n_channels).map(|_| Slot::Free).collect(),
                ready: VecDeque::new(),
                newly_finished: Vec::new(),
            }),
            lanes: Mutex::new(lanes),
            pipeline,
            config,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn fst(&self) -> &CsrFst {
        &self.fst
    }

    /// Opens the lowest-numbered free channel.
    pub fn open_channel(&self) -> Result<u32, DecodeError> {
        let mut core = self.core.lock().unwrap();
        for (id, slot) in core.slots.iter_mut().enumerate() {
            if matches!(slot, Slot::Free) {
                *slot = Slot::Open(Channel::new());
                return Ok(id as u32);
            }
        }
        Err(DecodeError::ChannelsExhausted(self.config.n_channels))
    }

    /// Queues posterior frames on a channel. Runs a batch at once when at
    /// least `n_lanes` channels are ready; otherwise work waits for drain.
    pub fn submit_frames(&self, id: u32, frames: &PosteriorMatrix) -> Result<(), DecodeError> {
        let needed = self.fst.max_ilabel() as usize;
        if (frames.num_ilabels() as usize) <= needed {
            return Err(DecodeError::PosteriorWidth {
                needed,
                got: frames.num_ilabels() as usize,
            });
        }
        let run = {
            let mut core = self.core.lock().unwrap();
            let mut became_ready = false;
            {
                let ch = core.channel_mut(id)?;
                if ch.status == ChannelStatus::Finished || ch.finish_requested {
                    return Err(DecodeError::AlreadyFinished(id));
                }
                if frames.num_frames() > 0 {
                    for row in frames.rows() {
                        ch.pending.push(row.to_vec());
                    }
                    if ch.status == ChannelStatus::Idle {
                        ch.status = ChannelStatus::Ready;
                        became_ready = true;
                    }
                }
            }
            if became_ready {
                core.ready.push_back(id);
            }
            core.ready.len() >= self.config.n_lanes
        };
        if run {
            self.run_batch();
        }
        Ok(())
    }

    /// Marks end of utterance; the channel finishes once queued frames drain.
    pub fn finish_channel(&self, id: u32) -> Result<(), DecodeError> {
        let mut core = self.core.lock().unwrap();
        let finish_now = {
            let ch = core.channel_mut(id)?;
            if ch.failed.is_some() {
                // The decode already ended on its own; finishing is a no-op.
                return Ok(());
            }
            if ch.status == ChannelStatus::Finished || ch.finish_requested {
                return Err(DecodeError::AlreadyFinished(id));
            }
            ch.finish_requested = true;
            if ch.status == ChannelStatus::Idle {
                ch.status = ChannelStatus::Finished;
                true
            } else {
                false
            }
        };
        if finish_now {
            core.newly_finished.push(id);
        }
        Ok(())
    }

    /// Runs batches until every queued frame is consumed, then reports the
    /// channels that finished since the previous drain. Returns immediately
    /// when nothing is queued. Segment delivery stays asynchronous; readers
    /// that need the pipeline settled synchronize on their own.
    pub fn drain(&self) -> Vec<u32> {
        while self.run_batch() {}
        let mut core = self.core.lock().unwrap();
        std::mem::take(&mut core.newly_finished)
    }

    /// Binds up to `n_lanes` ready channels to lanes and advances each
    /// through all of its queued frames. Returns false when nothing ran.
    fn run_batch(&self) -> bool {
        let mut lanes = self.lanes.lock().unwrap();
        let mut works: Vec<BatchWork> = Vec::new();
        {
            let mut core = self.core.lock().unwrap();
            while works.len() < lanes.len() {
                let Some(id) = core.ready.pop_front() else { break };
                let Ok(ch) = core.channel_mut(id) else { continue };
                if ch.status != ChannelStatus::Ready {
                    continue;
                }
                ch.status = ChannelStatus::Active;
                works.push(BatchWork {
                    id,
                    rows: std::mem::take(&mut ch.pending),
                    main_q: std::mem::take(&mut ch.main_q),
                    frame_index: ch.frame_index,
                    slot0_sent: ch.slot0_sent,
                    best_cost: ch.best_cost,
                    summaries: Vec::new(),
                    failed: None,
                });
            }
        }
        if works.is_empty() {
            return false;
        }

        let fst = self.fst.as_ref();
        let config = &self.config;
        let tx = &self.pipeline.tx;
        works
            .par_iter_mut()
            .zip(lanes.par_iter_mut())
            .for_each(|(work, lane)| run_channel(fst, config, lane, work, tx));

        let mut core = self.core.lock().unwrap();
        for work in works {
            let id = work.id;
            let Ok(ch) = core.channel_mut(id) else { continue };
            ch.frame_index = work.frame_index;
            ch.main_q = work.main_q;
            ch.slot0_sent = work.slot0_sent;
            ch.best_cost = work.best_cost;
            ch.summaries.extend(work.summaries);
            let mut finished = false;
            if let Some(f) = work.failed {
                ch.failed = Some(f);
                ch.pending.clear();
                ch.status = ChannelStatus::Finished;
                finished = true;
            } else if !ch.pending.is_empty() {
                ch.status = ChannelStatus::Ready;
            } else if ch.finish_requested {
                ch.status = ChannelStatus::Finished;
                finished = true;
            } else {
                ch.status = ChannelStatus::Idle;
            }
            let requeue = ch.status == ChannelStatus::Ready;
            if requeue {
                core.ready.push_back(id);
            }
            if finished {
                core.newly_finished.push(id);
            }
        }
        true
    }

    pub fn status(&self, id: u32) -> Option<ChannelStatus> {
        let core = self.core.lock().unwrap();
        match core.slots.get(id as usize) {
            Some(Slot::Open(ch)) => Some(ch.status),
            Some(Slot::Suspended) => Some(ChannelStatus::Suspended),
            _ => None,
        }
    }

    /// Per-frame accounting collected so far.
    pub fn channel_summaries(&self, id: u32) -> Result<Vec<FrameSummary>, DecodeError> {
        let mut core = self.core.lock().unwrap();
        Ok(core.channel_mut(id)?.summaries.clone())
    }

    /// Best path over the frames decoded so far, ignoring final weights.
    /// Before any frame has been decoded this is an empty path at cost 0.
    pub fn partial_result(&self, id: u32) -> Result<(Vec<u32>, f64), DecodeError> {
        {
            let mut core = self.core.lock().unwrap();
            let ch = core.channel_mut(id)?;
            if ch.status == ChannelStatus::Active {
                return Err(DecodeError::ChannelBusy(id));
            }
        }
        self.pipeline.flush();
        let collector = self.pipeline.collector.lock().unwrap();
        let segs = &collector.segments[id as usize];
        if segs.is_empty() {
            return Ok((Vec::new(), 0.0));
        }
        verify_contiguous(segs)?;
        Ok(backtrace_words(&self.fst, segs))
    }

    /// Assembles the finished channel's pruned lattice and frees its id.
    /// The channel is consumed whether or not assembly succeeds.
    pub fn finalize(&self, id: u32) -> Result<DecodeResult, DecodeError> {
        let ch = {
            let mut core = self.core.lock().unwrap();
            {
                let c = core.channel_mut(id)?;
                if c.status != ChannelStatus::Finished {
                    return Err(DecodeError::NotFinished(id));
                }
            }
            let Slot::Open(ch) = std::mem::replace(&mut core.slots[id as usize], Slot::Free)
            else {
                unreachable!("checked above")
            };
            ch
        };
        if let Some(f) = ch.failed {
            let _ = self.pipeline.tx.send(PipelineMsg::Close(id));
            return Err(DecodeError::Decode(f));
        }
        self.pipeline.flush();
        let segs = {
            let mut collector = self.pipeline.collector.lock().unwrap();
            std::mem::take(&mut collector.segments[id as usize])
        };
        if segs.is_empty() {
            // Zero-frame utterance: only sensible when the start state is
            // itself final.
            let start = self.fst.start_state();
            if self.fst.is_final(start) {
                let fc = self.fst.final_cost(start);
                return Ok(DecodeResult {
                    channel_id: id,
                    words: Vec::new(),
                    best_cost: fc,
                    lattice: Lattice {
                        num_nodes: 1,
                        arcs: Vec::new(),
                        finals: vec![(0, fc)],
                    },
                    summaries: ch.summaries,
                });
            }
            return Err(DecodeError::Lattice(LatticeError::NoPath));
        }
        verify_contiguous(&segs)?;
        let lattice = finalize_lattice(&self.fst, &segs, self.config.lattice_beam)?;
        let (words, best_cost) = lattice.best_path()?;
        Ok(DecodeResult { channel_id: id, words, best_cost, lattice, summaries: ch.summaries })
    }

    /// Abandons a channel; undelivered segments are discarded with a warning.
    pub fn close_channel(&self, id: u32) -> Result<(), DecodeError> {
        {
            let mut core = self.core.lock().unwrap();
            let slot =
                core.slots.get_mut(id as usize).ok_or(DecodeError::UnknownChannel(id))?;
            match slot {
                Slot::Open(ch) if ch.status == ChannelStatus::Active => {
                    return Err(DecodeError::ChannelBusy(id))
                }
                Slot::Open(_) | Slot::Suspended => *slot = Slot::Free,
                Slot::Free => return Err(DecodeError::UnknownChannel(id)),
            }
            core.ready.retain(|&r| r != id);
        }
        let _ = self.pipeline.tx.send(PipelineMsg::Close(id));
        Ok(())
    }

    /// Captures an idle channel's resumable state and parks its id. Emitted
    /// segments stay queued under the id for the eventual finalize.
    pub fn save_state(&self, id: u32) -> Result<ChannelState, DecodeError> {
        let mut core = self.core.lock().unwrap();
        {
            let ch = core.channel_mut(id)?;
            if ch.status == ChannelStatus::Finished {
                return Err(DecodeError::AlreadyFinished(id));
            }
            if ch.status != ChannelStatus::Idle {
                return Err(DecodeError::ChannelBusy(id));
            }
        }
        let Slot::Open(ch) = std::mem::replace(&mut core.slots[id as usize], Slot::Suspended)
        else {
            unreachable!("checked above")
        };
        Ok(ChannelState {
            channel_id: id,
            frame_index: ch.frame_index,
            main_q: ch.main_q,
            best_cost: ch.best_cost,
        })
    }

    /// Rehydrates a channel saved by `save_state`; decoding continues as if
    /// never interrupted.
    pub fn restore_state(&self, state: ChannelState) -> Result<(), DecodeError> {
        let mut core = self.core.lock().unwrap();
        let id = state.channel_id;
        let slot = core.slots.get_mut(id as usize).ok_or(DecodeError::UnknownChannel(id))?;
        match slot {
            Slot::Open(_) => Err(DecodeError::RestoreBusy(id)),
            Slot::Free | Slot::Suspended => {
                *slot = Slot::Open(Channel {
                    frame_index: state.frame_index,
                    slot0_sent: state.frame_index > 0,
                    main_q: state.main_q,
                    best_cost: state.best_cost,
                    pending: Vec::new(),
                    finish_requested: false,
                    failed: None,
                    summaries: Vec::new(),
                    status: ChannelStatus::Idle,
                });
                Ok(())
            }
        }
    }

    /// Installs (or clears) a hook that sees every delivered segment.
    pub fn set_segment_observer(&self, hook: Option<SegmentObserver>) {
        *self.pipeline.observer.lock().unwrap() = hook;
    }

    /// Segments dropped because their channel closed before finalization.
    pub fn discarded_segments(&self) -> u64 {
        self.pipeline.flush();
        self.pipeline.collector.lock().unwrap().discarded
    }

    /// One-shot convenience: open, feed, finish, drain, finalize.
    pub fn decode_utterance(&self, frames: &PosteriorMatrix) -> Result<DecodeResult, DecodeError> {
        let id = self.open_channel()?;
        let fed = self.submit_frames(id, frames).and_then(|_| self.finish_channel(id));
        if let Err(e) = fed {
            let _ = self.close_channel(id);
            return Err(e);
        }
        self.drain();
        self.finalize(id)
    }
}

/// Advances one channel through its queued rows on one lane.
fn run_channel(
    fst: &CsrFst,
    config: &DecoderConfig,
    lane: &mut LaneState,
    work: &mut BatchWork,
    tx: &SyncSender<PipelineMsg>,
) {
    if work.rows.is_empty() {
        return;
    }
    if !work.slot0_sent {
        match init_slot_zero(fst, config, lane) {
            Ok((seg, q)) => {
                work.best_cost = seg.best_cost;
                let _ = tx.send(PipelineMsg::Segment(work.id, seg));
                work.main_q = q;
                work.slot0_sent = true;
            }
            Err(f) => {
                log::warn!("channel {} failed during startup: {f}", work.id);
                work.failed = Some(f);
                return;
            }
        }
    }
    for row in std::mem::take(&mut work.rows) {
        match advance_frame(fst, config, lane, &work.main_q, &row, work.frame_index) {
            Ok(out) => {
                work.best_cost = out.segment.best_cost;
                let _ = tx.send(PipelineMsg::Segment(work.id, out.segment));
                work.main_q = out.main_q;
                work.summaries.push(out.summary);
                work.frame_index += 1;
            }
            Err(f) => {
                log::warn!("channel {} failed at frame {}: {f}", work.id, work.frame_index);
                work.failed = Some(f);
                return;
            }
        }
    }
}

fn verify_contiguous(segs: &[LatticeSegment]) -> Result<(), LatticeError> {
    for (i, seg) in segs.iter().enumerate() {
        if seg.frame_index != i as u32 {
            return Err(LatticeError::MissingSegment { expected: i as u32 });
        }
    }
    Ok(())
}

/// Follows representative links back from the cheapest last-slot group.
/// Final weights are deliberately ignored; this serves partial results.
fn backtrace_words(fst: &CsrFst, segs: &[LatticeSegment]) -> (Vec<u32>, f64) {
    let last = segs.last().expect("caller checked non-empty");
    let mut best_g = 0usize;
    let mut best = f64::INFINITY;
    for g in 0..last.num_groups() {
        let c = last.rep_token(g).cost;
        if c < best {
            best = c;
            best_g = g;
        }
    }
    let mut words = Vec::new();
    let mut slot = segs.len() - 1;
    let mut g = best_g;
    loop {
        let tok = segs[slot].rep_token(g);
        if tok.arc_idx == NO_ARC {
            break;
        }
        let a = tok.arc_idx as usize;
        if fst.arc_olabel(a) != EPSILON {
            words.push(fst.arc_olabel(a));
        }
        g = tok.prev_token as usize;
        if fst.arc_ilabel(a) != EPSILON {
            slot -= 1;
        }
    }
    words.reverse();
    (words, best)
}
