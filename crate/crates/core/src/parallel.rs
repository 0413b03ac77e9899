//! Sequence-parallel forward pass over simulated workers.
//!
//! Worker `w` owns one contiguous shard of the token sequence. It waits for
//! the serialized boundary state of its left neighbour, runs its shard, and
//! sends its own final state to the right. Attention never crosses a chunk
//! boundary and shards are chunk aligned, so the recurrent state (CEMA hidden
//! state and norm statistics of every block) is all a worker needs.
//!
//! Workers run on scoped threads and talk only through channels carrying
//! byte payloads. Timestamps are simulated: a worker spends one tick per
//! token and a message costs one tick, so the timeline shows the sequential
//! dependency without measuring wall-clock time.

use std::ops::Range;
use std::sync::mpsc;

use crate::block::BlockState;
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::model::{LmModel, ModelState};
use crate::norm::NormState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerShard {
    pub worker: usize,
    pub range: Range<usize>,
}

/// Splits `n` tokens into at most `workers` chunk-aligned shards, spreading
/// whole chunks as evenly as possible. Never produces an empty shard.
pub fn plan_shards(n: usize, chunk: usize, workers: usize) -> Result<Vec<WorkerShard>> {
    if workers == 0 || chunk == 0 {
        return Err(Error::Parameter("workers and chunk must be ≥ 1".into()));
    }
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let chunks = n.div_ceil(chunk);
    let w = workers.min(chunks);
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let take = chunks / w + usize::from(i < chunks % w);
        let end = (start + take * chunk).min(n);
        out.push(WorkerShard {
            worker: i,
            range: start..end,
        });
        start = end;
    }
    Ok(out)
}

/// Checks that shards tile `0..n` left to right with chunk-aligned
/// interior boundaries.
pub fn validate_shards(shards: &[WorkerShard], n: usize, chunk: usize) -> Result<()> {
    let mut expect = 0;
    for (i, s) in shards.iter().enumerate() {
        if s.worker != i {
            return Err(Error::Input(format!("shard {i} is labelled worker {}", s.worker)));
        }
        if s.range.start != expect || s.range.end <= s.range.start {
            return Err(Error::Input(format!(
                "shard {i} covers {:?}, expected to start at {expect}",
                s.range
            )));
        }
        if s.range.end != n && s.range.end % chunk != 0 {
            return Err(Error::Alignment {
                boundary: s.range.end,
                chunk,
            });
        }
        expect = s.range.end;
    }
    if expect != n {
        return Err(Error::Input(format!("shards end at {expect}, sequence has {n} tokens")));
    }
    Ok(())
}

/// What crosses from one worker to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMessage {
    pub from: usize,
    pub to: usize,
    pub state: ModelState<f64>,
}

impl BoundaryMessage {
    /// Per block: EMA state, then the first and the second norm state.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.state.blocks {
            out.extend(b.ema.to_le_bytes());
            out.extend(b.norm1.to_le_bytes());
            out.extend(b.norm2.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], from: usize, to: usize, model: &LmModel<f64>) -> Result<Self> {
        let c = &model.config.block;
        let groups = c.norm_groups();
        let (ema_len, norm_len) = (16 * c.d * c.h, 24 * groups);
        let per_block = ema_len + 2 * norm_len;
        if bytes.len() != per_block * model.config.blocks {
            return Err(Error::State(format!(
                "boundary message of {} bytes, expected {}",
                bytes.len(),
                per_block * model.config.blocks
            )));
        }
        let blocks = bytes
            .chunks_exact(per_block)
            .map(|rec| {
                Ok(BlockState {
                    ema: EmaState::from_le_bytes(&rec[..ema_len], c.d, c.h)?,
                    norm1: NormState::from_le_bytes(&rec[ema_len..ema_len + norm_len])?,
                    norm2: NormState::from_le_bytes(&rec[ema_len + norm_len..])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            from,
            to,
            state: ModelState { blocks },
        })
    }

    /// Number of scalars on the wire (counts included).
    pub fn payload_len(&self) -> usize {
        self.state.payload_len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerEvent {
    pub worker: usize,
    pub start: u64,
    pub end: u64,
    pub received_bytes: usize,
    pub sent_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ParallelRun {
    pub logits: Tensor<f64>,
    /// Messages in send order, decoded from the bytes actually sent.
    pub messages: Vec<BoundaryMessage>,
    pub timeline: Vec<WorkerEvent>,
    /// State after the last token.
    pub final_state: ModelState<f64>,
}

pub fn forward_sequence_parallel(model: &LmModel<f64>, tokens: &[usize], workers: usize) -> Result<ParallelRun> {
    let shards = plan_shards(tokens.len(), model.config.block.chunk, workers)?;
    forward_with_shards(model, tokens, &shards)
}

struct WorkerOutput {
    logits: Tensor<f64>,
    event: WorkerEvent,
    sent: Option<Vec<u8>>,
    final_state: ModelState<f64>,
}

pub fn forward_with_shards(model: &LmModel<f64>, tokens: &[usize], shards: &[WorkerShard]) -> Result<ParallelRun> {
    validate_shards(shards, tokens.len(), model.config.block.chunk)?;
    let w = shards.len();
    // links[i] carries worker i's outbound bytes to worker i + 1, with the
    // simulated send time.
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..w.saturating_sub(1))
        .map(|_| mpsc::channel::<(u64, Vec<u8>)>())
        .unzip();
    let mut senders: Vec<Option<_>> = senders.into_iter().map(Some).collect();
    senders.push(None);
    let mut receivers: Vec<Option<_>> = receivers.into_iter().map(Some).collect();
    receivers.insert(0, None);

    let outputs: Vec<Result<WorkerOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .zip(senders)
            .zip(receivers)
            .map(|((shard, tx), rx)| {
                let local = &tokens[shard.range.clone()];
                let id = shard.worker;
                scope.spawn(move || -> Result<WorkerOutput> {
                    let (start, inbound, received_bytes) = match rx {
                        None => (0, ModelState::initial(&model.config), 0),
                        Some(rx) => {
                            let (t, bytes) = rx
                                .recv()
                                .map_err(|_| Error::State(format!("worker {id} lost its left neighbour")))?;
                            let msg = BoundaryMessage::from_le_bytes(&bytes, id - 1, id, model)?;
                            (t + 1, msg.state, bytes.len())
                        }
                    };
                    let (logits, state) = model.logits_with_state(local, &inbound)?;
                    let end = start + local.len() as u64;
                    let sent = tx.as_ref().map(|_| {
                        BoundaryMessage {
                            from: id,
                            to: id + 1,
                            state: state.clone(),
                        }
                        .to_le_bytes()
                    });
                    if let (Some(tx), Some(bytes)) = (tx, &sent) {
                        tx.send((end, bytes.clone()))
                            .map_err(|_| Error::State(format!("worker {} hung up", id + 1)))?;
                    }
                    Ok(WorkerOutput {
                        logits,
                        event: WorkerEvent {
                            worker: id,
                            start,
                            end,
                            received_bytes,
                            sent_bytes: sent.as_ref().map_or(0, Vec::len),
                        },
                        sent,
                        final_state: state,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("worker panicked".into()))))
            .collect()
    });

    let mut parts = Vec::with_capacity(w);
    let mut messages = Vec::new();
    let mut timeline = Vec::with_capacity(w);
    let mut final_state = None;
    for out in outputs {
        let out = out?;
        if let Some(bytes) = &out.sent {
            let id = out.event.worker;
            messages.push(BoundaryMessage::from_le_bytes(bytes, id, id + 1, model)?);
        }
        parts.push(out.logits);
        timeline.push(out.event);
        final_state = Some(out.final_state);
    }
    Ok(ParallelRun {
        logits: Tensor::concat_rows(&parts)?,
        messages,
        timeline,
        final_state: final_state.expect("at least one shard"),
    })
}
