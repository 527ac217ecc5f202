use std::collections::{HashMap, VecDeque};

use super::{BatchPlan, EngineConfig, EngineError, Policy, Request, RequestState, TokenEvent, TokenKind};
use crate::clock::VirtualTimestamp;
use crate::predictor::{DecodeEntry, PrefillChunk};

/// Block accounting for the KV cache.
///
/// Admission reserves blocks for a request's whole lifetime (prompt plus
/// output) so that, without preemption, running requests can always grow.
#[derive(Debug, Clone)]
pub struct KvManager {
    block_tokens: u32,
    capacity: u32,
    reserved: u32,
    reservations: HashMap<u64, u32>,
    resident: HashMap<u64, u32>,
}

impl KvManager {
    pub fn new(block_tokens: u32, capacity: u32) -> Self {
        KvManager {
            block_tokens,
            capacity,
            reserved: 0,
            reservations: HashMap::new(),
            resident: HashMap::new(),
        }
    }

    pub fn blocks_for(&self, tokens: u32) -> u32 {
        tokens.div_ceil(self.block_tokens)
    }

    pub fn lifetime_blocks(&self, r: &Request) -> u32 {
        self.blocks_for(r.prompt_tokens + r.output_tokens)
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn reserved(&self) -> u32 {
        self.reserved
    }

    pub fn can_admit(&self, r: &Request) -> bool {
        self.reserved + self.lifetime_blocks(r) <= self.capacity
    }

    fn admit(&mut self, r: &Request) {
        let blocks = self.lifetime_blocks(r);
        self.reserved += blocks;
        self.reservations.insert(r.request_id, blocks);
        self.resident.insert(r.request_id, 0);
    }

    fn set_resident(&mut self, id: u64, tokens: u32) {
        self.resident.insert(id, tokens);
    }

    fn release(&mut self, id: u64) {
        if let Some(b) = self.reservations.remove(&id) {
            self.reserved -= b;
        }
        self.resident.remove(&id);
    }

    /// Blocks holding resident tokens.
    pub fn live_blocks(&self) -> u32 {
        self.resident.values().map(|&t| self.blocks_for(t)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EngineCore {
    config: EngineConfig,
    queue: VecDeque<Request>,
    running: Vec<Request>,
    kv: KvManager,
    finished: u64,
}

impl EngineCore {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let kv = KvManager::new(config.kv_block_tokens, config.kv_capacity_blocks);
        Ok(EngineCore {
            config,
            queue: VecDeque::new(),
            running: Vec::new(),
            kv,
            finished: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn queue(&self) -> &VecDeque<Request> {
        &self.queue
    }

    pub fn running(&self) -> &[Request] {
        &self.running
    }

    pub fn kv(&self) -> &KvManager {
        &self.kv
    }

    pub fn finished_count(&self) -> u64 {
        self.finished
    }

    pub fn has_work(&self) -> bool {
        !self.queue.is_empty() || !self.running.is_empty()
    }

    /// Queues an arrival. Requests must arrive in non-decreasing arrival
    /// order.
    pub fn enqueue(&mut self, mut r: Request) -> Result<(), EngineError> {
        if r.prompt_tokens == 0 || r.output_tokens == 0 {
            return Err(EngineError::EmptyRequest(r.request_id));
        }
        let blocks = self.kv.lifetime_blocks(&r);
        if blocks > self.kv.capacity() {
            return Err(EngineError::RequestTooLarge {
                request_id: r.request_id,
                blocks,
                capacity: self.kv.capacity(),
            });
        }
        r.state = RequestState::Queued;
        r.prefill_progress = 0;
        r.decoded = 0;
        self.queue.push_back(r);
        Ok(())
    }

    /// Virtual time at which the next batch starts, given that the previous
    /// one ended at `cursor`; `None` when there is nothing to do.
    pub fn next_start(&self, cursor: VirtualTimestamp) -> Option<VirtualTimestamp> {
        if !self.running.is_empty() {
            return Some(cursor);
        }
        self.queue.front().map(|r| r.arrival_virtual.max(cursor))
    }

    fn admissible_head(&self, now: VirtualTimestamp) -> bool {
        match self.queue.front() {
            Some(head) => {
                head.arrival_virtual <= now
                    && (self.running.len() as u32) < self.config.max_running
                    && self.kv.can_admit(head)
            }
            None => false,
        }
    }

    fn prefill_pending(&self, now: VirtualTimestamp) -> bool {
        self.running.iter().any(|r| r.prefill_remaining() > 0) || self.admissible_head(now)
    }

    /// Builds the next batch from requests that arrived by `now`, admitting
    /// queued requests as the policy allows.
    pub fn form_batch(&mut self, now: VirtualTimestamp) -> BatchPlan {
        let mut plan = BatchPlan::default();
        let mut budget = self.config.max_batch_tokens;
        let prefill_now = match self.config.policy {
            Policy::Mixed => true,
            Policy::PrefillPrioritized => self.prefill_pending(now),
        };
        let decodes_now = self.config.policy == Policy::Mixed || !prefill_now;

        if decodes_now {
            for r in &self.running {
                if budget == 0 {
                    break;
                }
                if r.in_decode() {
                    plan.composition.decodes.push(DecodeEntry {
                        request_id: r.request_id,
                        context_len: r.kv_tokens(),
                    });
                    plan.kv_blocks_needed += self.kv.blocks_for(r.kv_tokens() + 1) - self.kv.blocks_for(r.kv_tokens());
                    budget -= 1;
                }
            }
        }
        if prefill_now {
            for r in &self.running {
                if budget == 0 {
                    break;
                }
                if r.prefill_remaining() > 0 {
                    let chunk = self.config.chunk_size.min(r.prefill_remaining()).min(budget);
                    plan.composition.prefill_chunks.push(PrefillChunk {
                        request_id: r.request_id,
                        chunk_tokens: chunk,
                        context_len_before: r.prefill_progress,
                    });
                    plan.kv_blocks_needed += self.kv.blocks_for(r.kv_tokens() + chunk) - self.kv.blocks_for(r.kv_tokens());
                    budget -= chunk;
                }
            }
            while budget > 0 && self.admissible_head(now) {
                let mut r = self.queue.pop_front().expect("head checked");
                r.state = RequestState::Running;
                self.kv.admit(&r);
                let chunk = self.config.chunk_size.min(r.prompt_tokens).min(budget);
                plan.composition.prefill_chunks.push(PrefillChunk {
                    request_id: r.request_id,
                    chunk_tokens: chunk,
                    context_len_before: 0,
                });
                plan.kv_blocks_needed += self.kv.blocks_for(chunk);
                budget -= chunk;
                self.running.push(r);
            }
        }
        plan
    }

    /// Applies a finished step and returns the token events it produced,
    /// all stamped `ts`.
    pub fn complete_step(&mut self, plan: &BatchPlan, ts: VirtualTimestamp) -> Result<Vec<TokenEvent>, EngineError> {
        let mut events = Vec::new();
        let index: HashMap<u64, usize> = self.running.iter().enumerate().map(|(i, r)| (r.request_id, i)).collect();
        let mut emit = |id, kind| {
            events.push(TokenEvent {
                request_id: id,
                kind,
                virtual_ts_ns: ts,
            })
        };
        let lookup = |id: u64| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| EngineError::Invariant(format!("request {id} in plan is not running")))
        };
        for d in &plan.composition.decodes {
            let r = &mut self.running[lookup(d.request_id)?];
            if !r.in_decode() {
                return Err(EngineError::Invariant(format!("request {} is not decoding", r.request_id)));
            }
            r.decoded += 1;
            emit(r.request_id, TokenKind::OutputToken);
            if r.decoded == r.output_tokens {
                r.state = RequestState::Finished;
                emit(r.request_id, TokenKind::Finished);
            }
            self.kv.set_resident(r.request_id, r.kv_tokens());
        }
        for c in &plan.composition.prefill_chunks {
            let r = &mut self.running[lookup(c.request_id)?];
            if c.chunk_tokens > r.prefill_remaining() {
                return Err(EngineError::Invariant(format!("chunk overruns prompt of {}", r.request_id)));
            }
            r.prefill_progress += c.chunk_tokens;
            if r.prefill_remaining() == 0 {
                r.decoded = 1;
                emit(r.request_id, TokenKind::FirstToken);
                if r.output_tokens == 1 {
                    r.state = RequestState::Finished;
                    emit(r.request_id, TokenKind::Finished);
                }
            }
            self.kv.set_resident(r.request_id, r.kv_tokens());
        }
        let kv = &mut self.kv;
        let mut done = 0;
        self.running.retain(|r| {
            let keep = r.state != RequestState::Finished;
            if !keep {
                kv.release(r.request_id);
                done += 1;
            }
            keep
        });
        self.finished += done;
        Ok(events)
    }

    /// Checks KV accounting against the running set.
    pub fn check_invariants(&self) -> Result<(), EngineError> {
        let expected: u32 = self.running.iter().map(|r| self.kv.blocks_for(r.kv_tokens())).sum();
        if expected != self.kv.live_blocks() {
            return Err(EngineError::Invariant(format!(
                "live KV blocks {} but running requests hold {expected}",
                self.kv.live_blocks()
            )));
        }
        if self.kv.reserved() > self.kv.capacity() {
            return Err(EngineError::Invariant("KV reservations exceed capacity".into()));
        }
        for r in &self.running {
            if r.prefill_progress > r.prompt_tokens || r.decoded > r.output_tokens {
                return Err(EngineError::Invariant(format!("request {} overran its lengths", r.request_id)));
            }
        }
        Ok(())
    }
}
