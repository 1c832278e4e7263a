//! Simulator state machine.
//!
//! Instances are modelled as units of two kinds:
//!
//! * serial units run one unchunked prefill at a time (partial-prefill and
//!   pure-prefill instances);
//! * chunked units run continuous batching with chunked prefill under a
//!   per-iteration token budget (everything else, including each pipeline
//!   micro-batch).
//!
//! After every batch of same-time events the simulator settles: frontend
//! routing and unit start-up are retried until nothing changes, so no unit
//! ever idles while it has runnable work.

use std::collections::VecDeque;

use crate::balancer::{choose_split, CpiStats, SplitDecision};
use crate::costmodel::{chunked_iter_time, prefill_time};
use crate::error::{Error, Result};
use crate::model::{LinkModel, Request, RequestRecord};
use crate::policies::{Frontend, InstanceSpec, PipelineSpec, Topology};

use super::kv::KvLedger;
use super::queue::{Event, EventQueue};
use super::{EventRecord, IterationRecord, LogKind, RunOptions, SplitRecord, TransferRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pending,
    Frontend,
    Queued,
    Prefilling,
    Buffered,
    Transferring,
    Running,
    Done,
    Rejected,
}

/// State of a request when it reaches a chunked unit's waiting queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Landing {
    /// Nothing computed yet.
    Fresh,
    /// A prefix sits in the partial-prefill buffer; admission pulls it over
    /// the link.
    Pull,
    /// Whole prompt computed and first token out; only decode remains.
    Ready,
}

#[derive(Debug, Clone)]
struct Req {
    r: Request,
    stage: Stage,
    landing: Landing,
    /// Tokens whose KV exists on the side that will continue the request.
    prefilled: u32,
    /// Prefill length on a serial unit.
    serial_len: u32,
    emitted: u32,
    token_times: Vec<f64>,
    unit: Option<usize>,
    split: Option<SplitDecision>,
    assigned: Option<usize>,
}

impl Req {
    fn in_decode(&self) -> bool {
        self.emitted >= 1
    }
}

#[derive(Debug, Clone, Copy)]
enum SerialNext {
    NotifyFrontend,
    TransferTo(usize),
    Sink,
}

#[derive(Debug)]
struct SerialUnit {
    instance: usize,
    waiting: VecDeque<usize>,
    current: Option<usize>,
    ledger: KvLedger,
    next: SerialNext,
}

#[derive(Debug, Clone, Copy)]
enum Work {
    Decode,
    Chunk(u32),
    /// Prompt fully precomputed elsewhere; the request joins with no new
    /// tokens to produce its first output token.
    Handoff,
}

#[derive(Debug)]
struct Batch {
    entries: Vec<(usize, Work)>,
}

#[derive(Debug, Clone, Copy)]
enum Exec {
    Single(usize),
    /// Pipeline micro-batch spanning both stage instances.
    Pipeline,
}

#[derive(Debug)]
struct ChunkedUnit {
    name: String,
    exec: Exec,
    budget: u64,
    waiting: VecDeque<usize>,
    running: Vec<usize>,
    transferring: usize,
    /// Requests routed here and not yet finished.
    unfinished: usize,
    ledgers: Vec<KvLedger>,
    in_flight: Option<Batch>,
}

#[derive(Debug)]
enum Unit {
    Serial(SerialUnit),
    Chunked(ChunkedUnit),
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Usage {
    pub iterations: u64,
    pub busy_ms: f64,
}

/// Raw simulation result before report assembly.
#[derive(Debug, Default)]
pub(crate) struct RawOutcome {
    pub records: Vec<RequestRecord>,
    pub rejected: Vec<u64>,
    pub usage: Vec<Usage>,
    pub events: Vec<EventRecord>,
    pub iterations: Vec<IterationRecord>,
    pub transfers: Vec<TransferRecord>,
    pub splits: Vec<SplitRecord>,
    pub violations: Vec<String>,
    pub peak_kv_blocks: Vec<u64>,
}

pub(crate) struct Sim<'a> {
    topo: &'a Topology,
    link: LinkModel,
    opts: RunOptions,
    reqs: Vec<Req>,
    units: Vec<Unit>,
    queue: EventQueue,
    frontend: VecDeque<usize>,
    wrr_cursor: usize,
    link_free: f64,
    stage_free: [f64; 2],
    now: f64,
    outstanding: usize,
    out: RawOutcome,
}

impl<'a> Sim<'a> {
    pub fn new(topo: &'a Topology, link: LinkModel, requests: &[Request], opts: RunOptions) -> Self {
        let units = build_units(topo);
        let reqs = requests
            .iter()
            .map(|&r| Req {
                r,
                stage: Stage::Pending,
                landing: Landing::Fresh,
                prefilled: 0,
                serial_len: r.input_len,
                emitted: 0,
                token_times: Vec::new(),
                unit: None,
                split: None,
                assigned: None,
            })
            .collect::<Vec<_>>();
        let mut queue = EventQueue::default();
        for (i, r) in requests.iter().enumerate() {
            queue.push(r.arrival_time, Event::Arrival(i));
        }
        let n_inst = topo.instances.len();
        Sim {
            topo,
            link,
            opts,
            outstanding: reqs.len(),
            reqs,
            units,
            queue,
            frontend: VecDeque::new(),
            wrr_cursor: 0,
            link_free: f64::NEG_INFINITY,
            stage_free: [f64::NEG_INFINITY; 2],
            now: f64::NEG_INFINITY,
            out: RawOutcome {
                usage: vec![Usage::default(); n_inst],
                ..RawOutcome::default()
            },
        }
    }

    pub fn run(mut self) -> Result<RawOutcome> {
        while let Some((t, ev)) = self.queue.pop() {
            if t < self.now {
                self.violation(format!("event at {t} ms after clock reached {} ms", self.now));
            }
            self.now = t;
            self.handle(ev);
            // Drain everything scheduled for this instant before deciding.
            while self.queue.peek_time() == Some(t) {
                let (_, ev) = self.queue.pop().expect("peeked");
                self.handle(ev);
            }
            self.settle();
        }
        if self.outstanding > 0 {
            let blocked = self
                .reqs
                .iter()
                .filter(|q| !matches!(q.stage, Stage::Done | Stage::Rejected))
                .map(|q| q.r.id)
                .collect();
            return Err(Error::Deadlock {
                time_ms: self.now,
                blocked,
            });
        }
        if self.opts.check_invariants {
            for (i, u) in self.units.iter().enumerate() {
                let clean = match u {
                    Unit::Serial(s) => s.ledger.is_empty(),
                    Unit::Chunked(c) => c.ledgers.iter().all(KvLedger::is_empty),
                };
                if !clean {
                    self.out.violations.push(format!("unit {i} holds KV after the run"));
                }
            }
        }
        self.out.peak_kv_blocks = self
            .units
            .iter()
            .map(|u| match u {
                Unit::Serial(s) => s.ledger.peak_allocated(),
                Unit::Chunked(c) => c.ledgers.iter().map(KvLedger::peak_allocated).max().unwrap_or(0),
            })
            .collect();
        let mut records = Vec::with_capacity(self.reqs.len());
        for q in &self.reqs {
            if q.stage == Stage::Rejected {
                self.out.rejected.push(q.r.id);
                continue;
            }
            let first = q.token_times[0];
            records.push(RequestRecord {
                id: q.r.id,
                arrival_time: q.r.arrival_time,
                input_len: q.r.input_len,
                output_len: q.r.output_len,
                ttft: first - q.r.arrival_time,
                tbt_samples: q.token_times.windows(2).map(|w| w[1] - w[0]).collect(),
                completion_time: *q.token_times.last().expect("at least one token"),
                partial_prefill_len: q.split.map(|s| s.partial_len),
                assigned_instance: q.assigned.map(|i| self.topo.instances[i].name.clone()),
            });
        }
        self.out.records = records;
        // Queued link transfers are logged when booked, ahead of their start.
        self.out.events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(self.out)
    }

    fn violation(&mut self, msg: String) {
        if self.opts.check_invariants {
            self.out.violations.push(msg);
        }
    }

    fn log(&mut self, time: f64, instance: &str, kind: LogKind, req: Option<usize>) {
        if self.opts.record_events {
            let request = req.map(|r| self.reqs[r].r.id);
            self.out.events.push(EventRecord {
                time,
                instance: instance.to_string(),
                kind,
                request,
            });
        }
    }

    fn unit_name(&self, u: usize) -> String {
        match &self.units[u] {
            Unit::Serial(s) => self.topo.instances[s.instance].name.clone(),
            Unit::Chunked(c) => c.name.clone(),
        }
    }

    // ---- event handlers -------------------------------------------------

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Arrival(r) => self.on_arrival(r),
            Event::IterationComplete(u) => match self.units[u] {
                Unit::Serial(_) => self.on_serial_done(u),
                Unit::Chunked(_) => self.on_batch_done(u),
            },
            Event::TransferComplete(r) => self.on_transfer_done(r),
            Event::Notify(r) => self.on_notify(r),
        }
    }

    fn on_arrival(&mut self, r: usize) {
        self.log(self.now, "frontend", LogKind::Arrival, Some(r));
        if !self.admissible_somewhere(r) {
            self.reqs[r].stage = Stage::Rejected;
            self.outstanding -= 1;
            self.log(self.now, "frontend", LogKind::Rejected, Some(r));
            return;
        }
        self.reqs[r].stage = Stage::Frontend;
        self.frontend.push_back(r);
    }

    fn on_serial_done(&mut self, u: usize) {
        let Unit::Serial(s) = &mut self.units[u] else { unreachable!() };
        let r = s.current.take().expect("serial unit had work");
        s.ledger.release(r);
        let next = s.next;
        let name = self.topo.instances[s.instance].name.clone();
        self.log(self.now, &name, LogKind::PrefillEnd, Some(r));
        let q = &mut self.reqs[r];
        q.prefilled = q.serial_len;
        match next {
            SerialNext::NotifyFrontend => {
                q.stage = Stage::Buffered;
                self.queue.push(self.now, Event::Notify(r));
            }
            SerialNext::TransferTo(dest) => {
                let tokens = q.r.input_len as u64;
                q.stage = Stage::Transferring;
                q.unit = Some(dest);
                self.start_transfer(r, tokens, u, dest);
            }
            SerialNext::Sink => {
                self.emit_token(r);
                let q = &self.reqs[r];
                if q.emitted < q.r.output_len {
                    // Standalone prefill measurement: the request ends here.
                    self.finish(r, None);
                }
            }
        }
    }

    fn on_batch_done(&mut self, u: usize) {
        let Unit::Chunked(c) = &mut self.units[u] else { unreachable!() };
        let batch = c.in_flight.take().expect("chunked unit had a batch");
        let name = c.name.clone();
        self.log(self.now, &name, LogKind::IterationEnd, None);
        for (r, work) in batch.entries {
            match work {
                Work::Decode | Work::Handoff => self.emit_token(r),
                Work::Chunk(n) => {
                    let q = &mut self.reqs[r];
                    q.prefilled += n;
                    if q.prefilled == q.r.input_len {
                        self.emit_token(r);
                    }
                }
            }
        }
    }

    fn on_transfer_done(&mut self, r: usize) {
        self.log(self.now, "link", LogKind::TransferEnd, Some(r));
        let dest = self.reqs[r].unit.expect("transfer has a destination");
        let Unit::Chunked(c) = &mut self.units[dest] else { unreachable!() };
        match self.reqs[r].landing {
            Landing::Pull => {
                c.transferring -= 1;
                c.running.push(r);
                self.reqs[r].stage = Stage::Running;
            }
            _ => {
                // Disaggregated handoff: the first token reaches the user
                // once the decode side holds the KV cache.
                self.emit_token(r);
                let q = &mut self.reqs[r];
                if q.stage != Stage::Done {
                    q.landing = Landing::Ready;
                    q.stage = Stage::Queued;
                    let Unit::Chunked(c) = &mut self.units[dest] else { unreachable!() };
                    c.waiting.push_back(r);
                }
            }
        }
    }

    fn on_notify(&mut self, r: usize) {
        let Frontend::Balancer { cpi, .. } = self.topo.frontend else {
            unreachable!("notify only under the balancer frontend")
        };
        self.log(self.now, "frontend", LogKind::Notify, Some(r));
        let Unit::Chunked(c) = &mut self.units[cpi] else { unreachable!() };
        c.waiting.push_back(r);
        let q = &mut self.reqs[r];
        q.landing = Landing::Pull;
        q.stage = Stage::Queued;
        q.unit = Some(cpi);
    }

    // ---- token bookkeeping ---------------------------------------------

    fn emit_token(&mut self, r: usize) {
        let now = self.now;
        let q = &mut self.reqs[r];
        q.emitted += 1;
        q.token_times.push(now);
        let first = q.emitted == 1;
        let done = q.emitted == q.r.output_len;
        let unit = q.unit;
        if first {
            self.log(now, "frontend", LogKind::FirstToken, Some(r));
        }
        if done {
            self.finish(r, unit);
        }
    }

    fn finish(&mut self, r: usize, unit: Option<usize>) {
        let q = &mut self.reqs[r];
        if q.stage == Stage::Done {
            return;
        }
        q.stage = Stage::Done;
        self.outstanding -= 1;
        if let Some(u) = unit {
            if let Unit::Chunked(c) = &mut self.units[u] {
                for l in &mut c.ledgers {
                    l.release(r);
                }
                c.running.retain(|&x| x != r);
                c.unfinished = c.unfinished.saturating_sub(1);
            }
        }
        if self.opts.check_invariants {
            let q = &self.reqs[r];
            if q.token_times.len() as u32 != q.emitted {
                self.out.violations.push(format!("request {} token count drifted", q.r.id));
            }
            if q.token_times.windows(2).any(|w| w[1] < w[0]) {
                self.out.violations.push(format!("request {} tokens out of order", q.r.id));
            }
        }
        self.log(self.now, "frontend", LogKind::Completion, Some(r));
    }

    fn start_transfer(&mut self, r: usize, tokens: u64, from: usize, to: usize) {
        let start = self.now.max(self.link_free);
        let duration = self.link.transfer_time(tokens);
        let end = start + duration;
        self.link_free = end;
        self.queue.push(end, Event::TransferComplete(r));
        self.log(start, "link", LogKind::TransferStart, Some(r));
        if self.opts.record_events || self.opts.record_iterations {
            self.out.transfers.push(TransferRecord {
                request: self.reqs[r].r.id,
                tokens,
                start,
                end,
                from: self.unit_name(from),
                to: self.unit_name(to),
            });
        }
    }

    // ---- routing --------------------------------------------------------

    fn unit_fits(&self, u: usize, tokens: u64) -> bool {
        match &self.units[u] {
            Unit::Serial(s) => s.ledger.fits_ever(s.ledger.blocks_for(tokens)),
            Unit::Chunked(c) => c.ledgers.iter().all(|l| l.fits_ever(l.blocks_for(tokens))),
        }
    }

    fn admissible_somewhere(&self, r: usize) -> bool {
        let q = &self.reqs[r].r;
        let (input, peak) = (q.input_len as u64, q.peak_kv_tokens());
        match &self.topo.frontend {
            Frontend::Balancer { ppi, cpi, .. } => self.unit_fits(*ppi, input) && self.unit_fits(*cpi, peak),
            Frontend::WeightedRoundRobin { cycle, .. } => cycle.iter().any(|&u| self.unit_fits(u, peak)),
            Frontend::Disaggregated { prefill, decode } => {
                self.unit_fits(*prefill, input) && (q.output_len == 1 || self.unit_fits(*decode, peak))
            }
            Frontend::Pipeline => (0..self.units.len()).any(|u| self.unit_fits(u, peak)),
            Frontend::Direct { unit, .. } => self.unit_fits(*unit, peak),
        }
    }

    fn dispatch(&mut self) -> bool {
        let mut progressed = false;
        match self.topo.frontend.clone() {
            Frontend::Balancer { ppi, cpi, max_inflight } => {
                while let Some(&r) = self.frontend.front() {
                    let Unit::Serial(p) = &self.units[ppi] else { unreachable!() };
                    let inflight = p.waiting.len() + p.current.is_some() as usize;
                    if !p.waiting.is_empty() || inflight >= max_inflight as usize {
                        break;
                    }
                    let stats = self.cpi_stats(cpi);
                    let low = &self.topo.instances[p.instance].profile;
                    let Unit::Chunked(c) = &self.units[cpi] else { unreachable!() };
                    let Exec::Single(hi) = c.exec else { unreachable!() };
                    let high = &self.topo.instances[hi].profile;
                    let d = choose_split(low, high, &stats, self.reqs[r].r.input_len);
                    self.frontend.pop_front();
                    let q = &mut self.reqs[r];
                    q.split = Some(d);
                    q.serial_len = d.partial_len;
                    q.stage = Stage::Queued;
                    q.unit = Some(ppi);
                    if self.opts.record_events || self.opts.record_iterations {
                        self.out.splits.push(SplitRecord {
                            request: q.r.id,
                            time: self.now,
                            stats,
                            decision: d,
                        });
                    }
                    let Unit::Serial(p) = &mut self.units[ppi] else { unreachable!() };
                    p.waiting.push_back(r);
                    self.log(self.now, "frontend", LogKind::Dispatch, Some(r));
                    progressed = true;
                }
            }
            Frontend::WeightedRoundRobin { cycle, caps } => {
                while let Some(&r) = self.frontend.front() {
                    let peak = self.reqs[r].r.peak_kv_tokens();
                    let mut target = cycle[self.wrr_cursor % cycle.len()];
                    if !self.unit_fits(target, peak) {
                        // Never routable there; take the first engine that can hold it.
                        target = *cycle.iter().find(|&&u| self.unit_fits(u, peak)).expect("checked at arrival");
                    }
                    let Unit::Chunked(c) = &mut self.units[target] else { unreachable!() };
                    if c.waiting.len() >= caps[target] as usize {
                        break;
                    }
                    c.waiting.push_back(r);
                    c.unfinished += 1;
                    self.frontend.pop_front();
                    self.wrr_cursor += 1;
                    let q = &mut self.reqs[r];
                    q.stage = Stage::Queued;
                    q.unit = Some(target);
                    q.assigned = Some(target);
                    self.log(self.now, "frontend", LogKind::Dispatch, Some(r));
                    progressed = true;
                }
            }
            Frontend::Disaggregated { prefill, .. } => {
                while let Some(r) = self.frontend.pop_front() {
                    let Unit::Serial(p) = &mut self.units[prefill] else { unreachable!() };
                    p.waiting.push_back(r);
                    let q = &mut self.reqs[r];
                    q.stage = Stage::Queued;
                    q.unit = Some(prefill);
                    self.log(self.now, "frontend", LogKind::Dispatch, Some(r));
                    progressed = true;
                }
            }
            Frontend::Pipeline => {
                while let Some(r) = self.frontend.pop_front() {
                    let peak = self.reqs[r].r.peak_kv_tokens();
                    let mut best: Option<(usize, usize)> = None;
                    for u in 0..self.units.len() {
                        if !self.unit_fits(u, peak) {
                            continue;
                        }
                        let Unit::Chunked(c) = &self.units[u] else { unreachable!() };
                        if best.is_none_or(|(_, n)| c.unfinished < n) {
                            best = Some((u, c.unfinished));
                        }
                    }
                    let (u, _) = best.expect("checked at arrival");
                    let Unit::Chunked(c) = &mut self.units[u] else { unreachable!() };
                    c.waiting.push_back(r);
                    c.unfinished += 1;
                    let q = &mut self.reqs[r];
                    q.stage = Stage::Queued;
                    q.unit = Some(u);
                    let name = self.unit_name(u);
                    self.log(self.now, &name, LogKind::Dispatch, Some(r));
                    progressed = true;
                }
            }
            Frontend::Direct { unit, prefilled } => {
                while let Some(r) = self.frontend.pop_front() {
                    let q = &mut self.reqs[r];
                    q.stage = Stage::Queued;
                    q.unit = Some(unit);
                    progressed = true;
                    if prefilled {
                        q.prefilled = q.r.input_len;
                        q.landing = Landing::Ready;
                        self.emit_token(r);
                        if self.reqs[r].stage == Stage::Done {
                            continue;
                        }
                    }
                    match &mut self.units[unit] {
                        Unit::Serial(s) => s.waiting.push_back(r),
                        Unit::Chunked(c) => {
                            c.waiting.push_back(r);
                            c.unfinished += 1;
                        }
                    }
                }
            }
        }
        progressed
    }

    fn cpi_stats(&self, cpi: usize) -> CpiStats {
        let Unit::Chunked(c) = &self.units[cpi] else { unreachable!() };
        let mut n_decode = 0;
        let mut ctx = 0;
        for &r in &c.running {
            let q = &self.reqs[r];
            if q.in_decode() {
                n_decode += 1;
                ctx += q.r.input_len as u64 + q.emitted as u64;
            }
        }
        CpiStats {
            n_decode,
            decode_ctx_sum: ctx,
            free_kv_blocks: c.ledgers[0].free_blocks(),
            max_batched_tokens: c.budget,
        }
    }

    // ---- unit start-up --------------------------------------------------

    fn settle(&mut self) {
        loop {
            let mut progressed = self.dispatch();
            for u in 0..self.units.len() {
                progressed |= self.try_start(u);
            }
            if !progressed {
                break;
            }
        }
        if self.opts.check_invariants {
            self.check_work_conserving();
        }
    }

    fn try_start(&mut self, u: usize) -> bool {
        match self.units[u] {
            Unit::Serial(_) => self.try_start_serial(u),
            Unit::Chunked(_) => self.try_start_chunked(u),
        }
    }

    fn try_start_serial(&mut self, u: usize) -> bool {
        let Unit::Serial(s) = &mut self.units[u] else { unreachable!() };
        if s.current.is_some() {
            return false;
        }
        let Some(&r) = s.waiting.front() else { return false };
        let len = self.reqs[r].serial_len as u64;
        let blocks = s.ledger.blocks_for(len);
        if !s.ledger.can_reserve(blocks) {
            return false;
        }
        s.waiting.pop_front();
        s.ledger.reserve(r, blocks);
        let grown = s.ledger.grow_to(r, blocks);
        s.current = Some(r);
        let inst = s.instance;
        let (kv_used, kv_cap) = (s.ledger.allocated(), s.ledger.capacity);
        if let Err(e) = grown {
            self.violation(e);
        }
        let spec = &self.topo.instances[inst];
        let d = prefill_time(&spec.profile, len);
        let end = self.now + d;
        self.queue.push(end, Event::IterationComplete(u));
        self.reqs[r].stage = Stage::Prefilling;
        self.out.usage[inst].iterations += 1;
        self.out.usage[inst].busy_ms += d;
        let name = spec.name.clone();
        self.log(self.now, &name, LogKind::PrefillStart, Some(r));
        if self.opts.record_iterations {
            self.out.iterations.push(IterationRecord {
                instance: name,
                start: self.now,
                end,
                batched_tokens: len,
                prefill_tokens: len,
                decode_requests: 0,
                kv_blocks_used: kv_used,
                kv_blocks_capacity: kv_cap,
                token_budget: None,
            });
        }
        true
    }

    fn try_start_chunked(&mut self, u: usize) -> bool {
        let Sim { units, reqs, .. } = self;
        let Unit::Chunked(c) = &mut units[u] else { unreachable!() };
        if c.in_flight.is_some() {
            return false;
        }
        let budget = c.budget;
        let mut progressed = false;
        let mut entries = Vec::with_capacity(c.running.len() + 1);
        let mut tokens = 0u64;

        for &r in &c.running {
            if reqs[r].in_decode() {
                entries.push((r, Work::Decode));
                tokens += 1;
            }
        }
        for &r in &c.running {
            let q = &reqs[r];
            if q.in_decode() {
                continue;
            }
            if q.prefilled == q.r.input_len {
                entries.push((r, Work::Handoff));
            } else if tokens < budget {
                let n = ((q.r.input_len - q.prefilled) as u64).min(budget - tokens);
                entries.push((r, Work::Chunk(n as u32)));
                tokens += n;
            }
        }

        let mut pulls = Vec::new();
        while let Some(&r) = c.waiting.front() {
            if c.running.len() + c.transferring >= budget as usize {
                break;
            }
            let q = &mut reqs[r];
            if q.landing != Landing::Pull && tokens >= budget {
                break;
            }
            let peak = q.r.peak_kv_tokens();
            if !c.ledgers.iter().all(|l| l.can_reserve(l.blocks_for(peak))) {
                break;
            }
            c.waiting.pop_front();
            for l in &mut c.ledgers {
                let b = l.blocks_for(peak);
                l.reserve(r, b);
            }
            progressed = true;
            match q.landing {
                Landing::Pull => {
                    q.stage = Stage::Transferring;
                    c.transferring += 1;
                    pulls.push(r);
                }
                Landing::Ready => {
                    q.stage = Stage::Running;
                    c.running.push(r);
                    entries.push((r, Work::Decode));
                    tokens += 1;
                }
                Landing::Fresh => {
                    q.stage = Stage::Running;
                    c.running.push(r);
                    let n = (q.r.input_len as u64).min(budget - tokens);
                    entries.push((r, Work::Chunk(n as u32)));
                    tokens += n;
                }
            }
        }

        // Allocate blocks for the context each request reaches this iteration.
        let mut errors = Vec::new();
        let mut prefill_ctx = 0u64;
        let mut decode_ctx = 0u64;
        let mut prefill_tokens = 0u64;
        let mut n_decode = 0u64;
        for &(r, w) in &entries {
            let q = &reqs[r];
            let ctx = match w {
                Work::Decode => {
                    n_decode += 1;
                    let ctx = q.r.input_len as u64 + q.emitted as u64;
                    decode_ctx += ctx;
                    ctx
                }
                Work::Chunk(n) => {
                    prefill_tokens += n as u64;
                    let ctx = q.prefilled as u64 + n as u64;
                    prefill_ctx += ctx;
                    ctx
                }
                Work::Handoff => {
                    prefill_ctx += q.r.input_len as u64;
                    q.r.input_len as u64
                }
            };
            for l in &mut c.ledgers {
                let b = l.blocks_for(ctx);
                if let Err(e) = l.grow_to(r, b) {
                    errors.push(e);
                }
            }
        }
        // Pulled prefixes land in blocks reserved above.
        for &r in &pulls {
            let ctx = reqs[r].prefilled as u64;
            for l in &mut c.ledgers {
                let b = l.blocks_for(ctx);
                if let Err(e) = l.grow_to(r, b) {
                    errors.push(e);
                }
            }
        }
        if tokens > budget {
            errors.push(format!("{}: batched {tokens} tokens over budget {budget}", c.name));
        }
        let kv_used = c.ledgers.iter().map(KvLedger::allocated).max().unwrap_or(0);
        let kv_cap = c.ledgers.iter().map(|l| l.capacity).min().unwrap_or(0);
        let exec = c.exec;
        let name = c.name.clone();
        let started = !entries.is_empty();
        if started {
            c.in_flight = Some(Batch { entries });
        }
        for e in errors {
            self.violation(e);
        }
        for r in pulls {
            let from = match self.topo.frontend {
                Frontend::Balancer { ppi, .. } => ppi,
                _ => u,
            };
            let tokens = self.reqs[r].prefilled as u64;
            self.start_transfer(r, tokens, from, u);
        }
        if !started {
            return progressed;
        }

        let end = match exec {
            Exec::Single(inst) => {
                let spec = &self.topo.instances[inst];
                let d = chunked_iter_time(&spec.profile, prefill_ctx, decode_ctx);
                self.out.usage[inst].iterations += 1;
                self.out.usage[inst].busy_ms += d;
                let end = self.now + d;
                if self.opts.record_iterations {
                    self.out.iterations.push(IterationRecord {
                        instance: spec.name.clone(),
                        start: self.now,
                        end,
                        batched_tokens: tokens,
                        prefill_tokens,
                        decode_requests: n_decode,
                        kv_blocks_used: kv_used,
                        kv_blocks_capacity: kv_cap,
                        token_budget: Some(budget),
                    });
                }
                end
            }
            Exec::Pipeline => {
                let pp = self.topo.pipeline.as_ref().expect("pipeline topology");
                let d = pipeline_stage_times(&self.topo.instances, pp, prefill_ctx, decode_ctx);
                let s0 = self.now.max(self.stage_free[0]);
                let e0 = s0 + d[0];
                let s1 = e0.max(self.stage_free[1]);
                let e1 = s1 + d[1];
                self.stage_free = [e0, e1];
                for (stage, (start, end)) in [(s0, e0), (s1, e1)].into_iter().enumerate() {
                    self.out.usage[stage].iterations += 1;
                    self.out.usage[stage].busy_ms += end - start;
                    if self.opts.record_iterations {
                        self.out.iterations.push(IterationRecord {
                            instance: self.topo.instances[stage].name.clone(),
                            start,
                            end,
                            batched_tokens: tokens,
                            prefill_tokens,
                            decode_requests: n_decode,
                            kv_blocks_used: kv_used,
                            kv_blocks_capacity: kv_cap,
                            token_budget: Some(budget),
                        });
                    }
                }
                e1
            }
        };
        self.queue.push(end, Event::IterationComplete(u));
        self.log(self.now, &name, LogKind::IterationStart, None);
        true
    }

    /// No unit may sit idle while it could start work.
    fn check_work_conserving(&mut self) {
        let mut idle = Vec::new();
        for (u, unit) in self.units.iter().enumerate() {
            match unit {
                Unit::Serial(s) => {
                    if s.current.is_none() {
                        if let Some(&r) = s.waiting.front() {
                            let b = s.ledger.blocks_for(self.reqs[r].serial_len as u64);
                            if s.ledger.can_reserve(b) {
                                idle.push(u);
                            }
                        }
                    }
                }
                Unit::Chunked(c) => {
                    if c.in_flight.is_none() && !c.running.is_empty() {
                        idle.push(u);
                    }
                }
            }
        }
        for u in idle {
            let name = self.unit_name(u);
            self.out
                .violations
                .push(format!("{name} idle at {} ms with runnable work", self.now));
        }
    }
}

/// Stage durations of one pipeline micro-batch iteration. Each stage does
/// its share of the layers and pays one activation handoff.
pub(crate) fn pipeline_stage_times(
    instances: &[InstanceSpec],
    pp: &PipelineSpec,
    prefill_ctx: u64,
    decode_ctx: u64,
) -> [f64; 2] {
    let total = pp.total_layers as f64;
    let mut d = [0.0; 2];
    for (s, slot) in d.iter_mut().enumerate() {
        let full = chunked_iter_time(&instances[s].profile, prefill_ctx, decode_ctx);
        *slot = pp.layers[s] as f64 / total * full + pp.comm_ms;
    }
    d
}

fn build_units(topo: &Topology) -> Vec<Unit> {
    let serial = |i: usize, next: SerialNext| {
        let spec = &topo.instances[i];
        Unit::Serial(SerialUnit {
            instance: i,
            waiting: VecDeque::new(),
            current: None,
            ledger: KvLedger::new(spec.kv_capacity_blocks, spec.profile.kv_block_size),
            next,
        })
    };
    let chunked = |i: usize| {
        let spec = &topo.instances[i];
        Unit::Chunked(ChunkedUnit {
            name: spec.name.clone(),
            exec: Exec::Single(i),
            budget: spec.budget as u64,
            waiting: VecDeque::new(),
            running: Vec::new(),
            transferring: 0,
            unfinished: 0,
            ledgers: vec![KvLedger::new(spec.kv_capacity_blocks, spec.profile.kv_block_size)],
            in_flight: None,
        })
    };
    match &topo.frontend {
        Frontend::Balancer { ppi, cpi, .. } => {
            let mut units: Vec<Option<Unit>> = (0..topo.instances.len()).map(|_| None).collect();
            units[*ppi] = Some(serial(*ppi, SerialNext::NotifyFrontend));
            units[*cpi] = Some(chunked(*cpi));
            units.into_iter().map(|u| u.expect("every instance bound")).collect()
        }
        Frontend::Disaggregated { prefill, decode } => {
            let mut units: Vec<Option<Unit>> = (0..topo.instances.len()).map(|_| None).collect();
            units[*prefill] = Some(serial(*prefill, SerialNext::TransferTo(*decode)));
            units[*decode] = Some(chunked(*decode));
            units.into_iter().map(|u| u.expect("every instance bound")).collect()
        }
        Frontend::WeightedRoundRobin { .. } => (0..topo.instances.len()).map(chunked).collect(),
        Frontend::Direct { .. } => (0..topo.instances.len())
            .map(|i| {
                if topo.instances[i].role.is_serial() {
                    serial(i, SerialNext::Sink)
                } else {
                    chunked(i)
                }
            })
            .collect(),
        Frontend::Pipeline => {
            let pp = topo.pipeline.as_ref().expect("pipeline topology");
            (0..pp.micro_batches)
                .map(|m| {
                    Unit::Chunked(ChunkedUnit {
                        name: format!("pp-mb{m}"),
                        exec: Exec::Pipeline,
                        budget: topo.instances[0].budget as u64,
                        waiting: VecDeque::new(),
                        running: Vec::new(),
                        transferring: 0,
                        unfinished: 0,
                        ledgers: (0..2)
                            .map(|s| {
                                KvLedger::new(
                                    pp.kv_blocks_per_micro_batch[s],
                                    topo.instances[s].profile.kv_block_size,
                                )
                            })
                            .collect(),
                        in_flight: None,
                    })
                })
                .collect()
        }
    }
}
