//! Discrete-event engine for the MS -> NW-TT -> bridge -> DS-TT -> SL downlink.
//!
//! Probes stamp at transmission start. The MS and SL egress ports are optionally gated;
//! translators only add their processing delay. DS-TT serializes onto the DS->SL link in
//! bridge exit order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ProbeRecord;
use crate::bridge::BridgeState;
use crate::config::{ConfigInvalid, ExperimentConfig, ValidatedConfig};
use crate::gate::GateControlList;
use crate::model::{sending_delay, transmission_time, DcGeneration, LinkSpec, NodeId, StreamSpec, Topology};
use crate::time::TimeNs;

/// Min-time event set; equal times pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    next_ordinal: u64,
}

#[derive(Debug)]
struct Entry<E> {
    time: TimeNs,
    ordinal: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.ordinal) == (other.time, other.ordinal)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.ordinal).cmp(&(other.time, other.ordinal))
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_ordinal: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn push(&mut self, time: TimeNs, event: E) {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        self.heap.push(Reverse(Entry { time, ordinal, event }));
    }

    pub fn pop(&mut self) -> Option<(TimeNs, E)> {
        self.heap.pop().map(|Reverse(e)| (e.time, e.event))
    }

    pub fn peek_time(&self) -> Option<TimeNs> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("topology has no link {from} -> {to}")]
pub struct MissingLink {
    pub from: NodeId,
    pub to: NodeId,
}

fn require_link(topo: &Topology, from: NodeId, to: NodeId) -> Result<&LinkSpec, MissingLink> {
    topo.link(from, to).ok_or(MissingLink { from, to })
}

/// Constant part of the measured delay: `d_send(MS->NW) + d_send(DS->SL) + d_proc(SL)`.
#[allow(non_snake_case)]
pub fn compute_K(topo: &Topology, len_bytes: u32) -> Result<TimeNs, MissingLink> {
    let up = require_link(topo, NodeId::Ms, NodeId::Nw)?;
    let down = require_link(topo, NodeId::Ds, NodeId::Sl)?;
    Ok(sending_delay(len_bytes, up) + sending_delay(len_bytes, down) + topo.proc_delay(NodeId::Sl))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub dropped: u64,
    pub max_occupancy_bytes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fate {
    Delivered,
    Dropped(NodeId),
    /// Still queued or in flight when the run ended.
    Pending,
}

/// Life of one DC packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketTrace {
    pub pcp: u8,
    pub seq: u32,
    pub created: TimeNs,
    pub ms_tx: Option<TimeNs>,
    /// NW-TT arrival to DS-TT line start.
    pub bridge_delay: Option<TimeNs>,
    pub sl_enqueue: Option<TimeNs>,
    pub sl_tx: Option<TimeNs>,
    pub fate: Fate,
}

impl PacketTrace {
    /// Measured delay between the MS and SL probes.
    pub fn d_emp(&self) -> Option<TimeNs> {
        Some(self.sl_tx? - self.ms_tx?)
    }

    pub fn sl_wait(&self) -> Option<TimeNs> {
        Some(self.sl_tx? - self.sl_enqueue?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub queued: u64,
    pub in_transit: u64,
}

impl Counts {
    pub fn conserved(&self) -> bool {
        self.generated == self.delivered + self.dropped + self.queued + self.in_transit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub k_by_pcp: BTreeMap<u8, TimeNs>,
    /// Cycle and SL cycle start used to fold departures, per DC pcp.
    pub cycle_by_pcp: BTreeMap<u8, (TimeNs, TimeNs)>,
    pub probes: BTreeMap<(NodeId, u8), Vec<ProbeRecord>>,
    pub queues: BTreeMap<(NodeId, u8), QueueStats>,
    /// DC packets ordered by `(pcp, seq)`.
    pub packets: Vec<PacketTrace>,
    pub counts: Counts,
    pub end_time: TimeNs,
}

impl RunResult {
    pub fn packets_for(&self, pcp: u8) -> impl Iterator<Item = &PacketTrace> + '_ {
        self.packets.iter().filter(move |p| p.pcp == pcp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum JitterError {
    #[error("fewer than two delivered packets")]
    InsufficientData,
    #[error("no cycle known for pcp {0}")]
    NoCycle(u8),
}

/// Spread of SL departure phases within the cycle, over on-time packets.
///
/// Packets are on time when `D_emp - min(D_emp) < T_C / 2`. Bursts are compared rank by
/// rank: the `r`-th departure of every cycle occurrence is one group, and the result is
/// the widest phase spread of any group.
pub fn measure_departure_jitter(result: &RunResult, pcp: u8) -> Result<TimeNs, JitterError> {
    let &(cycle, base) = result.cycle_by_pcp.get(&pcp).ok_or(JitterError::NoCycle(pcp))?;
    let mut delivered: Vec<(TimeNs, TimeNs)> = result
        .packets_for(pcp)
        .filter_map(|p| Some((p.sl_tx?, p.d_emp()?)))
        .collect();
    if delivered.len() < 2 {
        return Err(JitterError::InsufficientData);
    }
    let min = delivered.iter().map(|d| d.1).min().expect("non-empty");
    delivered.retain(|d| (d.1 - min).ns() * 2 < cycle.ns());
    delivered.sort_unstable();
    if delivered.len() < 2 {
        return Err(JitterError::InsufficientData);
    }
    let mut by_rank: Vec<(TimeNs, TimeNs)> = Vec::new();
    let mut occurrence = i64::MIN;
    let mut rank = 0usize;
    for (tx, _) in delivered {
        let occ = (tx - base).div_floor(cycle);
        if occ != occurrence {
            occurrence = occ;
            rank = 0;
        }
        let phase = (tx - base).rem_euclid(cycle);
        if rank == by_rank.len() {
            by_rank.push((phase, phase));
        } else {
            let r = &mut by_rank[rank];
            *r = (r.0.min(phase), r.1.max(phase));
        }
        rank += 1;
    }
    Ok(by_rank.iter().map(|(lo, hi)| *hi - *lo).max().unwrap_or(TimeNs::ZERO))
}

/// Validates the config and runs it.
pub fn simulate(config: &ExperimentConfig) -> Result<RunResult, ConfigInvalid> {
    Ok(run(&config.validate()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Port {
    Ms = 0,
    Sl = 1,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Emit(usize),
    Enqueue(Port, usize),
    Kick(Port),
    TxDone(Port),
    NwArrive(usize),
    BridgeExit(usize),
}

#[derive(Debug, Clone)]
struct Packet {
    pcp: u8,
    seq: u32,
    len: u32,
    created: TimeNs,
    traced: bool,
    ms_tx: Option<TimeNs>,
    nw_arrival: TimeNs,
    bridge_delay: Option<TimeNs>,
    sl_enqueue: Option<TimeNs>,
    sl_tx: Option<TimeNs>,
}

#[derive(Debug, Default)]
struct Queue {
    fifo: VecDeque<usize>,
    bytes: u32,
    stats: QueueStats,
}

#[derive(Debug)]
struct PortState {
    node: NodeId,
    gcl: Option<GateControlList>,
    bandwidth_bps: u64,
    prop: TimeNs,
    queues: BTreeMap<u8, Queue>,
    current: Option<usize>,
    next_kick: Option<TimeNs>,
}

struct Engine<'a> {
    cfg: &'a ExperimentConfig,
    events: EventQueue<Event>,
    packets: Vec<Option<Packet>>,
    free: Vec<usize>,
    ports: [PortState; 2],
    bridge: BridgeState,
    rng: ChaCha8Rng,
    seq: Vec<u32>,
    /// Streams whose MS queue is kept full.
    backlog: BTreeMap<u8, usize>,
    ds_free: TimeNs,
    ds_link: LinkSpec,
    probe_ms: bool,
    probe_sl: bool,
    probes: BTreeMap<(NodeId, u8), Vec<ProbeRecord>>,
    traces: Vec<PacketTrace>,
    counts: Counts,
}

fn port_link(topo: &Topology, port: Port) -> LinkSpec {
    match port {
        Port::Ms => *topo.link(NodeId::Ms, NodeId::Nw).expect("validated topology"),
        Port::Sl => *topo
            .link(NodeId::Sl, NodeId::Rx)
            .or_else(|| topo.link(NodeId::Ds, NodeId::Sl))
            .expect("validated topology"),
    }
}

/// Runs a validated config to completion.
pub fn run(v: &ValidatedConfig) -> RunResult {
    let cfg = &v.config;
    let topo = &cfg.topology;
    let pcps: Vec<u8> = cfg.streams.iter().map(StreamSpec::pcp).collect();
    let make_port = |port: Port, node, gcl: &Option<GateControlList>| {
        let link = port_link(topo, port);
        PortState {
            node,
            gcl: gcl.clone(),
            bandwidth_bps: link.bandwidth_bps,
            prop: link.prop_delay,
            queues: pcps.iter().map(|&p| (p, Queue::default())).collect(),
            current: None,
            next_kick: None,
        }
    };
    let mut e = Engine {
        cfg,
        events: EventQueue::default(),
        packets: Vec::new(),
        free: Vec::new(),
        ports: [make_port(Port::Ms, NodeId::Ms, &v.gcl_ms), make_port(Port::Sl, NodeId::Sl, &v.gcl_sl)],
        bridge: BridgeState::new(&cfg.bridge, pcps.iter().copied()).expect("validated bridge model"),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        seq: vec![0; cfg.streams.len()],
        backlog: BTreeMap::new(),
        ds_free: TimeNs::ZERO,
        ds_link: *topo.link(NodeId::Ds, NodeId::Sl).expect("validated topology"),
        probe_ms: cfg.probe_points.contains(&NodeId::Ms),
        probe_sl: cfg.probe_points.contains(&NodeId::Sl),
        probes: BTreeMap::new(),
        traces: Vec::new(),
        counts: Counts::default(),
    };
    e.start();
    let end = cfg.duration + cfg.drain;
    let mut now = TimeNs::ZERO;
    while let Some(t) = e.events.peek_time() {
        if t > end {
            break;
        }
        let (t, ev) = e.events.pop().expect("peeked");
        now = t;
        e.handle(t, ev);
    }
    e.finish(v, now)
}

impl Engine<'_> {
    fn start(&mut self) {
        for (i, s) in self.cfg.streams.iter().enumerate() {
            match s {
                StreamSpec::Dc(d) if d.generation == DcGeneration::Backlog => {
                    self.backlog.insert(d.pcp, i);
                    while self.ports[0].queues[&d.pcp].bytes + d.packet_len_bytes <= self.cfg.queue_capacity_bytes {
                        let pid = self.create(i, TimeNs::ZERO);
                        self.enqueue(Port::Ms, pid, TimeNs::ZERO);
                    }
                }
                StreamSpec::Dc(d) => {
                    if d.phase < self.cfg.duration {
                        self.events.push(d.phase, Event::Emit(i));
                    }
                }
                StreamSpec::Be(_) => self.events.push(TimeNs::ZERO, Event::Emit(i)),
            }
        }
    }

    fn create(&mut self, stream: usize, now: TimeNs) -> usize {
        let s = &self.cfg.streams[stream];
        let seq = self.seq[stream];
        self.seq[stream] = seq.wrapping_add(1);
        self.counts.generated += 1;
        let p = Packet {
            pcp: s.pcp(),
            seq,
            len: s.packet_len_bytes(),
            created: now,
            traced: matches!(s, StreamSpec::Dc(_)),
            ms_tx: None,
            nw_arrival: TimeNs::ZERO,
            bridge_delay: None,
            sl_enqueue: None,
            sl_tx: None,
        };
        match self.free.pop() {
            Some(id) => {
                self.packets[id] = Some(p);
                id
            }
            None => {
                self.packets.push(Some(p));
                self.packets.len() - 1
            }
        }
    }

    fn pkt(&mut self, id: usize) -> &mut Packet {
        self.packets[id].as_mut().expect("live packet")
    }

    fn retire(&mut self, id: usize, fate: Fate) {
        let p = self.packets[id].take().expect("live packet");
        self.free.push(id);
        if p.traced {
            self.traces.push(trace(&p, fate));
        }
    }

    fn handle(&mut self, now: TimeNs, ev: Event) {
        match ev {
            Event::Emit(i) => self.emit(i, now),
            Event::Enqueue(port, id) => self.enqueue(port, id, now),
            Event::Kick(port) => {
                let ps = &mut self.ports[port as usize];
                if ps.next_kick == Some(now) {
                    ps.next_kick = None;
                    self.try_start(port, now);
                }
            }
            Event::TxDone(port) => {
                let id = self.ports[port as usize].current.take().expect("port was transmitting");
                match port {
                    Port::Ms => {
                        let prop = self.ports[0].prop;
                        self.events.push(now + prop, Event::NwArrive(id));
                    }
                    Port::Sl => {
                        self.counts.delivered += 1;
                        self.retire(id, Fate::Delivered);
                    }
                }
                self.try_start(port, now);
            }
            Event::NwArrive(id) => {
                let entry = now + self.cfg.topology.proc_delay(NodeId::Nw);
                let p = self.pkt(id);
                p.nw_arrival = now;
                let (pcp, len) = (p.pcp, p.len);
                let exit = self
                    .bridge
                    .enter(pcp, len, entry, &mut self.rng)
                    .expect("bridge covers every stream pcp");
                self.events.push(exit, Event::BridgeExit(id));
            }
            Event::BridgeExit(id) => {
                let len = self.pkt(id).len;
                self.bridge.leave(len);
                let ready = now + self.cfg.topology.proc_delay(NodeId::Ds);
                let start = ready.max(self.ds_free);
                self.ds_free = start + transmission_time(len, self.ds_link.bandwidth_bps);
                let p = self.pkt(id);
                p.bridge_delay = Some(start - p.nw_arrival);
                let at = start + sending_delay(len, &self.ds_link) + self.cfg.topology.proc_delay(NodeId::Sl);
                self.events.push(at, Event::Enqueue(Port::Sl, id));
            }
        }
    }

    fn emit(&mut self, i: usize, now: TimeNs) {
        let proc = self.cfg.topology.proc_delay(NodeId::Ms);
        let next = match &self.cfg.streams[i] {
            StreamSpec::Dc(d) => {
                for _ in 0..d.burst_size {
                    let id = self.create(i, now);
                    self.events.push(now + proc, Event::Enqueue(Port::Ms, id));
                }
                now + d.app_cycle
            }
            StreamSpec::Be(b) => {
                let id = self.create(i, now);
                self.events.push(now + proc, Event::Enqueue(Port::Ms, id));
                now + b.interval()
            }
        };
        if next < self.cfg.duration {
            self.events.push(next, Event::Emit(i));
        }
    }

    fn enqueue(&mut self, port: Port, id: usize, now: TimeNs) {
        let cap = self.cfg.queue_capacity_bytes;
        let p = self.pkt(id);
        if port == Port::Sl {
            p.sl_enqueue = Some(now);
        }
        let (pcp, len) = (p.pcp, p.len);
        let ps = &mut self.ports[port as usize];
        let q = ps.queues.get_mut(&pcp).expect("queue per stream pcp");
        if q.bytes + len > cap {
            q.stats.dropped += 1;
            let node = ps.node;
            self.counts.dropped += 1;
            self.retire(id, Fate::Dropped(node));
            return;
        }
        q.fifo.push_back(id);
        q.bytes += len;
        q.stats.enqueued += 1;
        q.stats.max_occupancy_bytes = q.stats.max_occupancy_bytes.max(q.bytes);
        self.try_start(port, now);
    }

    /// Starts the next frame if one may go now, otherwise arms a kick for the earliest start.
    fn try_start(&mut self, port: Port, now: TimeNs) {
        let ps = &mut self.ports[port as usize];
        if ps.current.is_some() {
            return;
        }
        let mut best: Option<(TimeNs, u8)> = None;
        for (&pcp, q) in ps.queues.iter().rev() {
            let Some(&head) = q.fifo.front() else { continue };
            let len = self.packets[head].as_ref().expect("queued packet").len;
            let tx = transmission_time(len, ps.bandwidth_bps);
            let start = match &ps.gcl {
                None => Some(now),
                Some(g) => g.next_tx_start(pcp, now, tx),
            };
            if let Some(s) = start {
                if best.is_none_or(|b| s < b.0) {
                    best = Some((s, pcp));
                }
            }
        }
        match best {
            Some((s, pcp)) if s == now => self.transmit(port, pcp, now),
            Some((s, _)) if ps.next_kick.is_none_or(|k| s < k) => {
                ps.next_kick = Some(s);
                self.events.push(s, Event::Kick(port));
            }
            _ => {}
        }
    }

    fn transmit(&mut self, port: Port, pcp: u8, now: TimeNs) {
        let ps = &mut self.ports[port as usize];
        let q = ps.queues.get_mut(&pcp).expect("queue per stream pcp");
        let id = q.fifo.pop_front().expect("non-empty queue");
        let p = self.packets[id].as_mut().expect("queued packet");
        q.bytes -= p.len;
        ps.current = Some(id);
        let tx = transmission_time(p.len, ps.bandwidth_bps);
        let (node, probe) = match port {
            Port::Ms => {
                p.ms_tx = Some(now);
                (NodeId::Ms, self.probe_ms)
            }
            Port::Sl => {
                p.sl_tx = Some(now);
                (NodeId::Sl, self.probe_sl)
            }
        };
        if probe {
            self.probes.entry((node, pcp)).or_default().push(ProbeRecord {
                seq: p.seq,
                egress_ns: now,
            });
        }
        self.events.push(now + tx, Event::TxDone(port));
        if port == Port::Ms && now < self.cfg.duration {
            if let Some(&stream) = self.backlog.get(&pcp) {
                let id = self.create(stream, now);
                self.enqueue(Port::Ms, id, now);
            }
        }
    }

    fn finish(mut self, v: &ValidatedConfig, now: TimeNs) -> RunResult {
        let cfg = self.cfg;
        let queued: u64 = self.ports.iter().flat_map(|p| p.queues.values()).map(|q| q.fifo.len() as u64).sum();
        let live: u64 = self.packets.iter().filter(|p| p.is_some()).count() as u64;
        self.counts.queued = queued;
        self.counts.in_transit = live - queued;
        for p in self.packets.iter().flatten() {
            if p.traced {
                self.traces.push(trace(p, Fate::Pending));
            }
        }
        self.traces.sort_by_key(|t| (t.pcp, t.seq));
        let mut queues = BTreeMap::new();
        for ps in &self.ports {
            for (&pcp, q) in &ps.queues {
                queues.insert((ps.node, pcp), q.stats);
            }
        }
        let mut k_by_pcp = BTreeMap::new();
        let mut cycle_by_pcp = BTreeMap::new();
        for s in &cfg.streams {
            if let Ok(k) = compute_K(&cfg.topology, s.packet_len_bytes()) {
                k_by_pcp.insert(s.pcp(), k);
            }
            if let StreamSpec::Dc(d) = s {
                let c = match (&v.gcl_sl, &v.gcl_ms) {
                    (Some(g), _) => (g.cycle(), g.base_offset()),
                    (None, Some(g)) => (g.cycle(), TimeNs::ZERO),
                    (None, None) => (d.app_cycle, TimeNs::ZERO),
                };
                cycle_by_pcp.insert(d.pcp, c);
            }
        }
        RunResult {
            seed: cfg.seed,
            k_by_pcp,
            cycle_by_pcp,
            probes: self.probes,
            queues,
            packets: self.traces,
            counts: self.counts,
            end_time: now,
        }
    }
}

fn trace(p: &Packet, fate: Fate) -> PacketTrace {
    PacketTrace {
        pcp: p.pcp,
        seq: p.seq,
        created: p.created,
        ms_tx: p.ms_tx,
        bridge_delay: p.bridge_delay,
        sl_enqueue: p.sl_enqueue,
        sl_tx: p.sl_tx,
        fate,
    }
}
