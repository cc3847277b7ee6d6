//! Topology, link and stream descriptions for the MS -> NW-TT -> 5G -> DS-TT -> SL pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::time::{div_ceil_u128, TimeNs};

/// Default port capacity of the reference switches (6.8 kB per queue).
pub const DEFAULT_QUEUE_CAPACITY_BYTES: u32 = 6_800;
/// 1 GbE.
pub const GIGABIT: u64 = 1_000_000_000;
/// Switch processing delay when none is configured.
pub const DEFAULT_SWITCH_PROC: TimeNs = TimeNs::from_us(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeId {
    /// Master TSN switch.
    Ms,
    /// Network-side TSN translator.
    Nw,
    /// Device-side TSN translator.
    Ds,
    /// Slave TSN switch.
    Sl,
    Tx,
    Rx,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeId::Ms => "MS",
            NodeId::Nw => "NW",
            NodeId::Ds => "DS",
            NodeId::Sl => "SL",
            NodeId::Tx => "TX",
            NodeId::Rx => "RX",
        };
        f.write_str(s)
    }
}

/// The downlink path every packet follows.
pub const DOWNLINK_PATH: [NodeId; 4] = [NodeId::Ms, NodeId::Nw, NodeId::Ds, NodeId::Sl];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default)]
    pub proc_delay: TimeNs,
}

/// A wired link. Sending delay is derived from it, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth_bps: u64,
    #[serde(default)]
    pub prop_delay: TimeNs,
}

impl LinkSpec {
    pub fn gigabit(from: NodeId, to: NodeId) -> Self {
        LinkSpec {
            from,
            to,
            bandwidth_bps: GIGABIT,
            prop_delay: TimeNs::ZERO,
        }
    }

    fn joins(&self, a: NodeId, b: NodeId) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }
}

/// Serialization time of `len_bytes` on a link of `bandwidth_bps`, rounded up to whole ns.
pub fn transmission_time(len_bytes: u32, bandwidth_bps: u64) -> TimeNs {
    debug_assert!(bandwidth_bps > 0);
    let bits = 8 * len_bytes as u128;
    TimeNs(div_ceil_u128(bits * 1_000_000_000, bandwidth_bps as u128) as i64)
}

/// Propagation plus transmission delay of one frame on `link`.
pub fn sending_delay(len_bytes: u32, link: &LinkSpec) -> TimeNs {
    debug_assert!(len_bytes > 0);
    link.prop_delay + transmission_time(len_bytes, link.bandwidth_bps)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub path: Vec<NodeId>,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::reference()
    }
}

impl Topology {
    /// The testbed layout: 1 GbE wired hops, 1 us switch processing, zero-delay translators.
    pub fn reference() -> Self {
        Topology {
            nodes: vec![
                NodeSpec {
                    id: NodeId::Ms,
                    proc_delay: DEFAULT_SWITCH_PROC,
                },
                NodeSpec {
                    id: NodeId::Nw,
                    proc_delay: TimeNs::ZERO,
                },
                NodeSpec {
                    id: NodeId::Ds,
                    proc_delay: TimeNs::ZERO,
                },
                NodeSpec {
                    id: NodeId::Sl,
                    proc_delay: DEFAULT_SWITCH_PROC,
                },
            ],
            links: vec![
                LinkSpec::gigabit(NodeId::Ms, NodeId::Nw),
                LinkSpec::gigabit(NodeId::Ds, NodeId::Sl),
            ],
            path: DOWNLINK_PATH.to_vec(),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeSpec> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Processing delay of `id`, zero for nodes that are not listed.
    pub fn proc_delay(&self, id: NodeId) -> TimeNs {
        self.node(id).map_or(TimeNs::ZERO, |n| n.proc_delay)
    }

    /// The link carrying traffic from `from` to `to`. Wired links are symmetric, so a link
    /// declared in the opposite direction also qualifies.
    pub fn link(&self, from: NodeId, to: NodeId) -> Option<&LinkSpec> {
        self.links
            .iter()
            .find(|l| l.from == from && l.to == to)
            .or_else(|| self.links.iter().find(|l| l.joins(from, to)))
    }

    pub fn link_mut(&mut self, from: NodeId, to: NodeId) -> Option<&mut LinkSpec> {
        self.links.iter_mut().find(|l| l.joins(from, to))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopologyViolation {
    UnexpectedPath(Vec<NodeId>),
    MissingNode(NodeId),
    DuplicateNode(NodeId),
    NegativeProcDelay(NodeId),
    PathBroken(NodeId, NodeId),
    DuplicateLink(NodeId, NodeId),
    BadBandwidth(NodeId, NodeId),
    NegativePropDelay(NodeId, NodeId),
    Asymmetric(NodeId, NodeId),
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyViolation::UnexpectedPath(p) => write!(f, "path must be MS,NW,DS,SL, got {p:?}"),
            TopologyViolation::MissingNode(n) => write!(f, "path node {n} is not declared"),
            TopologyViolation::DuplicateNode(n) => write!(f, "node {n} declared more than once"),
            TopologyViolation::NegativeProcDelay(n) => write!(f, "node {n} has negative proc_delay"),
            TopologyViolation::PathBroken(a, b) => write!(f, "no link joins {a} and {b}"),
            TopologyViolation::DuplicateLink(a, b) => write!(f, "link {a}->{b} declared twice"),
            TopologyViolation::BadBandwidth(a, b) => write!(f, "link {a}->{b} has zero bandwidth"),
            TopologyViolation::NegativePropDelay(a, b) => {
                write!(f, "link {a}->{b} has negative prop_delay")
            }
            TopologyViolation::Asymmetric(a, b) => {
                write!(f, "wired link {a}<->{b} differs between directions")
            }
        }
    }
}

/// Checks path connectivity, wired-link symmetry and positive capacities.
///
/// The result is sorted and deduplicated, so it does not depend on declaration order.
pub fn validate_topology(topo: &Topology) -> Vec<TopologyViolation> {
    let mut out = Vec::new();

    if topo.path != DOWNLINK_PATH {
        out.push(TopologyViolation::UnexpectedPath(topo.path.clone()));
    }

    let mut seen_nodes = BTreeMap::new();
    for n in &topo.nodes {
        *seen_nodes.entry(n.id).or_insert(0usize) += 1;
        if n.proc_delay.is_negative() {
            out.push(TopologyViolation::NegativeProcDelay(n.id));
        }
    }
    for (id, count) in &seen_nodes {
        if *count > 1 {
            out.push(TopologyViolation::DuplicateNode(*id));
        }
    }
    for id in &topo.path {
        if !seen_nodes.contains_key(id) {
            out.push(TopologyViolation::MissingNode(*id));
        }
    }

    let mut directed = BTreeMap::new();
    for l in &topo.links {
        *directed.entry((l.from, l.to)).or_insert(0usize) += 1;
        if l.bandwidth_bps == 0 {
            out.push(TopologyViolation::BadBandwidth(l.from, l.to));
        }
        if l.prop_delay.is_negative() {
            out.push(TopologyViolation::NegativePropDelay(l.from, l.to));
        }
    }
    for ((a, b), count) in &directed {
        if *count > 1 {
            out.push(TopologyViolation::DuplicateLink(*a, *b));
        }
    }
    for l in &topo.links {
        if l.from < l.to {
            if let Some(rev) = topo.links.iter().find(|r| r.from == l.to && r.to == l.from) {
                if rev.bandwidth_bps != l.bandwidth_bps || rev.prop_delay != l.prop_delay {
                    out.push(TopologyViolation::Asymmetric(l.from, l.to));
                }
            }
        }
    }

    for pair in topo.path.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        // NW -> DS is the 5G bridge hop, not a wired link.
        if (a, b) == (NodeId::Nw, NodeId::Ds) {
            continue;
        }
        if topo.link(a, b).is_none() {
            out.push(TopologyViolation::PathBroken(a, b));
        }
    }

    out.sort();
    out.dedup();
    out
}

/// How DC packets enter the master switch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcGeneration {
    /// `burst_size` packets at every application cycle start.
    #[default]
    Burst,
    /// The master's DC queue is kept full at all times.
    Backlog,
}

/// Delay-critical burst stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcStream {
    pub pcp: u8,
    pub packet_len_bytes: u32,
    pub burst_size: u32,
    pub app_cycle: TimeNs,
    /// Packet delay budget; `None` means unbounded.
    #[serde(default)]
    pub delay_budget: Option<TimeNs>,
    /// Emission instant of the first burst.
    #[serde(default)]
    pub phase: TimeNs,
    #[serde(default)]
    pub generation: DcGeneration,
}

/// Best-effort constant-rate stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeStream {
    pub pcp: u8,
    pub packet_len_bytes: u32,
    pub rate_bps: u64,
}

impl BeStream {
    /// Inter-packet gap `8 * len / rate`, rounded up.
    pub fn interval(&self) -> TimeNs {
        transmission_time(self.packet_len_bytes, self.rate_bps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StreamSpec {
    Dc(DcStream),
    Be(BeStream),
}

impl StreamSpec {
    pub fn pcp(&self) -> u8 {
        match self {
            StreamSpec::Dc(s) => s.pcp,
            StreamSpec::Be(s) => s.pcp,
        }
    }

    pub fn packet_len_bytes(&self) -> u32 {
        match self {
            StreamSpec::Dc(s) => s.packet_len_bytes,
            StreamSpec::Be(s) => s.packet_len_bytes,
        }
    }

    /// Reference DC stream: PCP 2, 200 B frames, one frame per 30 ms cycle.
    pub fn reference_dc() -> Self {
        StreamSpec::Dc(DcStream {
            pcp: 2,
            packet_len_bytes: 200,
            burst_size: 1,
            app_cycle: TimeNs::from_ms(30),
            delay_budget: None,
            phase: TimeNs::ZERO,
            generation: DcGeneration::Burst,
        })
    }

    /// Reference BE stream: PCP 0, MTU frames at 30 Mbps.
    pub fn reference_be() -> Self {
        StreamSpec::Be(BeStream {
            pcp: 0,
            packet_len_bytes: 1500,
            rate_bps: 30_000_000,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamViolation {
    PcpOutOfRange(u8),
    DuplicatePcp(u8),
    ZeroLength(u8),
    EmptyBurst(u8),
    ZeroAppCycle(u8),
    NegativePhase(u8),
    ZeroRate(u8),
}

impl fmt::Display for StreamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamViolation::PcpOutOfRange(p) => write!(f, "pcp {p} is outside 0..=7"),
            StreamViolation::DuplicatePcp(p) => write!(f, "pcp {p} used by more than one stream"),
            StreamViolation::ZeroLength(p) => write!(f, "stream pcp {p}: packet length is zero"),
            StreamViolation::EmptyBurst(p) => write!(f, "stream pcp {p}: burst_size must be >= 1"),
            StreamViolation::ZeroAppCycle(p) => write!(f, "stream pcp {p}: app_cycle must be > 0"),
            StreamViolation::NegativePhase(p) => write!(f, "stream pcp {p}: phase is negative"),
            StreamViolation::ZeroRate(p) => write!(f, "stream pcp {p}: rate_bps must be > 0"),
        }
    }
}

pub fn validate_streams(streams: &[StreamSpec]) -> Vec<StreamViolation> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for s in streams {
        let pcp = s.pcp();
        if pcp > 7 {
            out.push(StreamViolation::PcpOutOfRange(pcp));
        }
        if seen.insert(pcp, ()).is_some() {
            out.push(StreamViolation::DuplicatePcp(pcp));
        }
        if s.packet_len_bytes() == 0 {
            out.push(StreamViolation::ZeroLength(pcp));
        }
        match s {
            StreamSpec::Dc(dc) => {
                if dc.burst_size == 0 {
                    out.push(StreamViolation::EmptyBurst(pcp));
                }
                if dc.app_cycle <= TimeNs::ZERO {
                    out.push(StreamViolation::ZeroAppCycle(pcp));
                }
                if dc.phase.is_negative() {
                    out.push(StreamViolation::NegativePhase(pcp));
                }
            }
            StreamSpec::Be(be) => {
                if be.rate_bps == 0 {
                    out.push(StreamViolation::ZeroRate(pcp));
                }
            }
        }
    }
    out.sort();
    out
}

/// Drop-tail FIFO egress queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub pcp: u8,
    pub capacity_bytes: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sending_delay_examples() {
        let gbe = LinkSpec::gigabit(NodeId::Ms, NodeId::Nw);
        assert_eq!(sending_delay(200, &gbe), TimeNs(1_600));
        assert_eq!(sending_delay(1500, &gbe), TimeNs(12_000));
        let slow = LinkSpec {
            prop_delay: TimeNs(500),
            ..gbe
        };
        assert_eq!(sending_delay(200, &slow), TimeNs(2_100));
    }

    #[test]
    fn transmission_time_rounds_up() {
        // 1600 bits at 3 bps-ish granularity: 1600e9 / 3e9 = 533.33 ns
        assert_eq!(transmission_time(200, 3_000_000_000), TimeNs(534));
    }

    #[test]
    fn reference_topology_is_valid() {
        assert!(validate_topology(&Topology::reference()).is_empty());
    }

    #[test]
    fn missing_link_breaks_path() {
        let mut topo = Topology::reference();
        topo.links.retain(|l| l.from != NodeId::Ms);
        assert_eq!(
            validate_topology(&topo),
            vec![TopologyViolation::PathBroken(NodeId::Ms, NodeId::Nw)]
        );
    }

    #[test]
    fn zero_bandwidth_is_flagged() {
        let mut topo = Topology::reference();
        topo.link_mut(NodeId::Ds, NodeId::Sl).unwrap().bandwidth_bps = 0;
        assert_eq!(
            validate_topology(&topo),
            vec![TopologyViolation::BadBandwidth(NodeId::Ds, NodeId::Sl)]
        );
    }

    #[test]
    fn asymmetric_wired_link_is_flagged() {
        let mut topo = Topology::reference();
        topo.links.push(LinkSpec {
            from: NodeId::Nw,
            to: NodeId::Ms,
            bandwidth_bps: 100_000_000,
            prop_delay: TimeNs::ZERO,
        });
        assert_eq!(
            validate_topology(&topo),
            vec![TopologyViolation::Asymmetric(NodeId::Ms, NodeId::Nw)]
        );
    }

    #[test]
    fn reverse_declared_link_connects_path() {
        let mut topo = Topology::reference();
        topo.links[0] = LinkSpec::gigabit(NodeId::Nw, NodeId::Ms);
        assert!(validate_topology(&topo).is_empty());
        assert_eq!(topo.link(NodeId::Ms, NodeId::Nw).unwrap().bandwidth_bps, GIGABIT);
    }

    #[test]
    fn missing_node_and_bad_path() {
        let mut topo = Topology::reference();
        topo.nodes.retain(|n| n.id != NodeId::Sl);
        topo.path.pop();
        let v = validate_topology(&topo);
        assert!(v.contains(&TopologyViolation::UnexpectedPath(vec![
            NodeId::Ms,
            NodeId::Nw,
            NodeId::Ds
        ])));
    }

    #[test]
    fn stream_validation() {
        let mut be = StreamSpec::reference_be();
        if let StreamSpec::Be(b) = &mut be {
            b.pcp = 2;
            b.rate_bps = 0;
        }
        let v = validate_streams(&[StreamSpec::reference_dc(), be]);
        assert_eq!(
            v,
            vec![StreamViolation::DuplicatePcp(2), StreamViolation::ZeroRate(2)]
        );
        assert!(
            validate_streams(&[StreamSpec::reference_dc(), StreamSpec::reference_be()]).is_empty()
        );
    }

    #[test]
    fn be_interval() {
        let StreamSpec::Be(be) = StreamSpec::reference_be() else {
            unreachable!()
        };
        assert_eq!(be.interval(), TimeNs::from_us(400));
    }

    fn arb_link() -> impl Strategy<Value = LinkSpec> {
        (1u64..=10_000_000_000, 0i64..10_000).prop_map(|(bw, prop)| LinkSpec {
            from: NodeId::Ms,
            to: NodeId::Nw,
            bandwidth_bps: bw,
            prop_delay: TimeNs(prop),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sending_delay_monotone(link in arb_link(), a in 1u32..10_000, b in 1u32..10_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(sending_delay(lo, &link) <= sending_delay(hi, &link));
            let faster = LinkSpec { bandwidth_bps: link.bandwidth_bps.saturating_mul(2), ..link };
            prop_assert!(sending_delay(hi, &faster) <= sending_delay(hi, &link));
        }

        #[test]
        fn wired_links_symmetric(link in arb_link(), len in 1u32..10_000) {
            let rev = LinkSpec { from: link.to, to: link.from, ..link };
            prop_assert_eq!(sending_delay(len, &link), sending_delay(len, &rev));
        }

        #[test]
        fn validation_order_independent(rot in 0usize..4, zero_bw in any::<bool>()) {
            let mut topo = Topology::reference();
            if zero_bw {
                topo.links[1].bandwidth_bps = 0;
            }
            topo.links.push(LinkSpec::gigabit(NodeId::Sl, NodeId::Rx));
            let base = validate_topology(&topo);
            topo.nodes.rotate_left(rot);
            let n = topo.links.len();
            topo.links.rotate_left(rot % n);
            prop_assert_eq!(&validate_topology(&topo), &base);
            prop_assert_eq!(validate_topology(&topo), validate_topology(&topo));
        }
    }
}
