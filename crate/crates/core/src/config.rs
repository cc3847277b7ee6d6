//! Experiment configuration files (TOML) and their validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeDelayModel, BridgeViolation, SampleFileError};
use crate::gate::{DcWindowBound, GateControlList, GclSpec, GclViolation};
use crate::model::{
    validate_streams, validate_topology, DcStream, NodeId, StreamSpec, StreamViolation, Topology,
    TopologyViolation, DEFAULT_QUEUE_CAPACITY_BYTES,
};
use crate::planner::{network_cycle, validate_plan, DcPlanSpec, IciRisk, PlanInputs, PlanViolation, SchedulePlan};
use crate::time::TimeNs;

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_probe_points() -> Vec<NodeId> {
    vec![NodeId::Ms, NodeId::Sl]
}

fn default_capacity() -> u32 {
    DEFAULT_QUEUE_CAPACITY_BYTES
}

fn default_true() -> bool {
    true
}

fn default_drain() -> TimeNs {
    TimeNs::from_secs(1)
}

/// One simulation run. All times are integer nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub topology: Topology,
    pub streams: Vec<StreamSpec>,
    /// Master egress schedule; absent means an ungated strict-priority port.
    #[serde(default)]
    pub gcl_ms: Option<GclSpec>,
    #[serde(default)]
    pub gcl_sl: Option<GclSpec>,
    pub bridge: BridgeDelayModel,
    /// Traffic is generated during `[0, duration)`.
    pub duration: TimeNs,
    /// Extra simulated time after `duration` for packets still in flight.
    #[serde(default = "default_drain")]
    pub drain: TimeNs,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_probe_points")]
    pub probe_points: Vec<NodeId>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_capacity")]
    pub queue_capacity_bytes: u32,
    /// Enforce `N*l/b <= w < T_C` on DC windows.
    #[serde(default = "default_true")]
    pub check_window_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ConfigViolation {
    Version(u32),
    Topology(TopologyViolation),
    Stream(StreamViolation),
    NoStreams,
    Gcl { port: NodeId, violation: GclViolation },
    Bridge(BridgeViolation),
    NoBridgeModel(u8),
    Plan(PlanViolation),
    NonPositiveDuration,
    NegativeDrain,
    ProbePoint(NodeId),
    ZeroQueueCapacity,
    FrameExceedsQueue { pcp: u8 },
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigViolation::Version(v) => write!(f, "unsupported config version {v}"),
            ConfigViolation::Topology(v) => write!(f, "topology: {v}"),
            ConfigViolation::Stream(v) => write!(f, "streams: {v}"),
            ConfigViolation::NoStreams => f.write_str("no streams configured"),
            ConfigViolation::Gcl { port, violation } => write!(f, "gcl_{}: {violation}", port.to_string().to_lowercase()),
            ConfigViolation::Bridge(v) => write!(f, "bridge: {v}"),
            ConfigViolation::NoBridgeModel(p) => write!(f, "bridge: no delay model for pcp {p}"),
            ConfigViolation::Plan(v) => write!(f, "plan: {v}"),
            ConfigViolation::NonPositiveDuration => f.write_str("duration must be positive"),
            ConfigViolation::NegativeDrain => f.write_str("drain must not be negative"),
            ConfigViolation::ProbePoint(n) => write!(f, "probe point {n} is not MS or SL"),
            ConfigViolation::ZeroQueueCapacity => f.write_str("queue_capacity_bytes must be positive"),
            ConfigViolation::FrameExceedsQueue { pcp } => {
                write!(f, "pcp {pcp}: frame larger than queue capacity")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigInvalid(pub Vec<ConfigViolation>);

impl fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for v in &self.0 {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error(transparent)]
    Samples(#[from] SampleFileError),
}

/// Deep-merges TOML tables; values in `over` win, arrays are replaced.
pub fn merge_toml(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_toml(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loads one or more config files layered in order, resolving sample-file paths
/// against the directory of the file that is loaded first.
pub fn load_config(paths: &[PathBuf]) -> Result<ExperimentConfig, ConfigError> {
    let mut table = toml::Table::new();
    for p in paths {
        let shown = p.display().to_string();
        let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        let t: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: shown.clone(),
            source: Box::new(e),
        })?;
        merge_toml(&mut table, t);
    }
    let shown = paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" + ");
    let mut cfg: ExperimentConfig = table.try_into().map_err(|e| ConfigError::Parse {
        path: shown,
        source: Box::new(e),
    })?;
    let base = paths
        .first()
        .and_then(|p| p.parent())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    cfg.bridge = cfg.bridge.resolve(&base)?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn dc_streams(&self) -> impl Iterator<Item = &DcStream> + '_ {
        self.streams.iter().filter_map(|s| match s {
            StreamSpec::Dc(d) => Some(d),
            StreamSpec::Be(_) => None,
        })
    }

    fn bottleneck_bps(&self) -> u64 {
        [(NodeId::Ms, NodeId::Nw), (NodeId::Ds, NodeId::Sl)]
            .iter()
            .filter_map(|&(a, b)| self.topology.link(a, b))
            .map(|l| l.bandwidth_bps)
            .min()
            .unwrap_or(crate::model::GIGABIT)
    }

    fn build_port(&self, port: NodeId, spec: &GclSpec, out: &mut Vec<ConfigViolation>) -> Option<GateControlList> {
        let bw = self.bottleneck_bps();
        let bounds: Vec<DcWindowBound> = if self.check_window_bounds {
            self.dc_streams()
                .map(|d| DcWindowBound {
                    pcp: d.pcp,
                    burst_size: d.burst_size,
                    packet_len_bytes: d.packet_len_bytes,
                    bandwidth_bps: bw,
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut found = Vec::new();
        let mut built = None;
        let attempts: Vec<Option<&DcWindowBound>> = if bounds.is_empty() {
            vec![None]
        } else {
            bounds.iter().map(Some).collect()
        };
        for b in attempts {
            match spec.build(b) {
                Ok(g) => built = built.or(Some(g)),
                Err(e) => found.extend(e.0),
            }
        }
        if found.is_empty() {
            return built;
        }
        found.dedup();
        out.extend(found.into_iter().map(|violation| ConfigViolation::Gcl { port, violation }));
        None
    }

    /// The plan implied by the schedules, for budget and composition checks.
    pub fn implied_plan(&self) -> Option<(SchedulePlan, PlanInputs)> {
        let ms = self.gcl_ms.as_ref()?;
        let dc = self.dc_streams().next()?;
        let w_dc = ms.windows.iter().filter(|w| w.pcp == dc.pcp).map(|w| w.width()).sum();
        let delta = self.gcl_sl.as_ref().map_or(TimeNs::ZERO, |s| s.base_offset);
        let app_cycles: Vec<TimeNs> = self.dc_streams().map(|d| d.app_cycle).collect();
        let plan = SchedulePlan {
            cycle: ms.cycle,
            w_dc,
            w_dc_sl: self
                .gcl_sl
                .as_ref()
                .map_or(w_dc, |s| s.windows.iter().filter(|w| w.pcp == dc.pcp).map(|w| w.width()).sum()),
            w_be: ms.cycle - w_dc - ms.guard_band,
            guard_band: ms.guard_band,
            delta,
            delta_prime: delta.rem_euclid(ms.cycle.max(TimeNs(1))),
            d_hat: TimeNs::ZERO,
            ici_risk: IciRisk::None,
        };
        let inputs = PlanInputs {
            app_cycles: if network_cycle(&app_cycles).is_ok_and(|c| c % ms.cycle == TimeNs::ZERO) {
                vec![ms.cycle]
            } else {
                app_cycles
            },
            dc: DcPlanSpec {
                pcp: dc.pcp,
                burst_size: dc.burst_size,
                packet_len_bytes: dc.packet_len_bytes,
                delay_budget: dc.delay_budget,
            },
            be: None,
            bottleneck_bps: self.bottleneck_bps(),
            k: TimeNs::ZERO,
            jitter_samples: Vec::new(),
            percentile: 1.0,
            guard_band: ms.guard_band,
            macrotick: ms.macrotick,
            offset_margin: TimeNs::ZERO,
            sl_window_margin: 0.0,
        };
        Some((plan, inputs))
    }

    /// Validates everything and builds the gate control lists.
    pub fn validate(&self) -> Result<ValidatedConfig, ConfigInvalid> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(ConfigViolation::Version(self.version));
        }
        v.extend(validate_topology(&self.topology).into_iter().map(ConfigViolation::Topology));
        if self.streams.is_empty() {
            v.push(ConfigViolation::NoStreams);
        }
        v.extend(validate_streams(&self.streams).into_iter().map(ConfigViolation::Stream));
        v.extend(self.bridge.validate().into_iter().map(ConfigViolation::Bridge));
        for s in &self.streams {
            if self.bridge.variant(s.pcp()).is_err() {
                v.push(ConfigViolation::NoBridgeModel(s.pcp()));
            }
            if s.packet_len_bytes() > self.queue_capacity_bytes {
                v.push(ConfigViolation::FrameExceedsQueue { pcp: s.pcp() });
            }
        }
        if self.duration <= TimeNs::ZERO {
            v.push(ConfigViolation::NonPositiveDuration);
        }
        if self.drain.is_negative() {
            v.push(ConfigViolation::NegativeDrain);
        }
        for p in &self.probe_points {
            if !matches!(p, NodeId::Ms | NodeId::Sl) {
                v.push(ConfigViolation::ProbePoint(*p));
            }
        }
        if self.queue_capacity_bytes == 0 {
            v.push(ConfigViolation::ZeroQueueCapacity);
        }
        let gcl_ms = self.gcl_ms.as_ref().and_then(|s| self.build_port(NodeId::Ms, s, &mut v));
        let gcl_sl = self.gcl_sl.as_ref().and_then(|s| self.build_port(NodeId::Sl, s, &mut v));
        if self.check_window_bounds {
            if let Some((plan, inputs)) = self.implied_plan() {
                v.extend(
                    validate_plan(&plan, &inputs)
                        .into_iter()
                        .filter(|p| {
                            !matches!(
                                p,
                                PlanViolation::Quantization { .. }
                                    | PlanViolation::WindowTooSmall { .. }
                                    | PlanViolation::WindowTooLarge { .. }
                            )
                        })
                        .map(ConfigViolation::Plan),
                );
            }
        }
        if !v.is_empty() {
            return Err(ConfigInvalid(v));
        }
        Ok(ValidatedConfig {
            config: self.clone(),
            gcl_ms,
            gcl_sl,
        })
    }
}

/// A config that passed validation, with its schedules built.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    pub gcl_ms: Option<GateControlList>,
    pub gcl_sl: Option<GateControlList>,
}
