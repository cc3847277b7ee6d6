//! 802.1Qbv gate control lists for a single egress port.
//!
//! A window `(open_at, close_at]` opens the gate of one PCP queue in every cycle
//! occurrence `n`: the gate is open for `n*T_C + open_at < t - base_offset <= n*T_C + close_at`.
//! Only one gate is open at any instant. The last `guard_band` of each cycle never
//! carries a window.
//!
//! Frames start on or after the first macrotick boundary following `open_at` and must
//! finish by `close_at`; a frame that does not fit stays at the head of its queue.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::transmission_time;
use crate::time::{Macrotick, TimeNs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateWindow {
    pub pcp: u8,
    pub open_at: TimeNs,
    pub close_at: TimeNs,
}

impl GateWindow {
    pub fn new(pcp: u8, open_at: TimeNs, close_at: TimeNs) -> Self {
        GateWindow {
            pcp,
            open_at,
            close_at,
        }
    }

    pub fn width(&self) -> TimeNs {
        self.close_at - self.open_at
    }
}

/// Unvalidated gate control list, as written in experiment config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GclSpec {
    pub cycle: TimeNs,
    #[serde(default)]
    pub base_offset: TimeNs,
    #[serde(default)]
    pub guard_band: TimeNs,
    #[serde(default)]
    pub macrotick: Macrotick,
    pub windows: Vec<GateWindow>,
}

impl GclSpec {
    pub fn build(&self, dc: Option<&DcWindowBound>) -> Result<GateControlList, GclError> {
        build_gcl(
            self.cycle,
            self.base_offset,
            &self.windows,
            self.guard_band,
            self.macrotick,
            dc,
        )
    }
}

/// The DC burst a window must carry; enables the burst window-size check in [`build_gcl`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcWindowBound {
    pub pcp: u8,
    pub burst_size: u32,
    pub packet_len_bytes: u32,
    pub bandwidth_bps: u64,
}

impl DcWindowBound {
    /// Time needed to serialize the whole burst.
    pub fn lower(&self) -> TimeNs {
        transmission_time(self.burst_size * self.packet_len_bytes, self.bandwidth_bps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GclField {
    Cycle,
    BaseOffset,
    GuardBand,
    OpenAt(usize),
    CloseAt(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GclViolation {
    NonPositiveCycle(TimeNs),
    NegativeGuardBand(TimeNs),
    OffsetOutOfRange(TimeNs),
    PcpOutOfRange { index: usize, pcp: u8 },
    Quantization { field: GclField, value: TimeNs },
    EmptyWindow { index: usize },
    WindowOutsideCycle { index: usize },
    Overlap { first: usize, second: usize },
    CycleOverflow { used: TimeNs, cycle: TimeNs },
    WindowBoundViolation { pcp: u8, width: TimeNs, lower: TimeNs, upper: TimeNs },
}

impl fmt::Display for GclViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GclViolation::NonPositiveCycle(c) => write!(f, "cycle {c} must be positive"),
            GclViolation::NegativeGuardBand(g) => write!(f, "guard band {g} is negative"),
            GclViolation::OffsetOutOfRange(o) => write!(f, "base offset {o} outside [0, cycle)"),
            GclViolation::PcpOutOfRange { index, pcp } => {
                write!(f, "window {index}: pcp {pcp} outside 0..=7")
            }
            GclViolation::Quantization { field, value } => {
                write!(f, "{field:?} = {value} is not a macrotick multiple")
            }
            GclViolation::EmptyWindow { index } => write!(f, "window {index} has open_at >= close_at"),
            GclViolation::WindowOutsideCycle { index } => {
                write!(f, "window {index} extends outside [0, cycle - guard_band]")
            }
            GclViolation::Overlap { first, second } => {
                write!(f, "windows {first} and {second} overlap")
            }
            GclViolation::CycleOverflow { used, cycle } => {
                write!(f, "windows plus guard band use {used}, cycle is {cycle}")
            }
            GclViolation::WindowBoundViolation {
                pcp,
                width,
                lower,
                upper,
            } => write!(
                f,
                "pcp {pcp} window {width} outside [{lower}, {upper}) required by its burst"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid gate control list: {}", join(.0))]
pub struct GclError(pub Vec<GclViolation>);

fn join(v: &[GclViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("gate control list has no window for pcp {0}")]
pub struct NoWindowForPcp(pub u8);

/// A validated, immutable gate control list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "GclSpec")]
pub struct GateControlList {
    cycle: TimeNs,
    base_offset: TimeNs,
    guard_band: TimeNs,
    macrotick: Macrotick,
    /// Sorted by `open_at`.
    windows: Vec<GateWindow>,
}

impl From<GateControlList> for GclSpec {
    fn from(g: GateControlList) -> GclSpec {
        GclSpec {
            cycle: g.cycle,
            base_offset: g.base_offset,
            guard_band: g.guard_band,
            macrotick: g.macrotick,
            windows: g.windows,
        }
    }
}

/// Validates a schedule and returns either the list or every violation found.
pub fn build_gcl(
    cycle: TimeNs,
    base_offset: TimeNs,
    windows: &[GateWindow],
    guard_band: TimeNs,
    macrotick: Macrotick,
    dc: Option<&DcWindowBound>,
) -> Result<GateControlList, GclError> {
    let mut v = Vec::new();
    let quant = |field, value: TimeNs, v: &mut Vec<GclViolation>| {
        if !macrotick.divides(value) {
            v.push(GclViolation::Quantization { field, value });
        }
    };

    if cycle <= TimeNs::ZERO {
        v.push(GclViolation::NonPositiveCycle(cycle));
        return Err(GclError(v));
    }
    quant(GclField::Cycle, cycle, &mut v);
    quant(GclField::BaseOffset, base_offset, &mut v);
    quant(GclField::GuardBand, guard_band, &mut v);
    if guard_band.is_negative() {
        v.push(GclViolation::NegativeGuardBand(guard_band));
    }
    if base_offset.is_negative() || base_offset >= cycle {
        v.push(GclViolation::OffsetOutOfRange(base_offset));
    }

    let usable_end = cycle - guard_band;
    for (i, w) in windows.iter().enumerate() {
        if w.pcp > 7 {
            v.push(GclViolation::PcpOutOfRange { index: i, pcp: w.pcp });
        }
        quant(GclField::OpenAt(i), w.open_at, &mut v);
        quant(GclField::CloseAt(i), w.close_at, &mut v);
        if w.open_at >= w.close_at {
            v.push(GclViolation::EmptyWindow { index: i });
        }
        if w.open_at.is_negative() || w.close_at > usable_end {
            v.push(GclViolation::WindowOutsideCycle { index: i });
        }
    }

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| (windows[i].open_at, windows[i].close_at, i));
    for pair in order.windows(2) {
        let (a, b) = (&windows[pair[0]], &windows[pair[1]]);
        if b.open_at < a.close_at {
            v.push(GclViolation::Overlap {
                first: pair[0].min(pair[1]),
                second: pair[0].max(pair[1]),
            });
        }
    }

    let used: TimeNs = windows.iter().map(|w| w.width().max(TimeNs::ZERO)).sum::<TimeNs>() + guard_band;
    if used > cycle {
        v.push(GclViolation::CycleOverflow { used, cycle });
    }

    if let Some(dc) = dc {
        let width: TimeNs = windows
            .iter()
            .filter(|w| w.pcp == dc.pcp)
            .map(GateWindow::width)
            .sum();
        let lower = dc.lower();
        if width < lower || width >= cycle {
            v.push(GclViolation::WindowBoundViolation {
                pcp: dc.pcp,
                width,
                lower,
                upper: cycle,
            });
        }
    }

    if !v.is_empty() {
        return Err(GclError(v));
    }
    Ok(GateControlList {
        cycle,
        base_offset,
        guard_band,
        macrotick,
        windows: order.into_iter().map(|i| windows[i]).collect(),
    })
}

impl GateControlList {
    pub fn cycle(&self) -> TimeNs {
        self.cycle
    }

    pub fn base_offset(&self) -> TimeNs {
        self.base_offset
    }

    pub fn guard_band(&self) -> TimeNs {
        self.guard_band
    }

    pub fn macrotick(&self) -> Macrotick {
        self.macrotick
    }

    pub fn windows(&self) -> &[GateWindow] {
        &self.windows
    }

    pub fn windows_for(&self, pcp: u8) -> impl Iterator<Item = &GateWindow> + '_ {
        self.windows.iter().filter(move |w| w.pcp == pcp)
    }

    /// Total open time per cycle for `pcp`.
    pub fn open_time(&self, pcp: u8) -> TimeNs {
        self.windows_for(pcp).map(GateWindow::width).sum()
    }

    /// Start of the cycle occurrence containing `t` and the phase of `t` within it.
    fn locate(&self, t: TimeNs) -> (TimeNs, TimeNs) {
        let phase = (t - self.base_offset).rem_euclid(self.cycle);
        (t - phase, phase)
    }

    /// The `(open, close]` occurrence of a `pcp` window containing `t`, if any.
    fn occurrence_at(&self, pcp: u8, t: TimeNs) -> Option<(TimeNs, TimeNs)> {
        let (start, _) = self.locate(t);
        self.windows_for(pcp).find_map(|w| {
            [start, start - self.cycle].into_iter().find_map(|s| {
                let (open, close) = (s + w.open_at, s + w.close_at);
                (open < t && t <= close).then_some((open, close))
            })
        })
    }

    /// Gate state function: true iff the `pcp` gate is open at `t`.
    pub fn gate_state(&self, pcp: u8, t: TimeNs) -> bool {
        self.occurrence_at(pcp, t).is_some()
    }

    /// Smallest `t' >= t` from which the gate stays open for at least the next instant.
    pub fn next_open(&self, pcp: u8, t: TimeNs) -> Result<TimeNs, NoWindowForPcp> {
        let (start, _) = self.locate(t);
        let mut best: Option<TimeNs> = None;
        for w in self.windows_for(pcp) {
            for k in -1..=1 {
                let s = start + self.cycle * k;
                let (open, close) = (s + w.open_at, s + w.close_at);
                let candidate = if open <= t && t < close {
                    t
                } else if open > t {
                    open
                } else {
                    continue;
                };
                best = Some(best.map_or(candidate, |b| b.min(candidate)));
            }
        }
        best.ok_or(NoWindowForPcp(pcp))
    }

    /// True iff a frame of `tx_duration` may start at `t`: the gate is open, `t` is at or
    /// after the first transmittable instant of the window, and the frame ends by its close.
    pub fn can_start_frame(&self, pcp: u8, t: TimeNs, tx_duration: TimeNs) -> bool {
        match self.occurrence_at(pcp, t) {
            Some((open, close)) => t >= open + self.macrotick.get() && t + tx_duration <= close,
            None => false,
        }
    }

    /// Earliest instant `>= t` at which [`Self::can_start_frame`] holds, or `None` when the
    /// frame fits in no window of `pcp`.
    pub fn next_tx_start(&self, pcp: u8, t: TimeNs, tx_duration: TimeNs) -> Option<TimeNs> {
        let (start, _) = self.locate(t);
        let m = self.macrotick.get();
        let mut best: Option<TimeNs> = None;
        for w in self.windows_for(pcp) {
            for k in -1..=1 {
                let s = start + self.cycle * k;
                let (open, close) = (s + w.open_at, s + w.close_at);
                let earliest = t.max(open + m);
                if earliest + tx_duration <= close {
                    best = Some(best.map_or(earliest, |b| b.min(earliest)));
                }
            }
        }
        best
    }
}
