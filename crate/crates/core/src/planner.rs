//! Offline schedule computation: network cycle, window sizes, jitter bound and offsets.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{GateWindow, GclSpec};
use crate::model::transmission_time;
use crate::time::{div_ceil_u128, Macrotick, TimeNs};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no application cycles given")]
    EmptyInput,
    #[error("application cycle {0} is not positive")]
    NonPositiveCycle(TimeNs),
    #[error("rate {rate_bps} bps exceeds link rate {link_bps} bps")]
    RateExceedsLink { rate_bps: u64, link_bps: u64 },
    #[error("percentile must be in (0, 1], got {0}")]
    BadPercentile(f64),
    #[error("no jitter samples")]
    EmptySamples,
}

/// Greatest common divisor of the application cycles.
pub fn network_cycle(app_cycles: &[TimeNs]) -> Result<TimeNs, PlanError> {
    let mut it = app_cycles.iter();
    let first = *it.next().ok_or(PlanError::EmptyInput)?;
    let mut g = first.ns();
    for c in app_cycles {
        if *c <= TimeNs::ZERO {
            return Err(PlanError::NonPositiveCycle(*c));
        }
    }
    for c in it {
        let (mut a, mut b) = (g, c.ns());
        while b != 0 {
            (a, b) = (b, a % b);
        }
        g = a;
    }
    Ok(TimeNs(g))
}

/// Window that carries `rate_bps` on a `link_bps` link: `ceil(rate * T_C / b)` in ns.
///
/// The result is exact to the nanosecond; macrotick rounding happens when it is written
/// into a gate control list.
pub fn window_for_rate(rate_bps: u64, cycle: TimeNs, link_bps: u64) -> Result<TimeNs, PlanError> {
    if rate_bps > link_bps {
        return Err(PlanError::RateExceedsLink { rate_bps, link_bps });
    }
    let ns = div_ceil_u128(rate_bps as u128 * cycle.ns().max(0) as u128, link_bps as u128);
    Ok(TimeNs(ns as i64))
}

/// `(lower, upper)` for the DC window: a full burst must fit, and the window must leave
/// room for other traffic (the upper bound is exclusive).
pub fn window_bounds(burst_size: u32, packet_len_bytes: u32, link_bps: u64, cycle: TimeNs) -> (TimeNs, TimeNs) {
    (transmission_time(burst_size * packet_len_bytes, link_bps), cycle)
}

/// Order statistic `ceil(p * n)` (1-based) of the samples.
pub fn percentile_bound(samples: &[TimeNs], p: f64) -> Result<TimeNs, PlanError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(PlanError::BadPercentile(p));
    }
    if samples.is_empty() {
        return Err(PlanError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[order_index(p, sorted.len())])
}

/// Zero-based index of the `ceil(p * n)` order statistic. The small slack absorbs
/// representation error such as `0.999 * 1000 = 999.0000000000001`.
pub(crate) fn order_index(p: f64, n: usize) -> usize {
    let rank = (p * n as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// `delta = K + d_hat` and `delta' = delta mod T_C`.
pub fn compute_offset(k: TimeNs, d_hat: TimeNs, cycle: TimeNs) -> (TimeNs, TimeNs) {
    let delta = k + d_hat;
    (delta, delta.rem_euclid(cycle))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IciRisk {
    None,
    Possible,
    Certain,
}

impl fmt::Display for IciRisk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IciRisk::None => "none",
            IciRisk::Possible => "possible",
            IciRisk::Certain => "certain",
        })
    }
}

/// Inter-cycle interference risk for a bridge delay spread of `uncertainty_width`.
pub fn predict_ici(cycle: TimeNs, uncertainty_width: TimeNs) -> IciRisk {
    if cycle > uncertainty_width {
        IciRisk::None
    } else if uncertainty_width > cycle * 2 {
        IciRisk::Certain
    } else {
        IciRisk::Possible
    }
}

/// `d_hat(p) - min`, the width of the delay range the offset has to cover.
pub fn uncertainty_width(samples: &[TimeNs], p: f64) -> Result<TimeNs, PlanError> {
    let hi = percentile_bound(samples, p)?;
    Ok(hi - *samples.iter().min().expect("percentile_bound rejects empty input"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcPlanSpec {
    pub pcp: u8,
    pub burst_size: u32,
    pub packet_len_bytes: u32,
    #[serde(default)]
    pub delay_budget: Option<TimeNs>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BePlanSpec {
    pub pcp: u8,
    pub rate_bps: u64,
    pub packet_len_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub app_cycles: Vec<TimeNs>,
    pub dc: DcPlanSpec,
    pub be: Option<BePlanSpec>,
    pub bottleneck_bps: u64,
    pub k: TimeNs,
    pub jitter_samples: Vec<TimeNs>,
    pub percentile: f64,
    pub guard_band: TimeNs,
    pub macrotick: Macrotick,
    /// Added on top of `K + d_hat`.
    pub offset_margin: TimeNs,
    /// Relative enlargement of the SL DC window over the MS one.
    pub sl_window_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub cycle: TimeNs,
    pub w_dc: TimeNs,
    /// DC window at the slave, `w_dc` widened by the SL margin.
    pub w_dc_sl: TimeNs,
    pub w_be: TimeNs,
    pub guard_band: TimeNs,
    pub delta: TimeNs,
    pub delta_prime: TimeNs,
    pub d_hat: TimeNs,
    pub ici_risk: IciRisk,
}

/// Computes a complete plan. Problems that leave a plan computable (an oversized window,
/// a blown budget) are reported by [`validate_plan`], not here.
pub fn plan_schedule(inputs: &PlanInputs) -> Result<SchedulePlan, PlanError> {
    let m = inputs.macrotick;
    let cycle = network_cycle(&inputs.app_cycles)?;
    let (lower, _) = window_bounds(
        inputs.dc.burst_size,
        inputs.dc.packet_len_bytes,
        inputs.bottleneck_bps,
        cycle,
    );
    let w_dc = m.ceil(lower);
    let w_dc_sl = m.ceil(TimeNs((w_dc.ns() as f64 * (1.0 + inputs.sl_window_margin)).ceil() as i64));
    let d_hat = percentile_bound(&inputs.jitter_samples, inputs.percentile)?;
    let (delta, delta_prime) = compute_offset(inputs.k + inputs.offset_margin, d_hat, cycle);
    let width = uncertainty_width(&inputs.jitter_samples, inputs.percentile)?;
    Ok(SchedulePlan {
        cycle,
        w_dc,
        w_dc_sl,
        w_be: cycle - w_dc - inputs.guard_band,
        guard_band: inputs.guard_band,
        delta,
        delta_prime,
        d_hat,
        ici_risk: predict_ici(cycle, width),
    })
}

impl SchedulePlan {
    /// MS schedule: DC window first, then BE up to the guard band.
    pub fn gcl_ms(&self, dc_pcp: u8, be_pcp: Option<u8>, m: Macrotick) -> GclSpec {
        self.layout(TimeNs::ZERO, self.w_dc, dc_pcp, be_pcp, m)
    }

    /// SL schedule: the same layout shifted by `delta'` rounded up to the macrotick.
    pub fn gcl_sl(&self, dc_pcp: u8, be_pcp: Option<u8>, m: Macrotick) -> GclSpec {
        let base = m.ceil(self.delta_prime).rem_euclid(self.cycle);
        self.layout(base, self.w_dc_sl, dc_pcp, be_pcp, m)
    }

    fn layout(&self, base: TimeNs, w: TimeNs, dc_pcp: u8, be_pcp: Option<u8>, m: Macrotick) -> GclSpec {
        let mut windows = vec![GateWindow::new(dc_pcp, TimeNs::ZERO, w)];
        let be_end = self.cycle - self.guard_band;
        if let Some(be) = be_pcp.filter(|_| be_end > w) {
            windows.push(GateWindow::new(be, w, be_end));
        }
        GclSpec {
            cycle: self.cycle,
            base_offset: base,
            guard_band: self.guard_band,
            macrotick: m,
            windows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PlanViolation {
    WindowTooSmall { w_dc: TimeNs, lower: TimeNs },
    WindowTooLarge { w_dc: TimeNs, cycle: TimeNs },
    Composition { sum: TimeNs, cycle: TimeNs },
    NegativeWindow { w_be: TimeNs },
    Quantization { field: &'static str, value: TimeNs },
    CycleMismatch { plan: TimeNs, expected: TimeNs },
    OffsetMismatch { delta: TimeNs, delta_prime: TimeNs },
    BudgetExceeded { latency: TimeNs, budget: TimeNs },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::WindowTooSmall { w_dc, lower } => {
                write!(f, "DC window {w_dc} cannot carry a burst ({lower} needed)")
            }
            PlanViolation::WindowTooLarge { w_dc, cycle } => {
                write!(f, "DC window {w_dc} leaves no room in cycle {cycle}")
            }
            PlanViolation::Composition { sum, cycle } => {
                write!(f, "windows and guard band sum to {sum}, cycle is {cycle}")
            }
            PlanViolation::NegativeWindow { w_be } => write!(f, "BE window {w_be} is negative"),
            PlanViolation::Quantization { field, value } => {
                write!(f, "{field} = {value} is not a macrotick multiple")
            }
            PlanViolation::CycleMismatch { plan, expected } => {
                write!(f, "cycle {plan} differs from the gcd of the application cycles {expected}")
            }
            PlanViolation::OffsetMismatch { delta, delta_prime } => {
                write!(f, "delta' {delta_prime} is not delta {delta} mod cycle")
            }
            PlanViolation::BudgetExceeded { latency, budget } => {
                write!(f, "delta + w_dc = {latency} exceeds the delay budget {budget}")
            }
        }
    }
}

pub fn validate_plan(plan: &SchedulePlan, inputs: &PlanInputs) -> Vec<PlanViolation> {
    let mut v = Vec::new();
    let (lower, upper) = window_bounds(
        inputs.dc.burst_size,
        inputs.dc.packet_len_bytes,
        inputs.bottleneck_bps,
        plan.cycle,
    );
    if plan.w_dc < lower {
        v.push(PlanViolation::WindowTooSmall { w_dc: plan.w_dc, lower });
    }
    if plan.w_dc >= upper {
        v.push(PlanViolation::WindowTooLarge { w_dc: plan.w_dc, cycle: plan.cycle });
    }
    let sum = plan.w_dc + plan.w_be + plan.guard_band;
    if sum != plan.cycle {
        v.push(PlanViolation::Composition { sum, cycle: plan.cycle });
    }
    if plan.w_be.is_negative() {
        v.push(PlanViolation::NegativeWindow { w_be: plan.w_be });
    }
    for (field, value) in [
        ("cycle", plan.cycle),
        ("w_dc", plan.w_dc),
        ("w_dc_sl", plan.w_dc_sl),
        ("w_be", plan.w_be),
        ("guard_band", plan.guard_band),
    ] {
        if !inputs.macrotick.divides(value) {
            v.push(PlanViolation::Quantization { field, value });
        }
    }
    if let Ok(expected) = network_cycle(&inputs.app_cycles) {
        if expected != plan.cycle {
            v.push(PlanViolation::CycleMismatch { plan: plan.cycle, expected });
        }
    }
    if plan.cycle > TimeNs::ZERO && plan.delta.rem_euclid(plan.cycle) != plan.delta_prime {
        v.push(PlanViolation::OffsetMismatch {
            delta: plan.delta,
            delta_prime: plan.delta_prime,
        });
    }
    if let Some(budget) = inputs.dc.delay_budget {
        let latency = plan.delta + plan.w_dc;
        if latency > budget {
            v.push(PlanViolation::BudgetExceeded { latency, budget });
        }
    }
    v
}
