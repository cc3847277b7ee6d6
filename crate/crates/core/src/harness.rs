//! Experiment presets, sweeps and the on-disk result layout.
//!
//! A run directory holds `config.toml`, one probe CSV per probe point and DC pcp,
//! `summary.csv`, `latency_cdf.csv`, `latency_ccdf.csv` and `clusters.csv`. A sweep adds
//! `manifest.csv`, `summary.csv`, `combined_cdf.csv` and `combined_ccdf.csv` at its root.
//! Nothing written depends on wall-clock time or absolute paths.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    detect_ici_jumps, distribution, format_clusters, format_distribution, format_probes, join_probes,
    summarize, IciReport, LatencySeries, Mode, Summary,
};
use crate::bridge::{BridgeDelayModel, DelayVariant};
use crate::config::{ConfigInvalid, ExperimentConfig, ValidatedConfig};
use crate::gate::{GateWindow, GclSpec};
use crate::model::{BeStream, DcGeneration, DcStream, NodeId, StreamSpec, Topology, DEFAULT_QUEUE_CAPACITY_BYTES};
use crate::planner::window_for_rate;
use crate::sim::{run, RunResult};
use crate::time::{Macrotick, TimeNs};

/// Grid of the per-run latency distributions.
pub const DISTRIBUTION_STEP: TimeNs = TimeNs::from_us(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepKind {
    /// Values are DC rates in bps; the MS (and SL, if gated) DC window carries that rate.
    WindowSweep,
    /// Values are offsets in ns, applied at SL as `delta mod T_C`.
    OffsetSweep,
    /// Values are cycles in ns. Windows carry `rate_bps`, the SL window is widened by
    /// `sl_window_margin`, and the SL offset stays at `delta`.
    CycleSweep {
        rate_bps: u64,
        delta: TimeNs,
        sl_window_margin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub name: String,
    pub kind: SweepKind,
    pub values: Vec<i64>,
    pub base: ExperimentConfig,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown preset `{0}` (expected fig4, fig5 or fig6)")]
    UnknownPreset(String),
    #[error("sweep values must be non-empty and strictly monotone")]
    BadValues,
    #[error("sweep needs {0} in the base config")]
    MissingBase(&'static str),
    #[error(transparent)]
    Invalid(#[from] ConfigInvalid),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("cannot build thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

const GUARD_BAND: TimeNs = TimeNs::from_us(12);
const DC_PCP: u8 = 2;
const BE_PCP: u8 = 0;

/// DC window `(0, w]`, BE from `w` to the guard band.
pub fn two_window_gcl(cycle: TimeNs, base_offset: TimeNs, w: TimeNs, m: Macrotick) -> GclSpec {
    GclSpec {
        cycle,
        base_offset,
        guard_band: GUARD_BAND,
        macrotick: m,
        windows: vec![
            GateWindow::new(DC_PCP, TimeNs::ZERO, w),
            GateWindow::new(BE_PCP, w, cycle - GUARD_BAND),
        ],
    }
}

/// Testbed-like base: 200 B backlogged DC, 1500 B BE at 30 Mbps, 30 ms cycle, 16 ns
/// macrotick, 6.8 kB queues, synthetic bridge profile.
pub fn reference_config() -> ExperimentConfig {
    let cycle = TimeNs::from_ms(30);
    let m = Macrotick::DEFAULT;
    let w = m.ceil(window_for_rate(1_550_000, cycle, 1_000_000_000).expect("rate below link"));
    ExperimentConfig {
        version: crate::config::CONFIG_VERSION,
        topology: Topology::reference(),
        streams: vec![
            StreamSpec::Dc(DcStream {
                pcp: DC_PCP,
                packet_len_bytes: 200,
                burst_size: 1,
                app_cycle: cycle,
                delay_budget: None,
                phase: TimeNs::ZERO,
                generation: DcGeneration::Backlog,
            }),
            StreamSpec::Be(BeStream {
                pcp: BE_PCP,
                packet_len_bytes: 1500,
                rate_bps: 30_000_000,
            }),
        ],
        gcl_ms: Some(two_window_gcl(cycle, TimeNs::ZERO, w, m)),
        gcl_sl: Some(two_window_gcl(cycle, m.ceil(TimeNs::from_ms(20)), w, m)),
        bridge: BridgeDelayModel::uniform(DelayVariant::Synthetic),
        duration: TimeNs::from_secs(260),
        drain: TimeNs::from_secs(1),
        seed: 0,
        probe_points: vec![NodeId::Ms, NodeId::Sl],
        output_dir: None,
        queue_capacity_bytes: DEFAULT_QUEUE_CAPACITY_BYTES,
        check_window_bounds: true,
    }
}

pub fn preset(name: &str) -> Result<SweepSpec, HarnessError> {
    let mut base = reference_config();
    let ms = TimeNs::from_ms(1).ns();
    let (kind, values) = match name {
        "fig4" => {
            base.gcl_sl = None;
            (SweepKind::WindowSweep, (0..5).map(|i| 350_000 + 300_000 * i).collect())
        }
        "fig5" => {
            set_burst(&mut base, 1_550_000);
            (SweepKind::OffsetSweep, (1..=6).map(|i| 5 * i * ms).collect())
        }
        "fig6" => {
            set_burst(&mut base, 1_550_000);
            (
            SweepKind::CycleSweep {
                rate_bps: 1_550_000,
                delta: TimeNs::from_ms(20),
                sl_window_margin: 0.25,
            },
            [6, 8, 10, 12, 15, 30].iter().map(|c| c * ms).collect(),
            )
        }
        other => return Err(HarnessError::UnknownPreset(other.to_string())),
    };
    Ok(SweepSpec {
        name: name.to_string(),
        kind,
        values,
        base,
    })
}

/// Makes the DC stream a periodic burst of the whole frames `rate_bps` delivers per app cycle.
fn set_burst(c: &mut ExperimentConfig, rate_bps: u64) {
    for s in &mut c.streams {
        if let StreamSpec::Dc(d) = s {
            let bits = rate_bps as i128 * d.app_cycle.ns() as i128 / 1_000_000_000;
            d.burst_size = (bits / (8 * d.packet_len_bytes as i128)).max(1) as u32;
            d.generation = DcGeneration::Burst;
        }
    }
}

fn set_dc_window(g: &mut GclSpec, w: TimeNs) {
    for win in &mut g.windows {
        if win.pcp == DC_PCP {
            win.close_at = win.open_at + w;
        } else if win.open_at < w {
            win.open_at = w;
        }
    }
}

impl SweepSpec {
    pub fn check(&self) -> Result<(), HarnessError> {
        let up = self.values.windows(2).all(|w| w[0] < w[1]);
        let down = self.values.windows(2).all(|w| w[0] > w[1]);
        if self.values.is_empty() || !(up || down) {
            return Err(HarnessError::BadValues);
        }
        Ok(())
    }

    /// The config of run `index`, seeded `base_seed + index`.
    pub fn config_for(&self, index: usize, base_seed: u64) -> Result<ExperimentConfig, HarnessError> {
        let value = self.values[index];
        let mut c = self.base.clone();
        c.seed = base_seed.wrapping_add(index as u64);
        let link = c.topology.link(NodeId::Ms, NodeId::Nw).map_or(1_000_000_000, |l| l.bandwidth_bps);
        match &self.kind {
            SweepKind::WindowSweep => {
                for g in [c.gcl_ms.as_mut(), c.gcl_sl.as_mut()].into_iter().flatten() {
                    let w = g.macrotick.ceil(rate_window(value as u64, g.cycle, link)?);
                    set_dc_window(g, w);
                }
            }
            SweepKind::OffsetSweep => {
                let g = c.gcl_sl.as_mut().ok_or(HarnessError::MissingBase("gcl_sl"))?;
                g.base_offset = g.macrotick.ceil(TimeNs(value).rem_euclid(g.cycle)).rem_euclid(g.cycle);
            }
            SweepKind::CycleSweep {
                rate_bps,
                delta,
                sl_window_margin,
            } => {
                let cycle = TimeNs(value);
                let ms = c.gcl_ms.as_mut().ok_or(HarnessError::MissingBase("gcl_ms"))?;
                let m = ms.macrotick;
                let w = m.ceil(rate_window(*rate_bps, cycle, link)?);
                *ms = retime(ms, cycle, TimeNs::ZERO, w);
                if let Some(sl) = c.gcl_sl.as_mut() {
                    let w_sl = m.ceil(TimeNs((w.ns() as f64 * (1.0 + sl_window_margin)).ceil() as i64));
                    let base = m.ceil(delta.rem_euclid(cycle)).rem_euclid(cycle);
                    *sl = retime(sl, cycle, base, w_sl);
                }
                for s in &mut c.streams {
                    if let StreamSpec::Dc(d) = s {
                        d.app_cycle = cycle;
                    }
                }
                if c.dc_streams().any(|d| d.generation == DcGeneration::Burst) {
                    set_burst(&mut c, *rate_bps);
                }
            }
        }
        Ok(c)
    }
}

fn rate_window(rate: u64, cycle: TimeNs, link: u64) -> Result<TimeNs, HarnessError> {
    window_for_rate(rate, cycle, link).map_err(|_| HarnessError::BadValues)
}

fn retime(g: &GclSpec, cycle: TimeNs, base: TimeNs, w: TimeNs) -> GclSpec {
    let mut out = g.clone();
    out.cycle = cycle;
    out.base_offset = base;
    for win in &mut out.windows {
        if win.pcp == DC_PCP {
            win.close_at = win.open_at + w;
        } else {
            win.open_at = win.open_at.max(w);
            win.close_at = cycle - g.guard_band;
        }
    }
    out
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Latency analysis of one DC pcp of a run.
#[derive(Debug, Clone)]
pub struct RunAnalysis {
    pub pcp: u8,
    pub series: LatencySeries,
    pub summary: Option<Summary>,
    pub ici: Option<IciReport>,
    pub losses: usize,
}

pub fn analyze_run(result: &RunResult, pcp: u8) -> RunAnalysis {
    let empty = Vec::new();
    let ms = result.probes.get(&(NodeId::Ms, pcp)).unwrap_or(&empty);
    let sl = result.probes.get(&(NodeId::Sl, pcp)).unwrap_or(&empty);
    let join = join_probes(ms, sl).expect("engine sequence numbers are unique");
    let mut series = join.series;
    if let Some(&(cycle, base)) = result.cycle_by_pcp.get(&pcp) {
        series.meta.cycle = Some(cycle);
        series.meta.delta = Some(base);
    }
    let summary = summarize(&series).ok();
    let ici = series.meta.cycle.and_then(|c| detect_ici_jumps(&series, c, None).ok());
    RunAnalysis {
        pcp,
        series,
        summary,
        ici,
        losses: join.losses.len(),
    }
}

fn node_tag(n: NodeId) -> String {
    n.to_string().to_lowercase()
}

pub fn format_run_summary(result: &RunResult) -> String {
    let mut s = String::from("metric,value\n");
    let c = &result.counts;
    let _ = writeln!(s, "seed,{}", result.seed);
    for (pcp, k) in &result.k_by_pcp {
        let _ = writeln!(s, "k_ns_pcp{pcp},{}", k.ns());
    }
    for (name, v) in [
        ("generated", c.generated),
        ("delivered", c.delivered),
        ("dropped", c.dropped),
        ("queued", c.queued),
        ("in_transit", c.in_transit),
    ] {
        let _ = writeln!(s, "{name},{v}");
    }
    for ((node, pcp), q) in &result.queues {
        let tag = format!("{}_pcp{pcp}", node_tag(*node));
        let _ = writeln!(s, "{tag}_enqueued,{}", q.enqueued);
        let _ = writeln!(s, "{tag}_dropped,{}", q.dropped);
        let _ = writeln!(s, "{tag}_max_occupancy_bytes,{}", q.max_occupancy_bytes);
    }
    s
}

/// Writes every file of one run into `dir` and returns the per-pcp analyses.
pub fn write_run(dir: &Path, config: &ExperimentConfig, result: &RunResult) -> Result<Vec<RunAnalysis>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
    write_atomic(&dir.join("summary.csv"), format_run_summary(result).as_bytes())?;
    let dc: Vec<u8> = config.dc_streams().map(|d| d.pcp).collect();
    for ((node, pcp), recs) in &result.probes {
        if dc.contains(pcp) {
            let name = format!("probes_{}_pcp{pcp}.csv", node_tag(*node));
            write_atomic(&dir.join(name), format_probes(recs).as_bytes())?;
        }
    }
    let mut out = Vec::new();
    for &pcp in &dc {
        let a = analyze_run(result, pcp);
        let suffix = if dc.len() > 1 { format!("_pcp{pcp}") } else { String::new() };
        for (mode, name) in [(Mode::Cdf, "latency_cdf"), (Mode::Ccdf, "latency_ccdf")] {
            if let Ok(d) = distribution(&a.series, mode, DISTRIBUTION_STEP) {
                write_atomic(&dir.join(format!("{name}{suffix}.csv")), format_distribution(&d).as_bytes())?;
            }
        }
        if let Some(ici) = &a.ici {
            write_atomic(&dir.join(format!("clusters{suffix}.csv")), format_clusters(ici).as_bytes())?;
        }
        out.push(a);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub index: usize,
    pub value: i64,
    pub seed: u64,
    pub config_hash: String,
    pub dir: String,
    pub status: RunStatus,
    pub analysis: Option<RunAnalysis>,
    pub dropped: u64,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

/// Runs every value of the sweep on up to `jobs` threads and writes the result tree.
pub fn run_sweep(spec: &SweepSpec, out: &Path, jobs: usize, base_seed: u64) -> Result<Vec<SweepRun>, HarnessError> {
    spec.check()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let runs: Vec<Result<SweepRun, HarnessError>> = pool.install(|| {
        (0..spec.values.len())
            .into_par_iter()
            .map(|i| sweep_one(spec, out, i, base_seed))
            .collect()
    });
    let runs: Vec<SweepRun> = runs.into_iter().collect::<Result<_, _>>()?;

    let mut manifest = String::from("index,value,seed,config_sha256,status,dir\n");
    let mut summary = String::from(
        "index,value,seed,packets,mean_ns,min_ns,max_ns,p50_ns,p99_ns,p999_ns,jumped_fraction,unclassified_fraction,dropped\n",
    );
    let mut cdf = String::from("value,x_ns,probability\n");
    let mut ccdf = cdf.clone();
    for r in &runs {
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Invalid(m) => format!("invalid: {m}"),
        };
        let _ = writeln!(
            manifest,
            "{},{},{},{},{},{}",
            r.index,
            r.value,
            r.seed,
            r.config_hash,
            csv_field(&status),
            r.dir
        );
        let Some(a) = &r.analysis else { continue };
        if let Some(s) = &a.summary {
            let ici = a.ici.as_ref();
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.index,
                r.value,
                r.seed,
                s.count,
                s.mean_ns,
                s.min.ns(),
                s.max.ns(),
                s.p50.ns(),
                s.p99.ns(),
                s.p999.ns(),
                ici.map_or(0.0, IciReport::jumped),
                ici.map_or(0.0, |i| i.unclassified),
                r.dropped
            );
        }
        for (mode, text) in [(Mode::Cdf, &mut cdf), (Mode::Ccdf, &mut ccdf)] {
            if let Ok(d) = distribution(&a.series, mode, DISTRIBUTION_STEP) {
                for (x, y) in d {
                    let _ = writeln!(text, "{},{},{}", r.value, x.ns(), y);
                }
            }
        }
    }
    write_atomic(&out.join("manifest.csv"), manifest.as_bytes())?;
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    write_atomic(&out.join("combined_cdf.csv"), cdf.as_bytes())?;
    write_atomic(&out.join("combined_ccdf.csv"), ccdf.as_bytes())?;
    Ok(runs)
}

fn sweep_one(spec: &SweepSpec, out: &Path, index: usize, base_seed: u64) -> Result<SweepRun, HarnessError> {
    let value = spec.values[index];
    let dir = format!("run_{index:02}_{value}");
    let config = spec.config_for(index, base_seed)?;
    let text = config.to_toml();
    let mut run_out = SweepRun {
        index,
        value,
        seed: config.seed,
        config_hash: sha256_hex(text.as_bytes()),
        dir: dir.clone(),
        status: RunStatus::Ok,
        analysis: None,
        dropped: 0,
    };
    let validated: ValidatedConfig = match config.validate() {
        Ok(v) => v,
        Err(e) => {
            let path = out.join(&dir);
            std::fs::create_dir_all(&path).map_err(io_err(&path))?;
            write_atomic(&path.join("config.toml"), text.as_bytes())?;
            run_out.status = RunStatus::Invalid(e.0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "));
            return Ok(run_out);
        }
    };
    let result = run(&validated);
    let mut analyses = write_run(&out.join(&dir), &config, &result)?;
    run_out.dropped = result.counts.dropped;
    run_out.analysis = if analyses.is_empty() { None } else { Some(analyses.remove(0)) };
    Ok(run_out)
}

/// Path of a file inside a sweep run directory.
pub fn run_file(out: &Path, run: &SweepRun, name: &str) -> PathBuf {
    out.join(&run.dir).join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(mut s: SweepSpec) -> SweepSpec {
        s.base.duration = TimeNs::from_ms(600);
        s.base.drain = TimeNs::from_ms(100);
        s
    }

    #[test]
    fn fig4_windows() {
        let s = preset("fig4").unwrap();
        assert_eq!(s.kind, SweepKind::WindowSweep);
        assert!(s.base.gcl_sl.is_none());
        let widths: Vec<i64> = (0..5)
            .map(|i| window_for_rate(s.values[i] as u64, TimeNs::from_ms(30), 1_000_000_000).unwrap().ns())
            .collect();
        assert_eq!(widths, vec![10_500, 19_500, 28_500, 37_500, 46_500]);
        let c = s.config_for(4, 0).unwrap();
        assert_eq!(c.gcl_ms.unwrap().windows[0].close_at, TimeNs(46_512));
        assert!(s.config_for(0, 0).unwrap().validate().is_ok());
    }

    #[test]
    fn fig5_offsets() {
        let s = preset("fig5").unwrap();
        assert_eq!(s.values.len(), 6);
        let offsets: Vec<TimeNs> = (0..6).map(|i| s.config_for(i, 7).unwrap().gcl_sl.unwrap().base_offset).collect();
        assert_eq!(offsets[0], TimeNs::from_ms(5));
        assert_eq!(offsets[5], TimeNs::ZERO);
        assert_eq!(s.config_for(3, 7).unwrap().seed, 10);
        // 1.55 Mbps over 30 ms is 29.06 frames of 200 B
        assert_eq!(s.base.dc_streams().next().unwrap().burst_size, 29);
    }

    #[test]
    fn fig6_cycles() {
        let s = preset("fig6").unwrap();
        let c = s.config_for(0, 0).unwrap();
        let ms = c.gcl_ms.as_ref().unwrap();
        let sl = c.gcl_sl.as_ref().unwrap();
        assert_eq!(ms.cycle, TimeNs::from_ms(6));
        // 1.55 Mbps over 6 ms is 9.3 us, 9.312 us on the 16 ns grid, 11.648 us with 25 %
        assert_eq!(ms.windows[0].close_at, TimeNs(9_312));
        assert_eq!(sl.windows[0].close_at, TimeNs(11_648));
        assert_eq!(sl.base_offset, TimeNs::from_ms(2));
        assert_eq!(c.dc_streams().next().unwrap().burst_size, 5);
        for i in 0..6 {
            assert!(s.config_for(i, 0).unwrap().validate().is_ok(), "{i}");
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("fig7"), Err(HarnessError::UnknownPreset(_))));
    }

    #[test]
    fn values_must_be_monotone() {
        let mut s = preset("fig5").unwrap();
        s.values = vec![1, 3, 2];
        assert!(matches!(s.check(), Err(HarnessError::BadValues)));
        s.values.clear();
        assert!(s.check().is_err());
    }

    #[test]
    fn sweep_writes_tree_and_records_invalid_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = short(preset("fig5").unwrap());
        s.values = vec![5_000_000, 10_000_000];
        s.base.queue_capacity_bytes = 100;
        let runs = run_sweep(&s, dir.path(), 2, 1).unwrap();
        assert!(runs.iter().all(|r| matches!(r.status, RunStatus::Invalid(_))));
        let m = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(m.lines().nth(1).unwrap().contains("invalid"));

        let mut s = short(preset("fig5").unwrap());
        s.values = vec![5_000_000, 20_000_000];
        let runs = run_sweep(&s, dir.path(), 2, 1).unwrap();
        for r in &runs {
            assert_eq!(r.status, RunStatus::Ok);
            for f in ["config.toml", "summary.csv", "probes_ms_pcp2.csv", "probes_sl_pcp2.csv", "latency_cdf.csv", "clusters.csv"] {
                assert!(run_file(dir.path(), r, f).exists(), "{f}");
            }
        }
        let cdf = std::fs::read_to_string(dir.path().join("combined_cdf.csv")).unwrap();
        assert!(cdf.starts_with("value,x_ns,probability\n"));
    }
}
