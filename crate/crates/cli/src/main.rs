//! `qbvsim`: plan, simulate, analyze and sweep TAS schedules across a 5G bridge.
//!
//! Exit status is 0 on success, 1 when an input fails validation and 2 on I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use qbvsim::analysis::{
    detect_ici_jumps, distribution, format_clusters, format_distribution, join_probes, read_probes, summarize,
    Mode,
};
use qbvsim::bridge::load_delay_samples;
use qbvsim::config::{load_config, ConfigError, ExperimentConfig};
use qbvsim::gate::GclSpec;
use qbvsim::harness::{self, preset, run_sweep, write_atomic, HarnessError, RunStatus, DISTRIBUTION_STEP};
use qbvsim::model::{NodeId, StreamSpec};
use qbvsim::planner::{plan_schedule, validate_plan, BePlanSpec, DcPlanSpec, PlanInputs};
use qbvsim::sim::{compute_K, run};
use qbvsim::{Macrotick, TimeNs};

#[derive(Parser)]
#[command(name = "qbvsim", version, about = "TAS dejittering across a 5G bridge")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Derive MS and SL gate schedules from bridge delay samples.
    Plan {
        /// CSV with a single `delay_ns` column.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.999)]
        percentile: f64,
        /// Config providing topology and streams; the reference setup if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 12_000)]
        guard_band_ns: i64,
        #[arg(long, default_value_t = 16)]
        macrotick_ns: i64,
        /// Extra offset on top of K + d_hat.
        #[arg(long, default_value_t = 0)]
        offset_margin_ns: i64,
        #[arg(long, default_value_t = 0.0)]
        sl_window_margin: f64,
        /// Write the config fragment here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment. Several configs are merged, later ones winning.
    Simulate {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Join MS and SL probe CSVs and report latency statistics.
    Analyze {
        #[arg(long)]
        ms: PathBuf,
        #[arg(long)]
        sl: PathBuf,
        #[arg(long)]
        cycle_ns: i64,
        /// Also write latency_cdf.csv, latency_ccdf.csv and clusters.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset sweep (fig4, fig5 or fig6).
    Sweep {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the simulated time per run, in seconds.
        #[arg(long)]
        duration_s: Option<f64>,
    },
}

enum Failure {
    Invalid(String),
    Io(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse { .. } => Failure::Invalid(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Plan {
            samples,
            percentile,
            config,
            guard_band_ns,
            macrotick_ns,
            offset_margin_ns,
            sl_window_margin,
            out,
        } => plan(PlanArgs {
            samples,
            percentile,
            config,
            guard_band: TimeNs(guard_band_ns),
            macrotick_ns,
            offset_margin: TimeNs(offset_margin_ns),
            sl_window_margin,
            out,
        }),
        Cmd::Simulate { config, out, seed } => simulate(&config, out, seed),
        Cmd::Analyze { ms, sl, cycle_ns, out } => analyze(&ms, &sl, cycle_ns, out.as_deref()),
        Cmd::Sweep {
            preset,
            out,
            jobs,
            seed,
            duration_s,
        } => sweep(&preset, &out, jobs, seed, duration_s),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("invalid: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(2)
        }
    }
}

struct PlanArgs {
    samples: PathBuf,
    percentile: f64,
    config: Option<PathBuf>,
    guard_band: TimeNs,
    macrotick_ns: i64,
    offset_margin: TimeNs,
    sl_window_margin: f64,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Fragment {
    gcl_ms: GclSpec,
    gcl_sl: GclSpec,
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let base = match &a.config {
        Some(p) => load_config(std::slice::from_ref(p))?,
        None => harness::reference_config(),
    };
    let samples = load_delay_samples(&a.samples).map_err(|e| Failure::Io(e.to_string()))?;
    let m = Macrotick::new(TimeNs(a.macrotick_ns)).ok_or_else(|| Failure::Invalid("macrotick must be positive".into()))?;
    let dc = base
        .dc_streams()
        .next()
        .ok_or_else(|| Failure::Invalid("config has no DC stream".into()))?
        .clone();
    let be = base.streams.iter().find_map(|s| match s {
        StreamSpec::Be(b) => Some(b.clone()),
        _ => None,
    });
    let link = base
        .topology
        .link(NodeId::Ms, NodeId::Nw)
        .ok_or_else(|| Failure::Invalid("topology lacks the MS->NW link".into()))?;
    let k = compute_K(&base.topology, dc.packet_len_bytes).map_err(|e| Failure::Invalid(e.to_string()))?;
    let inputs = PlanInputs {
        app_cycles: base.dc_streams().map(|d| d.app_cycle).collect(),
        dc: DcPlanSpec {
            pcp: dc.pcp,
            burst_size: dc.burst_size,
            packet_len_bytes: dc.packet_len_bytes,
            delay_budget: dc.delay_budget,
        },
        be: be.as_ref().map(|b| BePlanSpec {
            pcp: b.pcp,
            rate_bps: b.rate_bps,
            packet_len_bytes: b.packet_len_bytes,
        }),
        bottleneck_bps: link.bandwidth_bps,
        k,
        jitter_samples: samples,
        percentile: a.percentile,
        guard_band: a.guard_band,
        macrotick: m,
        offset_margin: a.offset_margin,
        sl_window_margin: a.sl_window_margin,
    };
    let p = plan_schedule(&inputs).map_err(|e| Failure::Invalid(e.to_string()))?;
    eprintln!(
        "cycle {} w_dc {} w_dc_sl {} w_be {} K {} d_hat {} delta {} delta' {} ici risk {}",
        p.cycle, p.w_dc, p.w_dc_sl, p.w_be, k, p.d_hat, p.delta, p.delta_prime, p.ici_risk
    );
    let violations = validate_plan(&p, &inputs);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::Invalid(list.join("; ")));
    }
    let be_pcp = be.map(|b| b.pcp);
    let frag = Fragment {
        gcl_ms: p.gcl_ms(dc.pcp, be_pcp, m),
        gcl_sl: p.gcl_sl(dc.pcp, be_pcp, m),
    };
    let text = toml::to_string(&frag).expect("GCL specs serialize");
    match a.out {
        Some(path) => write_atomic(&path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn simulate(configs: &[PathBuf], out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut config: ExperimentConfig = load_config(configs)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let out = out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Failure::Invalid("no --out and no output_dir in the config".into()))?;
    let validated = config.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    let result = run(&validated);
    let analyses = harness::write_run(&out, &config, &result)?;
    let c = &result.counts;
    println!(
        "generated {} delivered {} dropped {} queued {} in_transit {}",
        c.generated, c.delivered, c.dropped, c.queued, c.in_transit
    );
    for a in analyses {
        if let Some(s) = a.summary {
            println!(
                "pcp {}: {} packets, min {} p50 {} p99 {} p999 {} max {}",
                a.pcp, s.count, s.min, s.p50, s.p99, s.p999, s.max
            );
        }
        if let Some(ici) = a.ici {
            println!("pcp {}: jumped fraction {}", a.pcp, ici.jumped());
        }
    }
    Ok(())
}

fn analyze(ms: &Path, sl: &Path, cycle_ns: i64, out: Option<&Path>) -> Result<(), Failure> {
    if cycle_ns <= 0 {
        return Err(Failure::Invalid("--cycle-ns must be positive".into()));
    }
    let cycle = TimeNs(cycle_ns);
    let io = |e: qbvsim::analysis::TraceError| Failure::Io(e.to_string());
    let ms = read_probes(ms).map_err(io)?;
    let sl = read_probes(sl).map_err(io)?;
    let join = join_probes(&ms, &sl).map_err(|e| Failure::Invalid(e.to_string()))?;
    let mut series = join.series;
    series.meta.cycle = Some(cycle);
    let inv = |e: qbvsim::analysis::AnalysisError| Failure::Invalid(e.to_string());
    let s = summarize(&series).map_err(inv)?;
    let ici = detect_ici_jumps(&series, cycle, None).map_err(inv)?;
    println!("packets {} losses {} negative {}", s.count, join.losses.len(), join.negative.len());
    println!(
        "mean_ns {} min {} p50 {} p99 {} p999 {} max {}",
        s.mean_ns, s.min, s.p50, s.p99, s.p999, s.max
    );
    print!("{}", format_clusters(&ici));
    if ici.unclassified > 0.0 {
        println!("unclassified {}", ici.unclassified);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        for (mode, name) in [(Mode::Cdf, "latency_cdf.csv"), (Mode::Ccdf, "latency_ccdf.csv")] {
            let d = distribution(&series, mode, DISTRIBUTION_STEP).map_err(inv)?;
            write_atomic(&dir.join(name), format_distribution(&d).as_bytes())?;
        }
        write_atomic(&dir.join("clusters.csv"), format_clusters(&ici).as_bytes())?;
    }
    Ok(())
}

fn sweep(name: &str, out: &Path, jobs: usize, seed: u64, duration_s: Option<f64>) -> Result<(), Failure> {
    let mut spec = preset(name)?;
    if let Some(d) = duration_s {
        if d.is_nan() || d <= 0.0 {
            return Err(Failure::Invalid("--duration-s must be positive".into()));
        }
        spec.base.duration = TimeNs((d * 1e9).round() as i64);
    }
    let runs = run_sweep(&spec, out, jobs, seed)?;
    for r in &runs {
        match &r.status {
            RunStatus::Ok => {
                let jumped = r.analysis.as_ref().and_then(|a| a.ici.as_ref()).map_or(0.0, |i| i.jumped());
                println!("{} value {} seed {} jumped {} dropped {}", r.dir, r.value, r.seed, jumped, r.dropped);
            }
            RunStatus::Invalid(m) => println!("{} value {} invalid: {m}", r.dir, r.value),
        }
    }
    Ok(())
}
