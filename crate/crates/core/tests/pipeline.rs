use std::path::Path;

use qbvsim::analysis::{join_probes, read_probes};
use qbvsim::config::load_config;
use qbvsim::harness::write_run;
use qbvsim::model::NodeId;
use qbvsim::sim::simulate;
use qbvsim::TimeNs;

const CONFIG: &str = r#"
duration = 600000000
seed = 1

[[streams]]
kind = "dc"
pcp = 2
packet_len_bytes = 200
burst_size = 4
app_cycle = 30000000

[gcl_ms]
cycle = 30000000
base_offset = 0
guard_band = 12000
macrotick = 16
windows = [{ pcp = 2, open_at = 0, close_at = 6416 }]

[gcl_sl]
cycle = 30000000
base_offset = 12000000
guard_band = 12000
macrotick = 16
windows = [{ pcp = 2, open_at = 0, close_at = 6416 }]

[bridge.default]
type = "empirical_csv"
path = "delays.csv"
"#;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn config_files_to_probe_csvs_and_back() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "delays.csv", "delay_ns\n4000000\n6500000\n11000000\n");
    let base = write(dir.path(), "base.toml", CONFIG);
    let over = write(dir.path(), "seed.toml", "seed = 42\n");

    let config = load_config(&[base, over]).unwrap();
    assert_eq!(config.seed, 42);
    let result = simulate(&config).unwrap();
    assert_eq!(result.counts.generated, 80);
    assert!(result.counts.conserved());

    let out = dir.path().join("out");
    let analyses = write_run(&out, &config, &result).unwrap();
    let ms = read_probes(&out.join("probes_ms_pcp2.csv")).unwrap();
    let sl = read_probes(&out.join("probes_sl_pcp2.csv")).unwrap();
    assert_eq!(ms, result.probes[&(NodeId::Ms, 2)]);
    assert_eq!(sl, result.probes[&(NodeId::Sl, 2)]);

    let join = join_probes(&ms, &sl).unwrap();
    assert!(join.losses.is_empty() && join.negative.is_empty());
    let from_traces: Vec<(u32, TimeNs)> = result.packets_for(2).map(|p| (p.seq, p.d_emp().unwrap())).collect();
    assert_eq!(join.series.points, from_traces);
    assert_eq!(analyses[0].series.points, from_traces);

    // every delay is below delta - K, so all frames leave in their own SL window
    let summary = analyses[0].summary.as_ref().unwrap();
    assert!(summary.max < TimeNs::from_ms(13));
    assert_eq!(analyses[0].ici.as_ref().unwrap().fraction(0), 1.0);
}

#[test]
fn missing_sample_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let base = write(dir.path(), "base.toml", CONFIG);
    assert!(load_config(&[base]).is_err());
}
