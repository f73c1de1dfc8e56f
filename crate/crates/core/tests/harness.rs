//! Experiment-level behaviour: configurations, sweeps, inputs, weight files
//! and the socket transport.

use std::path::Path;

use spikesplit::harness::{
    bind, prepare, run_experiment, serve_cloud, sweep, weight_entries, ConfigLabel, ExperimentConfig, InputSource,
    Mode, SweepAxis,
};
use spikesplit::metrics::RunRow;
use spikesplit::model_io;
use spikesplit::snn::{Event, EventStream};

fn config(label: &str, samples: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.set("label", label).unwrap();
    c.samples = samples;
    c
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn fixed_uncompressed_rows_use_the_full_budget() {
    let mut c = config("F-B", 10);
    c.t_max = 2;
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.rows.len(), 10);
    for row in &r.rows {
        assert_eq!(row.t_exit, 2);
        assert_eq!(row.uplink_bits, row.raw_bits);
        assert_eq!(row.raw_bits, 2 * 512 * 4 * 4);
        assert_eq!(row.compression_ratio, 1.0);
        assert_eq!(row.alpha, None);
    }
    assert_eq!(r.aggregates[0].exit_histogram, "1:0 2:1");
}

#[test]
fn degenerate_alpha_is_rejected() {
    for a in ["0", "1", "-0.5", "1.5"] {
        let mut c = config("D+B", 1);
        let err = c.set("alpha", a).map(|_| ()).and_then(|_| run_experiment(&c).map(|_| ()));
        assert!(err.is_err(), "alpha {a} accepted");
    }
}

#[test]
fn alpha_sweep_raises_average_exit_time() {
    let values = strings(&["0.5", "0.6", "0.7", "0.8", "0.9", "0.95", "0.99"]);
    let r = sweep(SweepAxis::Alpha, &values, &config("D+B", 20)).unwrap();
    let t_avg: Vec<f64> = r.aggregates.iter().map(|a| a.t_avg).collect();
    assert_eq!(t_avg.len(), values.len());
    assert!(t_avg.windows(2).all(|w| w[0] <= w[1]), "{t_avg:?}");
    assert!(t_avg[0] < t_avg[t_avg.len() - 1], "sweep does not exercise the rule: {t_avg:?}");
    assert!(r.rows.iter().all(|row| row.sweep_axis == "alpha"));
}

#[test]
fn larger_budget_never_lowers_average_exit_time() {
    let r = sweep(SweepAxis::TMax, &strings(&["4", "8"]), &config("D+B", 20)).unwrap();
    let (t4, t8) = (r.aggregates[0].t_avg, r.aggregates[1].t_avg);
    assert!(t8 >= t4, "{t4} vs {t8}");
    // Samples that exit early under both budgets exit at the same step.
    for (a, b) in r.rows[..20].iter().zip(&r.rows[20..]) {
        if a.t_exit < 4 {
            assert_eq!(a.t_exit, b.t_exit);
            assert_eq!(a.prediction, b.prediction);
        }
    }
}

#[test]
fn channel_sweep_scales_uplink_bits_with_code_size() {
    let r = sweep(SweepAxis::BottleneckChannels, &strings(&["1", "2", "4", "8"]), &config("F+B", 5)).unwrap();
    for (a, ch) in r.aggregates.iter().zip([1u64, 2, 4, 8]) {
        // (C,1,1) code at SP7, 4 timesteps, 5 samples.
        assert_eq!(a.total_uplink_bits, ch * 4 * 5);
        assert_eq!(a.compression_ratio, (512 * 16 / ch) as f64);
    }
}

#[test]
fn split_sweep_reports_each_split() {
    let r = sweep(SweepAxis::Split, &strings(&["SP1", "SP3", "SP5", "SP7"]), &config("F+B", 3)).unwrap();
    let ratios: Vec<f64> = r.aggregates.iter().map(|a| a.compression_ratio).collect();
    assert_eq!(ratios, vec![64.0, 128.0, 256.0, 2048.0]);
    let splits: Vec<&str> = r.aggregates.iter().map(|a| a.split.as_str()).collect();
    assert_eq!(splits, vec!["SP1", "SP3", "SP5", "SP7"]);
}

#[test]
fn edge_only_baseline_transmits_nothing() {
    let mut c = config("D-B", 6);
    c.set("split", "edge-only").unwrap();
    let r = run_experiment(&c).unwrap();
    for row in &r.rows {
        assert_eq!((row.uplink_bits, row.uplink_bytes, row.downlink_bytes), (0, 0, 0));
        assert_eq!(row.uplink_s + row.downlink_s + row.cloud_compute_s, 0.0);
        assert!(row.edge_energy_j > 0.0);
    }
    assert!(c.set("label", "F+B").is_err() || run_experiment(&c).is_err());
}

#[test]
fn dynamic_rows_match_fixed_rows_up_to_exit() {
    let f = run_experiment(&config("F+B", 30)).unwrap();
    let d = run_experiment(&config("D+B", 30)).unwrap();
    for (fr, dr) in f.rows.iter().zip(&d.rows) {
        assert!(dr.t_exit <= fr.t_exit);
        assert!(dr.uplink_bits <= fr.uplink_bits);
        assert!(dr.edge_energy_j <= fr.edge_energy_j);
        if dr.t_exit == fr.t_exit {
            assert_eq!(dr.edge_energy_j, fr.edge_energy_j);
            assert_eq!(dr.prediction, fr.prediction);
        }
    }
}

fn write_events(dir: &Path) {
    for k in 0..3u32 {
        let events: Vec<Event> = (0..400u32)
            .map(|i| Event {
                t_us: u64::from(i * 250),
                x: ((i * 7 + k * 3) % 32) as u16,
                y: ((i * 13 + k) % 32) as u16,
                polarity: u8::from(i % 3 == 0),
            })
            .collect();
        std::fs::write(dir.join(format!("rec{k}.txt")), EventStream::new(events).to_text()).unwrap();
    }
}

#[test]
fn event_inputs_drive_the_network() {
    let mut c = config("D+B", 4);
    c.set("input", "synthetic-events").unwrap();
    let synth = run_experiment(&c).unwrap();
    assert!(synth.rows.iter().all(|r| r.target.is_some() && r.t_exit >= 1));

    let dir = tempfile::tempdir().unwrap();
    write_events(dir.path());
    c.set("input", dir.path().to_str().unwrap()).unwrap();
    assert_eq!(c.input, InputSource::event_path(dir.path()).unwrap());
    let files = run_experiment(&c).unwrap();
    assert_eq!(files.rows.len(), 4);
    assert!(files.rows.iter().all(|r| r.target.is_none()));
    // Sample 3 wraps around to the first recording.
    assert_eq!(files.rows[3].prediction, files.rows[0].prediction);
    assert_eq!(files.rows[3].uplink_bits, files.rows[0].uplink_bits);
}

#[test]
fn weight_container_reproduces_seeded_run() {
    let c = config("D+B", 5);
    let entries = weight_entries(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    std::fs::write(&path, model_io::save(&entries).unwrap()).unwrap();

    let mut from_file = c.clone();
    from_file.set("weights", path.to_str().unwrap()).unwrap();
    assert_eq!(prepare(&from_file).unwrap().digest, prepare(&c).unwrap().digest);
    assert_eq!(
        run_experiment(&from_file).unwrap().rows_csv(),
        run_experiment(&c).unwrap().rows_csv()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(run_experiment(&from_file).is_err());
}

#[test]
fn config_text_roundtrips() {
    let mut c = config("D+B", 7);
    c.apply_text("# comment\nalpha = 0.75\nt_max=6\nsplit = SP5\njitter_fraction = 0.1\n").unwrap();
    assert_eq!((c.alpha, c.t_max, c.split.as_str()), (0.75, 6, "SP5"));
    let mut back = ExperimentConfig::default();
    back.apply_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert!(ExperimentConfig::default().apply_text("colour = blue").is_err());
}

fn prediction_columns(r: &RunRow) -> (usize, usize, usize, u64, u64, u64, u64, u64) {
    (
        r.sample,
        r.prediction,
        r.t_exit,
        r.raw_bits,
        r.uplink_bits,
        r.uplink_bytes,
        r.downlink_bits,
        r.downlink_bytes,
    )
}

#[test]
fn socket_mode_agrees_with_simulation() {
    let c = config("D+B", 12);
    let p = prepare(&c).unwrap();
    let listener = bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut sock = c.clone();
    sock.mode = Mode::Socket(addr);
    let (socket, simulated) = std::thread::scope(|s| {
        s.spawn(|| serve_cloud(listener, &c, &p, Some(1), &|_| {}).unwrap());
        (run_experiment(&sock).unwrap(), run_experiment(&c).unwrap())
    });
    let a: Vec<_> = socket.rows.iter().map(prediction_columns).collect();
    let b: Vec<_> = simulated.rows.iter().map(prediction_columns).collect();
    assert_eq!(a, b);
    assert!(socket.rows.iter().all(|r| r.total_s > 0.0));
}

#[test]
fn labels_parse_in_every_spelling() {
    for (s, l) in [("F-B", ConfigLabel::FixedNoBottleneck), ("D+B", ConfigLabel::DynamicBottleneck)] {
        assert_eq!(s.parse::<ConfigLabel>().unwrap(), l);
    }
    assert_eq!("F\u{2013}B".parse::<ConfigLabel>().unwrap(), ConfigLabel::FixedNoBottleneck);
    assert!("X+B".parse::<ConfigLabel>().is_err());
}
