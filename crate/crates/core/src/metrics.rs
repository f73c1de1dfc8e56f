//! Energy, payload and latency accounting.
//!
//! Edge energy follows the synaptic-operation model: each layer costs
//! `FLOPs × firing rate of its input × timesteps` SynOps, and every SynOp
//! costs a fixed energy (23 pJ by default).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PJ_PER_SYNOP: f64 = 23.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("firing rate {0} outside [0, 1]")]
    Rate(f64),
    #[error("energy per SynOp must be positive, got {0}")]
    EnergyModel(f64),
    #[error("no firing rate recorded for edge layer {0}")]
    MissingRate(usize),
    #[error("report needs at least one row")]
    NoRows,
    #[error("rows of {label} at {split} disagree on t_max: {a} vs {b}")]
    InconsistentTMax {
        label: String,
        split: String,
        a: usize,
        b: usize,
    },
    #[error("row {sample}: t_exit {t_exit} outside 1..={t_max}")]
    TExit {
        sample: usize,
        t_exit: usize,
        t_max: usize,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pj_per_synop: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            pj_per_synop: DEFAULT_PJ_PER_SYNOP,
        }
    }
}

impl EnergyModel {
    pub fn new(pj_per_synop: f64) -> Result<Self, MetricsError> {
        if !(pj_per_synop.is_finite() && pj_per_synop > 0.0) {
            return Err(MetricsError::EnergyModel(pj_per_synop));
        }
        Ok(Self { pj_per_synop })
    }

    pub fn pj_per_synop(&self) -> f64 {
        self.pj_per_synop
    }

    pub fn joules(&self, synops: f64) -> f64 {
        synops * self.pj_per_synop * 1e-12
    }
}

pub fn synops(flops: u64, rate: f64, timesteps: usize) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MetricsError::Rate(rate));
    }
    Ok(flops as f64 * rate * timesteps as f64)
}

/// Dense FLOPs of a layer and the mean firing rate of its input over the
/// timesteps actually run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerUsage {
    pub flops: u64,
    pub rate: Option<f64>,
}

pub fn total_synops(layers: &[LayerUsage], t_used: usize) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for (i, l) in layers.iter().enumerate() {
        let rate = l.rate.ok_or(MetricsError::MissingRate(i))?;
        total += synops(l.flops, rate, t_used)?;
    }
    Ok(total)
}

pub fn edge_energy(layers: &[LayerUsage], t_used: usize, model: &EnergyModel) -> Result<f64, MetricsError> {
    Ok(model.joules(total_synops(layers, t_used)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyBreakdown {
    pub edge_compute_s: f64,
    pub uplink_s: f64,
    pub cloud_compute_s: f64,
    pub downlink_s: f64,
    pub total_s: f64,
}

impl LatencyBreakdown {
    pub fn new(edge_compute_s: f64, uplink_s: f64, cloud_compute_s: f64, downlink_s: f64) -> Self {
        let c = |v: f64| v.max(0.0);
        let (e, u, cl, d) = (c(edge_compute_s), c(uplink_s), c(cloud_compute_s), c(downlink_s));
        Self {
            edge_compute_s: e,
            uplink_s: u,
            cloud_compute_s: cl,
            downlink_s: d,
            total_s: e + u + cl + d,
        }
    }

    pub fn add(&self, o: &LatencyBreakdown) -> Self {
        Self::new(
            self.edge_compute_s + o.edge_compute_s,
            self.uplink_s + o.uplink_s,
            self.cloud_compute_s + o.cloud_compute_s,
            self.downlink_s + o.downlink_s,
        )
    }
}

/// One sample of one configuration. Column order is the CSV order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub sweep_axis: String,
    pub sweep_value: String,
    pub sample: usize,
    pub label: String,
    pub split: String,
    pub t_max: usize,
    pub alpha: Option<f64>,
    pub t_exit: usize,
    pub prediction: usize,
    pub target: Option<usize>,
    pub confidence: f64,
    /// Logical bits of the un-compressed split activation over `t_exit` steps.
    pub raw_bits: u64,
    /// Logical spike bits actually sent up.
    pub uplink_bits: u64,
    /// FEATURE message bytes on the wire, headers included.
    pub uplink_bytes: u64,
    /// Logical logit bits sent down (32 per class per step).
    pub downlink_bits: u64,
    /// LOGITS message bytes on the wire, headers included.
    pub downlink_bytes: u64,
    pub compression_ratio: f64,
    pub edge_compute_s: f64,
    pub uplink_s: f64,
    pub cloud_compute_s: f64,
    pub downlink_s: f64,
    pub total_s: f64,
    pub edge_synops: f64,
    pub encoder_synops: f64,
    /// Backbone plus encoder.
    pub edge_energy_j: f64,
    pub encoder_energy_j: f64,
}

impl RunRow {
    pub fn latency(&self) -> LatencyBreakdown {
        LatencyBreakdown {
            edge_compute_s: self.edge_compute_s,
            uplink_s: self.uplink_s,
            cloud_compute_s: self.cloud_compute_s,
            downlink_s: self.downlink_s,
            total_s: self.total_s,
        }
    }

    pub fn set_latency(&mut self, l: LatencyBreakdown) {
        self.edge_compute_s = l.edge_compute_s;
        self.uplink_s = l.uplink_s;
        self.cloud_compute_s = l.cloud_compute_s;
        self.downlink_s = l.downlink_s;
        self.total_s = l.total_s;
    }
}

/// Summary of all rows sharing (sweep value, label, split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sweep_axis: String,
    pub sweep_value: String,
    pub label: String,
    pub split: String,
    pub n: usize,
    pub t_max: usize,
    pub t_avg: f64,
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p95_s: f64,
    pub mean_edge_compute_s: f64,
    pub mean_uplink_s: f64,
    pub mean_cloud_compute_s: f64,
    pub mean_downlink_s: f64,
    pub total_raw_bits: u64,
    pub total_uplink_bits: u64,
    pub total_uplink_bytes: u64,
    pub total_downlink_bytes: u64,
    pub compression_ratio: f64,
    pub mean_edge_synops: f64,
    pub mean_edge_energy_j: f64,
    pub mean_encoder_energy_j: f64,
    /// `t:fraction` pairs separated by spaces, for every t in 1..=t_max.
    pub exit_histogram: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Plot-ready per-configuration tables derived from the aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    /// Bits per sample before and after the bottleneck.
    Payload,
    /// Mean latency per component, plus total percentiles.
    Latency,
    /// Mean edge SynOps and energy.
    Energy,
}

impl Table {
    pub const ALL: [Table; 3] = [Table::Payload, Table::Latency, Table::Energy];

    pub fn name(self) -> &'static str {
        match self {
            Table::Payload => "payload",
            Table::Latency => "latency",
            Table::Energy => "energy",
        }
    }
}

#[derive(Serialize)]
struct PayloadRow<'a> {
    sweep_axis: &'a str,
    sweep_value: &'a str,
    label: &'a str,
    split: &'a str,
    n: usize,
    t_avg: f64,
    raw_bits_per_sample: f64,
    uplink_bits_per_sample: f64,
    uplink_bytes_per_sample: f64,
    downlink_bytes_per_sample: f64,
    compression_ratio: f64,
}

#[derive(Serialize)]
struct LatencyRow<'a> {
    sweep_axis: &'a str,
    sweep_value: &'a str,
    label: &'a str,
    split: &'a str,
    edge_compute_s: f64,
    uplink_s: f64,
    cloud_compute_s: f64,
    downlink_s: f64,
    total_mean_s: f64,
    total_p50_s: f64,
    total_p95_s: f64,
}

#[derive(Serialize)]
struct EnergyRow<'a> {
    sweep_axis: &'a str,
    sweep_value: &'a str,
    label: &'a str,
    split: &'a str,
    t_avg: f64,
    edge_synops: f64,
    edge_energy_j: f64,
    encoder_energy_j: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn aggregate(rows: &[&RunRow]) -> Aggregate {
    let n = rows.len();
    let nf = n as f64;
    let first = rows[0];
    let mean = |f: fn(&RunRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / nf;
    let mut lat: Vec<f64> = rows.iter().map(|r| r.total_s).collect();
    lat.sort_by(f64::total_cmp);
    let total_raw_bits: u64 = rows.iter().map(|r| r.raw_bits).sum();
    let total_uplink_bits: u64 = rows.iter().map(|r| r.uplink_bits).sum();
    let mut hist = vec![0usize; first.t_max + 1];
    for r in rows {
        hist[r.t_exit] += 1;
    }
    let exit_histogram = (1..=first.t_max)
        .map(|t| format!("{t}:{}", hist[t] as f64 / nf))
        .collect::<Vec<_>>()
        .join(" ");
    Aggregate {
        sweep_axis: first.sweep_axis.clone(),
        sweep_value: first.sweep_value.clone(),
        label: first.label.clone(),
        split: first.split.clone(),
        n,
        t_max: first.t_max,
        t_avg: rows.iter().map(|r| r.t_exit as f64).sum::<f64>() / nf,
        latency_mean_s: lat.iter().sum::<f64>() / nf,
        latency_p50_s: percentile(&lat, 50.0),
        latency_p95_s: percentile(&lat, 95.0),
        mean_edge_compute_s: mean(|r| r.edge_compute_s),
        mean_uplink_s: mean(|r| r.uplink_s),
        mean_cloud_compute_s: mean(|r| r.cloud_compute_s),
        mean_downlink_s: mean(|r| r.downlink_s),
        total_raw_bits,
        total_uplink_bits,
        total_uplink_bytes: rows.iter().map(|r| r.uplink_bytes).sum(),
        total_downlink_bytes: rows.iter().map(|r| r.downlink_bytes).sum(),
        compression_ratio: if total_uplink_bits == 0 {
            0.0
        } else {
            total_raw_bits as f64 / total_uplink_bits as f64
        },
        mean_edge_synops: mean(|r| r.edge_synops),
        mean_edge_energy_j: mean(|r| r.edge_energy_j),
        mean_encoder_energy_j: mean(|r| r.encoder_energy_j),
        exit_histogram,
    }
}

impl RunReport {
    /// Group rows by (sweep value, label, split) in order of first appearance.
    pub fn build(rows: Vec<RunRow>) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::NoRows);
        }
        let mut order: Vec<(String, String, String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String, String, String), Vec<&RunRow>> = BTreeMap::new();
        for r in &rows {
            if r.t_exit == 0 || r.t_exit > r.t_max {
                return Err(MetricsError::TExit {
                    sample: r.sample,
                    t_exit: r.t_exit,
                    t_max: r.t_max,
                });
            }
            let key = (r.sweep_axis.clone(), r.sweep_value.clone(), r.label.clone(), r.split.clone());
            let g = groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Vec::new()
            });
            if let Some(f) = g.first() {
                if f.t_max != r.t_max {
                    return Err(MetricsError::InconsistentTMax {
                        label: r.label.clone(),
                        split: r.split.clone(),
                        a: f.t_max,
                        b: r.t_max,
                    });
                }
            }
            g.push(r);
        }
        let aggregates = order.iter().map(|k| aggregate(&groups[k])).collect();
        Ok(Self { rows, aggregates })
    }

    pub fn aggregate_for(&self, label: &str, split: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label && a.split == split)
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        for a in &self.aggregates {
            wr.serialize(a)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn rows_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_rows_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn aggregates_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_aggregates_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn write_table_csv<W: Write>(&self, table: Table, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        for a in &self.aggregates {
            let n = a.n as f64;
            let (axis, value, label, split) = (&*a.sweep_axis, &*a.sweep_value, &*a.label, &*a.split);
            match table {
                Table::Payload => wr.serialize(PayloadRow {
                    sweep_axis: axis,
                    sweep_value: value,
                    label,
                    split,
                    n: a.n,
                    t_avg: a.t_avg,
                    raw_bits_per_sample: a.total_raw_bits as f64 / n,
                    uplink_bits_per_sample: a.total_uplink_bits as f64 / n,
                    uplink_bytes_per_sample: a.total_uplink_bytes as f64 / n,
                    downlink_bytes_per_sample: a.total_downlink_bytes as f64 / n,
                    compression_ratio: a.compression_ratio,
                })?,
                Table::Latency => wr.serialize(LatencyRow {
                    sweep_axis: axis,
                    sweep_value: value,
                    label,
                    split,
                    edge_compute_s: a.mean_edge_compute_s,
                    uplink_s: a.mean_uplink_s,
                    cloud_compute_s: a.mean_cloud_compute_s,
                    downlink_s: a.mean_downlink_s,
                    total_mean_s: a.latency_mean_s,
                    total_p50_s: a.latency_p50_s,
                    total_p95_s: a.latency_p95_s,
                })?,
                Table::Energy => wr.serialize(EnergyRow {
                    sweep_axis: axis,
                    sweep_value: value,
                    label,
                    split,
                    t_avg: a.t_avg,
                    edge_synops: a.mean_edge_synops,
                    edge_energy_j: a.mean_edge_energy_j,
                    encoder_energy_j: a.mean_encoder_energy_j,
                })?,
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn table_csv(&self, table: Table) -> String {
        let mut buf = Vec::new();
        self.write_table_csv(table, &mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Rebuild a report from a rows CSV.
    pub fn read_rows_csv<R: Read>(r: R) -> Result<Self, MetricsError> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<Result<Vec<RunRow>, _>>()?;
        Self::build(rows)
    }
}
