//! `spikesplit`: run split edge/cloud spiking inference experiments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spikesplit::harness::{
    bind, prepare, run_experiment, serve_cloud, sweep, weight_entries, ConfigLabel, ExperimentConfig, Mode,
    SweepAxis,
};
use spikesplit::metrics::{RunReport, Table};
use spikesplit::model_io;

#[derive(Parser)]
#[command(name = "spikesplit", version, about = "Split edge/cloud spiking network inference harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration, or all four with `--label all`.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// One run per value of a single parameter.
    Sweep {
        /// alpha, t_max, bottleneck_channels or split.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        exp: ExpArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Serve the cloud half of the network over TCP.
    Serve {
        /// Address to listen on; port 0 picks a free port.
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Exit after this many connections have been served.
        #[arg(long)]
        max_connections: Option<usize>,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Recompute aggregates and plot tables from a rows CSV.
    Report {
        /// Rows CSV written by `run` or `sweep`.
        rows: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write the seeded weights of a configuration to a container file.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Print the effective configuration in config-file form.
    Config {
        #[command(flatten)]
        exp: ExpArgs,
    },
}

/// One optional flag per configuration key; `--t-max` sets `t_max` and so on.
macro_rules! experiment_args {
    ($($key:ident),* $(,)?) => {
        #[derive(Args, Default)]
        struct ExpArgs {
            /// Config file of `key = value` lines, applied before the flags.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE", help = help_for(stringify!($key)))]
                $key: Option<String>,
            )*
        }

        impl ExpArgs {
            fn pairs(&self) -> Vec<(&'static str, Option<&str>)> {
                vec![$((stringify!($key), self.$key.as_deref())),*]
            }
        }
    };
}

experiment_args!(
    topology,
    split,
    label,
    alpha,
    t_max,
    throughput_bps,
    delay_s,
    downlink_throughput_bps,
    downlink_delay_s,
    jitter_seed,
    jitter_fraction,
    seed,
    weight_seed,
    samples,
    input,
    bottleneck_channels,
    bottleneck_kernel,
    bottleneck_stride,
    bottleneck_padding,
    weights,
    compute,
    edge_flops,
    cloud_flops,
    pj_per_synop,
    mode,
    execution,
);

fn help_for(key: &str) -> String {
    spikesplit::harness::KEYS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, h)| h.to_string())
        .unwrap_or_default()
}

/// Labels requested on the command line; `all` expands to every label the
/// split supports.
enum Labels {
    One,
    All,
}

impl ExpArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, Labels)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut labels = Labels::One;
        for (key, value) in self.pairs() {
            let Some(v) = value else { continue };
            if key == "label" && v.trim().eq_ignore_ascii_case("all") {
                labels = Labels::All;
                continue;
            }
            cfg.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
        Ok((cfg, labels))
    }

    fn single(&self) -> Result<ExperimentConfig> {
        match self.resolve()? {
            (cfg, Labels::One) => Ok(cfg),
            (_, Labels::All) => bail!("this command takes a single label, not `all`"),
        }
    }
}

fn expand(cfg: &ExperimentConfig, labels: &Labels) -> Vec<ExperimentConfig> {
    match labels {
        Labels::One => vec![cfg.clone()],
        Labels::All => ConfigLabel::ALL
            .into_iter()
            .filter(|l| !(cfg.is_edge_only() && l.has_bottleneck()))
            .map(|l| {
                let mut c = cfg.clone();
                c.label = l;
                c
            })
            .collect(),
    }
}

#[derive(Args)]
struct OutArgs {
    /// Directory for rows.csv, aggregates.csv and the payload, latency and
    /// energy tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArgs {
    fn emit(&self, report: &RunReport) -> Result<()> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write(&dir.join("rows.csv"), &report.rows_csv())?;
            write(&dir.join("aggregates.csv"), &report.aggregates_csv())?;
            for t in Table::ALL {
                write(&dir.join(format!("{}.csv", t.name())), &report.table_csv(t))?;
            }
            eprintln!("wrote {} rows to {}", report.rows.len(), dir.display());
        }
        print!("{}", report.aggregates_csv());
        Ok(())
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(exp: &ExpArgs, out: &OutArgs) -> Result<()> {
    let (cfg, labels) = exp.resolve()?;
    let configs = expand(&cfg, &labels);
    if configs.len() > 1 && matches!(cfg.mode, Mode::Socket(_)) {
        bail!("socket mode runs one label per cloud server; pass a single --label");
    }
    let mut rows = Vec::new();
    for c in &configs {
        c.validate().with_context(|| format!("label {}", c.label))?;
        eprintln!("running {} at {} ({} samples)", c.label, c.split, c.samples);
        rows.extend(run_experiment(c).with_context(|| format!("label {}", c.label))?.rows);
    }
    out.emit(&RunReport::build(rows)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { exp, out } => run(&exp, &out),
        Cmd::Sweep { axis, values, exp, out } => {
            let axis: SweepAxis = axis.parse()?;
            let (cfg, labels) = exp.resolve()?;
            let mut rows = Vec::new();
            for c in expand(&cfg, &labels) {
                rows.extend(sweep(axis, &values, &c).with_context(|| format!("label {}", c.label))?.rows);
            }
            out.emit(&RunReport::build(rows)?)
        }
        Cmd::Serve {
            listen,
            max_connections,
            exp,
        } => {
            let cfg = exp.single()?;
            let p = prepare(&cfg)?;
            let listener = bind(&listen)?;
            println!("listening on {}", listener.local_addr()?);
            std::io::stdout().flush()?;
            let log = |line: &str| eprintln!("{line}");
            serve_cloud(listener, &cfg, &p, max_connections, &log)?;
            Ok(())
        }
        Cmd::Report { rows, out } => {
            let file = fs::File::open(&rows).with_context(|| format!("opening {}", rows.display()))?;
            let report = RunReport::read_rows_csv(file).with_context(|| format!("reading {}", rows.display()))?;
            out.emit(&report)
        }
        Cmd::InitWeights { out, exp } => {
            let cfg = exp.single()?;
            let bytes = model_io::save(&weight_entries(&cfg)?)?;
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "wrote {} bytes, crc {:08x}",
                bytes.len(),
                model_io::container_crc(&bytes).unwrap_or_default()
            );
            Ok(())
        }
        Cmd::Config { exp } => {
            print!("{}", exp.single()?.to_text());
            Ok(())
        }
    }
}
