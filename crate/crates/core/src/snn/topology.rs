//! Declarative topology text format and the built-in desk-scale networks.
//!
//! One directive per line, `#` comments:
//!
//! ```text
//! network resnet-mini
//! input 3 32 32
//! classes 10
//! conv 16 k=3 s=1 p=1        # output channels; input channels are inferred
//! convt 16 k=4 s=4 p=0
//! bn
//! lif tau=2 vth=1 vreset=0   # parameters optional, defaults shown
//! add from=2                 # residual: add the output of layer 2
//! avgpool k=4 s=4
//! flatten
//! linear 10 bias
//! split SP1                  # boundary after the preceding layer
//! ```
//!
//! Layers are numbered from 0 in order of appearance; `split` lines are not
//! layers. Weights start zeroed (BN as identity) and are filled from a
//! weights container or seeded initialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::tensor::Shape;

use super::graph::NetworkGraph;
use super::layer::{BatchNorm, Conv2d, ConvTranspose2d, LayerSpec, Linear};
use super::lif::LifParams;
use super::SnnError;

pub const BUILTIN_TOPOLOGIES: &[&str] = &["resnet-mini", "vgg-mini"];

fn kv<'a>(tokens: &[&'a str], key: &str) -> Option<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

pub fn parse_topology(text: &str) -> Result<NetworkGraph, SnnError> {
    let mut name = None;
    let mut input: Option<Shape> = None;
    let mut classes = None;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut shapes: Vec<Shape> = Vec::new();
    let mut splits = BTreeMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| SnnError::Topology(format!("line {}: {m}: `{line}`", lineno + 1));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let num = |key: &str, default: Option<usize>| -> Result<usize, SnnError> {
            match kv(&tokens, key) {
                Some(v) => v.parse().map_err(|_| err(&format!("bad {key}"))),
                None => default.ok_or_else(|| err(&format!("missing {key}="))),
            }
        };
        let real = |key: &str, default: f32| -> Result<f32, SnnError> {
            kv(&tokens, key).map_or(Ok(default), |v| v.parse().map_err(|_| err(&format!("bad {key}"))))
        };
        let positional = |i: usize| -> Result<usize, SnnError> {
            tokens
                .get(i)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err("expected a count"))
        };
        let has_bias = tokens.contains(&"bias");

        let current = || -> Result<Shape, SnnError> {
            shapes
                .last()
                .cloned()
                .or_else(|| input.clone())
                .ok_or_else(|| err("layer before `input`"))
        };
        let channels = |s: &Shape| s.chw().map(|(c, _, _)| c).ok_or_else(|| err("needs (C,H,W) input"));

        let layer = match tokens[0] {
            "network" => {
                name = Some(tokens.get(1).ok_or_else(|| err("missing name"))?.to_string());
                continue;
            }
            "input" => {
                let dims: Result<Vec<usize>, _> = tokens[1..].iter().map(|t| t.parse()).collect();
                input = Some(Shape::new(dims.map_err(|_| err("bad extents"))?)?);
                continue;
            }
            "classes" => {
                classes = Some(positional(1)?);
                continue;
            }
            "split" => {
                let sp = tokens.get(1).ok_or_else(|| err("missing split name"))?;
                splits.insert(sp.to_string(), layers.len());
                continue;
            }
            "conv" => {
                let cin = channels(&current()?)?;
                let k = num("k", None)?;
                LayerSpec::Conv2d(Conv2d::new(
                    cin,
                    positional(1)?,
                    k,
                    num("s", Some(1))?,
                    num("p", Some(0))?,
                    has_bias,
                ))
            }
            "convt" => {
                let cin = channels(&current()?)?;
                let k = num("k", None)?;
                LayerSpec::ConvTranspose2d(ConvTranspose2d::new(
                    cin,
                    positional(1)?,
                    k,
                    num("s", Some(1))?,
                    num("p", Some(0))?,
                    has_bias,
                ))
            }
            "bn" => LayerSpec::BatchNorm(BatchNorm::identity(channels(&current()?)?)),
            "linear" => {
                LayerSpec::Linear(Linear::new(current()?.numel(), positional(1)?, has_bias))
            }
            "avgpool" => {
                let k = num("k", None)?;
                LayerSpec::AvgPool {
                    kernel: k,
                    stride: num("s", Some(k))?,
                }
            }
            "flatten" => LayerSpec::Flatten,
            "lif" => {
                let d = LifParams::default();
                LayerSpec::Lif(LifParams::new(
                    real("tau", d.tau)?,
                    real("vth", d.v_th)?,
                    real("vreset", d.v_reset)?,
                )?)
            }
            "add" => LayerSpec::ResidualAdd {
                from: num("from", None)?,
            },
            other => return Err(err(&format!("unknown directive {other}"))),
        };
        let out = layer.output_shape(&current()?).map_err(|e| err(&e.to_string()))?;
        layers.push(layer);
        shapes.push(out);
    }
    let input = input.ok_or_else(|| SnnError::Topology("missing `input`".into()))?;
    let classes = classes.ok_or_else(|| SnnError::Topology("missing `classes`".into()))?;
    NetworkGraph::new(
        name.unwrap_or_else(|| "custom".into()),
        input,
        layers,
        splits,
        classes,
    )
}

/// Canonical text form; `parse_topology(to_text(g))` rebuilds the same layout.
pub fn to_text(g: &NetworkGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "network {}", g.name());
    let dims: Vec<String> = g.input_shape().dims().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "input {}", dims.join(" "));
    let _ = writeln!(s, "classes {}", g.num_classes());
    let splits = g.split_points();
    let bias = |b: &Option<Vec<f32>>| if b.is_some() { " bias" } else { "" };
    for (i, layer) in g.layers().iter().enumerate() {
        for (name, _) in splits.iter().filter(|(_, b)| *b == i) {
            let _ = writeln!(s, "split {name}");
        }
        let _ = match layer {
            LayerSpec::Conv2d(c) => writeln!(
                s,
                "conv {} k={} s={} p={}{}",
                c.out_channels,
                c.kernel,
                c.stride,
                c.padding,
                bias(&c.bias)
            ),
            LayerSpec::ConvTranspose2d(c) => writeln!(
                s,
                "convt {} k={} s={} p={}{}",
                c.out_channels,
                c.kernel,
                c.stride,
                c.padding,
                bias(&c.bias)
            ),
            LayerSpec::BatchNorm(_) => writeln!(s, "bn"),
            LayerSpec::Linear(l) => writeln!(s, "linear {}{}", l.out_features, bias(&l.bias)),
            LayerSpec::AvgPool { kernel, stride } => writeln!(s, "avgpool k={kernel} s={stride}"),
            LayerSpec::Flatten => writeln!(s, "flatten"),
            LayerSpec::Lif(p) => writeln!(s, "lif tau={} vth={} vreset={}", p.tau, p.v_th, p.v_reset),
            LayerSpec::ResidualAdd { from } => writeln!(s, "add from={from}"),
        };
    }
    s
}

/// Appends lines while tracking layer indices for residual edges.
struct Builder {
    text: String,
    count: usize,
}

impl Builder {
    fn new(name: &str, input: [usize; 3], classes: usize) -> Self {
        let mut text = String::new();
        let _ = writeln!(text, "network {name}");
        let _ = writeln!(text, "input {} {} {}", input[0], input[1], input[2]);
        let _ = writeln!(text, "classes {classes}");
        Self { text, count: 0 }
    }

    fn layer(&mut self, line: &str) -> usize {
        self.text.push_str(line);
        self.text.push('\n');
        self.count += 1;
        self.count - 1
    }

    fn split(&mut self, name: &str) {
        let _ = writeln!(self.text, "split {name}");
    }

    /// conv-bn-lif; returns the lif layer index.
    fn cbl(&mut self, out: usize, k: usize, s: usize, p: usize) -> usize {
        self.layer(&format!("conv {out} k={k} s={s} p={p}"));
        self.layer("bn");
        self.layer("lif")
    }

    /// conv-bn-lif-conv-bn-add-lif around the activation of layer `skip`.
    fn residual(&mut self, ch: usize, skip: usize) -> usize {
        self.cbl(ch, 3, 1, 1);
        self.layer(&format!("conv {ch} k=3 s=1 p=1"));
        self.layer("bn");
        self.layer(&format!("add from={skip}"));
        self.layer("lif")
    }
}

/// Text of a built-in network with `in_channels` input planes (3 for
/// images, 2 for polarity event frames).
pub fn builtin_text(name: &str, in_channels: usize) -> Result<String, SnnError> {
    match name {
        // 32x32 input. Split tensors: SP1 (16,32,32), SP3 (32,16,16),
        // SP5 (64,8,8), SP7 (512,4,4).
        "resnet-mini" => {
            let mut b = Builder::new(name, [in_channels, 32, 32], 10);
            let stem = b.cbl(16, 3, 1, 1);
            b.split("SP1");
            b.residual(16, stem);
            let d = b.cbl(32, 3, 2, 1);
            b.residual(32, d);
            b.split("SP3");
            let d = b.cbl(64, 3, 2, 1);
            b.residual(64, d);
            b.split("SP5");
            b.cbl(64, 3, 2, 1);
            b.cbl(512, 1, 1, 0);
            b.split("SP7");
            b.layer("avgpool k=4 s=4");
            b.layer("flatten");
            b.layer("linear 10 bias");
            Ok(b.text)
        }
        // 64x64 input. SPi sits after the i-th conv block's neurons:
        // SP1 (8,64,64), SP3 (16,32,32), SP5 (32,16,16), SP7 (64,8,8), SP8 (64,8,8).
        "vgg-mini" => {
            let mut b = Builder::new(name, [in_channels, 64, 64], 10);
            b.cbl(8, 3, 1, 1);
            b.split("SP1");
            b.cbl(16, 3, 1, 1);
            b.layer("avgpool k=2 s=2");
            b.cbl(16, 3, 1, 1);
            b.split("SP3");
            b.cbl(32, 3, 1, 1);
            b.layer("avgpool k=2 s=2");
            b.cbl(32, 3, 1, 1);
            b.split("SP5");
            b.cbl(64, 3, 1, 1);
            b.layer("avgpool k=2 s=2");
            b.cbl(64, 3, 1, 1);
            b.split("SP7");
            b.cbl(64, 3, 1, 1);
            b.split("SP8");
            b.layer("avgpool k=2 s=2");
            b.layer("flatten");
            b.layer("linear 64 bias");
            b.layer("lif");
            b.layer("linear 10 bias");
            Ok(b.text)
        }
        other => Err(SnnError::Topology(format!(
            "unknown built-in topology {other}; available: {}",
            BUILTIN_TOPOLOGIES.join(", ")
        ))),
    }
}

pub fn builtin(name: &str, in_channels: usize) -> Result<NetworkGraph, SnnError> {
    parse_topology(&builtin_text(name, in_channels)?)
}
