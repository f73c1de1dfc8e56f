//! Layer sequences with named split points.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::par::Execution;
use crate::tensor::{Shape, SpikeTensor};

use super::layer::{layer_forward, Activation, LayerSpec};
use super::lif::{lif_step, LifState};
use super::SnnError;

/// A feed-forward spiking network.
///
/// Layer `i` consumes the output of layer `i - 1` (or the network input for
/// `i == 0`). A split point `b` places layers `0..b` on the edge and `b..` in
/// the cloud; it must sit right after an `Lif` layer so the traffic is binary,
/// and no residual edge may cross it.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    name: String,
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    splits: BTreeMap<String, usize>,
    num_classes: usize,
    /// Layers whose output some later `ResidualAdd` consumes.
    saved: Vec<bool>,
    exec: Execution,
}

/// Per-session neuron state for every `Lif` layer of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState {
    lif: Vec<Option<LifState>>,
}

impl NetState {
    pub fn reset(&mut self) {
        self.lif.iter_mut().flatten().for_each(LifState::reset);
    }

    pub fn layer(&self, i: usize) -> Option<&LifState> {
        self.lif.get(i).and_then(Option::as_ref)
    }
}

/// Reset every membrane potential in `states`.
pub fn reset_state(states: &mut NetState) {
    states.reset();
}

impl NetworkGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape,
        layers: Vec<LayerSpec>,
        splits: BTreeMap<String, usize>,
        num_classes: usize,
    ) -> Result<Self, SnnError> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut saved = vec![false; layers.len()];
        for (i, layer) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            let out = layer.output_shape(input).map_err(|e| match e {
                SnnError::Topology(m) => SnnError::Topology(format!("layer {i}: {m}")),
                other => other,
            })?;
            if let LayerSpec::ResidualAdd { from } = layer {
                if *from >= i {
                    return Err(SnnError::Topology(format!(
                        "layer {i}: residual source {from} is not an earlier layer"
                    )));
                }
                if &shapes[*from] != input {
                    return Err(SnnError::Topology(format!(
                        "layer {i}: residual source shape {} differs from {input}",
                        shapes[*from]
                    )));
                }
                saved[*from] = true;
            }
            if let LayerSpec::BatchNorm(b) = layer {
                b.validate()?;
            }
            shapes.push(out);
        }
        let out = shapes
            .last()
            .ok_or_else(|| SnnError::Topology("network has no layers".into()))?;
        if out.numel() != num_classes || out.rank() != 1 {
            return Err(SnnError::Topology(format!(
                "output shape {out} does not match {num_classes} classes"
            )));
        }
        let g = Self {
            name: name.into(),
            input_shape,
            layers,
            shapes,
            splits: BTreeMap::new(),
            num_classes,
            saved,
            exec: Execution::default(),
        };
        let mut g = g;
        for (name, b) in splits {
            g.add_split(name, b)?;
        }
        Ok(g)
    }

    fn add_split(&mut self, name: String, b: usize) -> Result<(), SnnError> {
        if b == 0 || b >= self.layers.len() {
            return Err(SnnError::Topology(format!(
                "split {name} at {b} is not an interior boundary"
            )));
        }
        if !self.layers[b - 1].is_lif() {
            return Err(SnnError::Topology(format!(
                "split {name} at {b} does not follow an lif layer"
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::ResidualAdd { from } = layer {
                if from + 1 < b && b <= i {
                    return Err(SnnError::Topology(format!(
                        "split {name} at {b} cuts residual edge {from} -> {i}"
                    )));
                }
            }
        }
        if self.splits.contains_key(&name) {
            return Err(SnnError::Topology(format!("duplicate split {name}")));
        }
        self.splits.insert(name, b);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Input shape of layer `i` (`i == len` gives the output shape).
    pub fn shape_before(&self, i: usize) -> &Shape {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn output_shape(&self, i: usize) -> &Shape {
        &self.shapes[i]
    }

    /// Split points in boundary order.
    pub fn split_points(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<_> = self.splits.iter().map(|(k, &b)| (k.as_str(), b)).collect();
        v.sort_by_key(|&(_, b)| b);
        v
    }

    pub fn split(&self, name: &str) -> Result<usize, SnnError> {
        self.splits
            .get(name)
            .copied()
            .ok_or_else(|| SnnError::UnknownSplit(name.to_string()))
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn new_state(&self) -> NetState {
        NetState {
            lif: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| match l {
                    LayerSpec::Lif(p) => Some(LifState::new(self.shapes[i].clone(), *p)),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_slots())
            .filter(|(name, _)| matches!(*name, "weight" | "bias" | "gamma" | "beta"))
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }

    /// FLOPs of every layer in `range`, indexed from `range.start`.
    pub fn layer_flops(&self, range: Range<usize>) -> Vec<u64> {
        range
            .map(|i| self.layers[i].flops(self.shape_before(i)))
            .collect()
    }

    /// Run layers `range` for one timestep, carrying neuron state.
    pub fn forward_timestep(
        &self,
        states: &mut NetState,
        x: Activation,
        range: Range<usize>,
    ) -> Result<Activation, SnnError> {
        self.forward_observed(states, x, range, |_, _| {})
    }

    /// As [`forward_timestep`](Self::forward_timestep), calling
    /// `observe(layer_index, input)` before each layer runs.
    pub fn forward_observed(
        &self,
        states: &mut NetState,
        x: Activation,
        range: Range<usize>,
        mut observe: impl FnMut(usize, &Activation),
    ) -> Result<Activation, SnnError> {
        if range.start > range.end || range.end > self.layers.len() {
            return Err(SnnError::InvalidRange {
                start: range.start,
                end: range.end,
                layers: self.layers.len(),
            });
        }
        if states.lif.len() != self.layers.len() {
            return Err(SnnError::MissingState(states.lif.len()));
        }
        if range.is_empty() {
            return Ok(x);
        }
        let expected = self.shape_before(range.start);
        if x.shape() != expected {
            return Err(SnnError::ShapeMismatch {
                expected: expected.clone(),
                actual: x.shape().clone(),
            });
        }
        let mut saved: BTreeMap<usize, Activation> = BTreeMap::new();
        if range.start > 0 && self.saved[range.start - 1] {
            saved.insert(range.start - 1, x.clone());
        }
        let mut cur = x;
        for i in range {
            observe(i, &cur);
            let next = match &self.layers[i] {
                LayerSpec::Lif(_) => {
                    let state = states.lif[i].as_mut().ok_or(SnnError::MissingState(i))?;
                    let input = cur.into_dense();
                    Activation::Spike(lif_step(state, &input)?)
                }
                LayerSpec::ResidualAdd { from } => {
                    let skip = saved
                        .get(from)
                        .ok_or_else(|| {
                            SnnError::Topology(format!(
                                "layer {i}: residual source {from} not computed in this range"
                            ))
                        })?
                        .to_dense();
                    let mut d = cur.into_dense();
                    for (a, b) in d.data_mut().iter_mut().zip(skip.data()) {
                        *a += b;
                    }
                    Activation::Dense(d)
                }
                layer => layer_forward(layer, &cur, self.exec)?,
            };
            if self.saved[i] {
                saved.insert(i, next.clone());
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Edge half for one timestep; the result is the spike tensor at the split.
    pub fn forward_edge(
        &self,
        states: &mut NetState,
        x: &SpikeTensor,
        split: usize,
    ) -> Result<SpikeTensor, SnnError> {
        match self.forward_timestep(states, Activation::Spike(x.clone()), 0..split)? {
            Activation::Spike(s) => Ok(s),
            Activation::Dense(_) => Err(SnnError::Topology(format!(
                "boundary {split} does not carry spikes"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{apply_entries, seeded_init};
    use crate::snn::encoding::rate_encode_image;
    use crate::snn::layer::{BatchNorm, Conv2d, Linear};
    use crate::snn::lif::LifParams;
    use crate::snn::topology::builtin;
    use crate::tensor::shape;

    fn small_net() -> NetworkGraph {
        let layers = vec![
            LayerSpec::Conv2d(Conv2d::new(1, 2, 3, 1, 1, false)),
            LayerSpec::BatchNorm(BatchNorm::identity(2)),
            LayerSpec::Lif(LifParams::default()),
            LayerSpec::Flatten,
            LayerSpec::Linear(Linear::new(2 * 4 * 4, 3, true)),
        ];
        let mut splits = BTreeMap::new();
        splits.insert("SP1".to_string(), 3);
        let mut g = NetworkGraph::new("small", shape(&[1, 4, 4]), layers, splits, 3).unwrap();
        let entries = seeded_init(&g, 7);
        apply_entries(&mut g, &entries).unwrap();
        g
    }

    #[test]
    fn empty_range_is_identity() {
        let g = small_net();
        let mut st = g.new_state();
        let x = Activation::Spike(SpikeTensor::ones(shape(&[1, 4, 4])));
        assert_eq!(g.forward_timestep(&mut st, x.clone(), 2..2).unwrap(), x);
    }

    #[test]
    fn full_range_equals_manual_composition() {
        let g = small_net();
        let x = Activation::Spike(SpikeTensor::ones(shape(&[1, 4, 4])));
        let mut st = g.new_state();
        let full = g.forward_timestep(&mut st, x.clone(), 0..g.layers().len()).unwrap();

        let mut st2 = g.new_state();
        let mut cur = x;
        for i in 0..g.layers().len() {
            cur = g.forward_timestep(&mut st2, cur, i..i + 1).unwrap();
        }
        assert_eq!(full, cur);
        assert_eq!(st, st2);
    }

    #[test]
    fn split_runs_match_monolithic_on_builtins() {
        for name in ["resnet-mini", "vgg-mini"] {
            let mut g = builtin(name, 3).unwrap();
            let entries = seeded_init(&g, 1);
            apply_entries(&mut g, &entries).unwrap();
            let img = crate::harness::dataset::synthetic_image(g.input_shape(), 3, 0, 10);
            for (_, b) in g.split_points() {
                let mut mono = g.new_state();
                let mut edge = g.new_state();
                for t in 1..=2 {
                    let x = rate_encode_image(&img, t, 99).unwrap();
                    let full = g
                        .forward_timestep(&mut mono, Activation::Spike(x.clone()), 0..g.layers().len())
                        .unwrap();
                    let mid = g.forward_edge(&mut edge, &x, b).unwrap();
                    let tail = g
                        .forward_timestep(&mut edge, Activation::Spike(mid), b..g.layers().len())
                        .unwrap();
                    assert_eq!(full, tail, "{name} split {b} t={t}");
                }
            }
        }
    }

    #[test]
    fn reset_gives_fresh_engine_behaviour() {
        let g = small_net();
        let a = Activation::Spike(SpikeTensor::ones(shape(&[1, 4, 4])));
        let b = Activation::Spike(
            SpikeTensor::from_flags(shape(&[1, 4, 4]), &[1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1])
                .unwrap(),
        );
        let n = g.layers().len();
        let mut fresh = g.new_state();
        let expected = g.forward_timestep(&mut fresh, b.clone(), 0..n).unwrap();

        let mut st = g.new_state();
        g.forward_timestep(&mut st, a, 0..n).unwrap();
        reset_state(&mut st);
        assert_eq!(g.forward_timestep(&mut st, b, 0..n).unwrap(), expected);
    }

    #[test]
    fn invalid_range_and_shape() {
        let g = small_net();
        let mut st = g.new_state();
        let x = Activation::Spike(SpikeTensor::ones(shape(&[1, 4, 4])));
        assert!(matches!(
            g.forward_timestep(&mut st, x.clone(), 3..9),
            Err(SnnError::InvalidRange { .. })
        ));
        let bad = Activation::Spike(SpikeTensor::ones(shape(&[1, 5, 5])));
        assert!(matches!(
            g.forward_timestep(&mut st, bad, 0..2),
            Err(SnnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn split_validation() {
        let layers = vec![
            LayerSpec::Conv2d(Conv2d::new(1, 1, 1, 1, 0, false)),
            LayerSpec::Lif(LifParams::default()),
            LayerSpec::Conv2d(Conv2d::new(1, 1, 1, 1, 0, false)),
            LayerSpec::ResidualAdd { from: 0 },
            LayerSpec::Lif(LifParams::default()),
            LayerSpec::Flatten,
        ];
        let mut bad = BTreeMap::new();
        bad.insert("SPx".to_string(), 1);
        assert!(NetworkGraph::new("x", shape(&[1, 1, 1]), layers.clone(), bad, 1).is_err());
        let mut crossing = BTreeMap::new();
        crossing.insert("SPx".to_string(), 2);
        let err = NetworkGraph::new("x", shape(&[1, 1, 1]), layers.clone(), crossing, 1).unwrap_err();
        assert!(err.to_string().contains("residual"), "{err}");
        let mut ok = BTreeMap::new();
        ok.insert("SPx".to_string(), 5);
        NetworkGraph::new("x", shape(&[1, 1, 1]), layers, ok, 1).unwrap();
    }
}
