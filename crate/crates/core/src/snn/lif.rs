//! Leaky integrate-and-fire neurons.
//!
//! Per neuron and timestep:
//!
//! ```text
//! h = v + (x - (v - v_reset)) / tau
//! s = 1 if h >= v_th else 0
//! v = v_reset if s == 1 else h
//! ```

use crate::tensor::{DenseTensor, Shape, SpikeTensor};

use super::SnnError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f32,
    pub v_th: f32,
    pub v_reset: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifParams {
    pub fn new(tau: f32, v_th: f32, v_reset: f32) -> Result<Self, SnnError> {
        let p = Self { tau, v_th, v_reset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SnnError> {
        if !(self.tau.is_finite() && self.tau >= 1.0) {
            return Err(SnnError::InvalidParams(format!(
                "tau must be >= 1, got {}",
                self.tau
            )));
        }
        if !(self.v_th.is_finite() && self.v_reset.is_finite() && self.v_th > self.v_reset) {
            return Err(SnnError::InvalidParams(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Membrane potentials of one LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    v: DenseTensor,
    params: LifParams,
}

impl LifState {
    pub fn new(shape: Shape, params: LifParams) -> Self {
        Self {
            v: DenseTensor::filled(shape, params.v_reset),
            params,
        }
    }

    /// State with explicit potentials, mostly for tests.
    pub fn with_potentials(v: DenseTensor, params: LifParams) -> Self {
        Self { v, params }
    }

    pub fn potentials(&self) -> &DenseTensor {
        &self.v
    }

    pub fn params(&self) -> LifParams {
        self.params
    }

    pub fn reset(&mut self) {
        let r = self.params.v_reset;
        self.v.data_mut().iter_mut().for_each(|v| *v = r);
    }
}

/// Advance one timestep, returning the emitted spikes.
pub fn lif_step(state: &mut LifState, x: &DenseTensor) -> Result<SpikeTensor, SnnError> {
    if x.shape() != state.v.shape() {
        return Err(SnnError::ShapeMismatch {
            expected: state.v.shape().clone(),
            actual: x.shape().clone(),
        });
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(SnnError::NonFinite(i));
    }
    let LifParams { tau, v_th, v_reset } = state.params;
    let n = x.data().len();
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, (v, &xi)) in state.v.data_mut().iter_mut().zip(x.data()).enumerate() {
        let h = *v + (xi - (*v - v_reset)) / tau;
        if h >= v_th {
            bits[i / 8] |= 0x80 >> (i % 8);
            *v = v_reset;
        } else {
            *v = h;
        }
    }
    Ok(SpikeTensor::from_packed(x.shape().clone(), bits)?)
}
