//! The five shape-preserving candidate operations of the cell search space
//! and the half-channel partial wrapper.
//!
//! Every convolutional primitive is `relu -> conv -> channel_norm`; the
//! identity is a plain pass-through.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Candidate operation on a cell edge, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Conv3x3,
    Conv5x5,
    DilatedConv3x3,
    DepthwiseConv3x3,
    Identity,
}

impl PrimitiveKind {
    /// Canonical order; also the argmax tie-break order.
    pub const ALL: [PrimitiveKind; 5] = [
        PrimitiveKind::Conv3x3,
        PrimitiveKind::Conv5x5,
        PrimitiveKind::DilatedConv3x3,
        PrimitiveKind::DepthwiseConv3x3,
        PrimitiveKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Conv3x3 => "conv3x3",
            PrimitiveKind::Conv5x5 => "conv5x5",
            PrimitiveKind::DilatedConv3x3 => "dilated3x3",
            PrimitiveKind::DepthwiseConv3x3 => "depthwise3x3",
            PrimitiveKind::Identity => "identity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Kernel size and convolution geometry at the given width, `None` for
    /// the identity.
    pub fn conv(self, channels: usize) -> Option<(usize, ConvSpec)> {
        match self {
            PrimitiveKind::Conv3x3 => Some((3, ConvSpec::new(1, 1, 1, 1))),
            PrimitiveKind::Conv5x5 => Some((5, ConvSpec::new(1, 2, 1, 1))),
            PrimitiveKind::DilatedConv3x3 => Some((3, ConvSpec::new(1, 2, 2, 1))),
            PrimitiveKind::DepthwiseConv3x3 => Some((3, ConvSpec::new(1, 1, 1, channels))),
            PrimitiveKind::Identity => None,
        }
    }

    /// True when the parameter count grows with the square of the width.
    pub fn is_quadratic(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Conv3x3 | PrimitiveKind::Conv5x5 | PrimitiveKind::DilatedConv3x3
        )
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown primitive '{s}'")))
    }
}

/// Learnable scalars of one primitive at width `channels`.
pub fn param_count(kind: PrimitiveKind, channels: usize, with_bias: bool) -> usize {
    let bias = if with_bias { channels } else { 0 };
    match kind {
        PrimitiveKind::Identity => 0,
        PrimitiveKind::Conv3x3 | PrimitiveKind::DilatedConv3x3 => 9 * channels * channels + bias,
        PrimitiveKind::Conv5x5 => 25 * channels * channels + bias,
        PrimitiveKind::DepthwiseConv3x3 => 9 * channels + bias,
    }
}

/// Kaiming-normal weights drawn in `f32` so every precision sees the same
/// values for a given seed.
pub(crate) fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    Ok(Tensor::<f32>::randn(shape, std, rng)?.cast())
}

/// One primitive bound to its weights.
#[derive(Clone, Debug)]
pub struct PrimitiveOp {
    pub kind: PrimitiveKind,
    pub channels: usize,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
}

impl PrimitiveOp {
    /// Create the op and register its weights under `prefix`.
    pub fn new<T: Scalar>(
        kind: PrimitiveKind,
        channels: usize,
        with_bias: bool,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("primitive width must be >= 1"));
        }
        let (weight, bias) = match kind.conv(channels) {
            None => (None, None),
            Some((k, spec)) => {
                let cin_g = channels / spec.groups;
                let w = kaiming::<T>(&[channels, cin_g, k, k], cin_g * k * k, rng)?;
                let wid = store.add(format!("{prefix}.{kind}.weight"), w)?;
                let bid = if with_bias {
                    Some(store.add(format!("{prefix}.{kind}.bias"), Tensor::zeros(&[channels])?)?)
                } else {
                    None
                };
                (Some(wid), bid)
            }
        };
        Ok(Self {
            kind,
            channels,
            weight,
            bias,
        })
    }

    /// Weight handles in registration order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weight.iter().chain(self.bias.iter()).copied()
    }

    pub fn param_count(&self) -> usize {
        param_count(self.kind, self.channels, self.bias.is_some())
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "{} configured for {} channels applied to input {:?}",
                self.kind,
                self.channels,
                tape.shape(x)
            )));
        }
        let Some((_, spec)) = self.kind.conv(self.channels) else {
            return Ok(x);
        };
        let w = tape.param(store, self.weight.expect("conv primitive has a weight"));
        let b = self.bias.map(|b| tape.param(store, b));
        let a = tape.relu(x);
        let y = tape.conv2d(a, w, b, spec)?;
        tape.channel_norm(y)
    }
}

/// How the transformed half is merged back with the bypassed half.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RspMode {
    /// `[op(x1) | x2]`
    #[default]
    Concat,
    /// `[op(x1) | op(x1) + x2]`: the second half is the literal
    /// `f(x/2) + x/2` skip form.
    Additive,
}

/// Apply `op` to the first half of the channels and merge with the second
/// half, which is never transformed. `op` must be configured for `C / 2`.
pub fn rsp_wrap<T: Scalar>(
    op: &PrimitiveOp,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    mode: RspMode,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    if c % 2 != 0 {
        return Err(Error::invalid(format!(
            "partial wrapping needs an even channel count, got {c}; choose an even width"
        )));
    }
    let half = c / 2;
    let parts = tape.split(x, 1, &[half, half])?;
    let y = op.apply(tape, store, parts[0])?;
    match mode {
        RspMode::Concat => tape.concat(&[y, parts[1]], 1),
        RspMode::Additive => {
            let s = tape.add(y, parts[1])?;
            tape.concat(&[y, s], 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn names_roundtrip() {
        for k in PrimitiveKind::ALL {
            assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
            assert_eq!(PrimitiveKind::from_index(k.index()), Some(k));
        }
        assert!("conv7x7".parse::<PrimitiveKind>().is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(param_count(PrimitiveKind::Identity, 64, true), 0);
        assert_eq!(param_count(PrimitiveKind::Conv3x3, 4, false), 144);
        assert_eq!(param_count(PrimitiveKind::Conv5x5, 4, true), 404);
        assert_eq!(param_count(PrimitiveKind::DepthwiseConv3x3, 8, false), 72);
        assert_eq!(param_count(PrimitiveKind::DilatedConv3x3, 8, false), 576);
    }

    #[test]
    fn counts_match_registered_buffers() {
        let mut rng = seeded(1);
        for k in PrimitiveKind::ALL {
            for bias in [false, true] {
                let mut store = ParamStore::<f32>::new();
                let op = PrimitiveOp::new(k, 6, bias, "e", &mut store, &mut rng).unwrap();
                assert_eq!(store.count(), op.param_count());
            }
        }
    }

    #[test]
    fn every_kind_preserves_shape() {
        let mut rng = seeded(3);
        for k in PrimitiveKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let op = PrimitiveOp::new(k, 4, false, "e", &mut store, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng).unwrap());
            let y = op.apply(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), &[1, 4, 8, 8], "{k}");
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = seeded(3);
        let mut store = ParamStore::<f32>::new();
        let op = PrimitiveOp::new(PrimitiveKind::Conv3x3, 4, false, "e", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]).unwrap());
        assert!(op.apply(&mut tape, &store, x).is_err());
    }

    #[test]
    fn odd_width_rejected_by_wrapper() {
        let mut rng = seeded(3);
        let mut store = ParamStore::<f32>::new();
        let op = PrimitiveOp::new(PrimitiveKind::Identity, 1, false, "e", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let err = rsp_wrap(&op, &mut tape, &store, x, RspMode::Concat).unwrap_err();
        assert!(err.to_string().contains("even"));
    }
}
