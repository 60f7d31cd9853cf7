//! Path attention: project candidate inputs to a common shape, score each
//! path by channel attention, keep the top-k and fuse them by summation.
//!
//! Scores are computed on batch-averaged maps. Channel inner products are
//! divided by `H * W` before exponentiation.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Which index the channel-attention softmax normalises over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Normalise over channels `c` for each path pair, exactly as the
    /// printed attention formula. Every path then scores `N`.
    Literal,
    /// Normalise over the source path `i` for each target path `j` and
    /// channel `c`, so paths compete for each target.
    #[default]
    PathNormalized,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Literal => "literal",
            AttentionMode::PathNormalized => "pathnorm",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AttentionMode::Literal),
            "pathnorm" => Ok(AttentionMode::PathNormalized),
            _ => Err(Error::invalid(format!(
                "unknown attention mode '{s}' (expected literal or pathnorm)"
            ))),
        }
    }
}

/// Score per candidate path plus the chosen indices, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct PathScores {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Project each feature with its 1x1 convolution to `channels`, then resize
/// bilinearly to `height x width`.
pub fn normalize_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    features: &[Var],
    projections: &[ParamId],
    target: (usize, usize, usize),
) -> Result<Vec<Var>> {
    if features.is_empty() {
        return Err(Error::invalid("path attention needs at least one candidate"));
    }
    if projections.len() != features.len() {
        return Err(Error::invalid(format!(
            "{} projections for {} candidates",
            projections.len(),
            features.len()
        )));
    }
    let (c, h, w) = target;
    features
        .iter()
        .zip(projections)
        .map(|(&f, &p)| {
            let wv = tape.param(store, p);
            if tape.shape(wv)[0] != c {
                return Err(Error::shape(format!(
                    "projection {:?} does not map to {c} channels",
                    tape.shape(wv)
                )));
            }
            let y = tape.conv2d(f, wv, None, ConvSpec::default())?;
            tape.interpolate_bilinear(y, h, w)
        })
        .collect()
}

/// Batch-averaged `(1, C, H, W)` view of a feature map.
fn batch_mean<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    tape.mean_axis(f, 0)
}

/// Literal channel attention between two maps: softmax over channels of the
/// per-channel inner products. Shape `[C]`.
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, fi: Var, fj: Var) -> Result<Var> {
    if tape.shape(fi) != tape.shape(fj) {
        return Err(Error::shape(format!(
            "channel attention needs equal shapes, got {:?} and {:?}",
            tape.shape(fi),
            tape.shape(fj)
        )));
    }
    let a = batch_mean(tape, fi)?;
    let b = batch_mean(tape, fj)?;
    let d = tape.channel_dot(a, b)?;
    tape.softmax(d, 0)
}

/// `D[i, j, c]`: scaled channel inner products of every ordered pair of
/// batch-averaged candidates, shape `[N, N, C]`.
pub fn inner_products<T: Scalar>(tape: &mut Tape<T>, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::invalid("path attention needs at least one candidate"));
    }
    let shape = tape.shape(features[0]).to_vec();
    if let Some(&bad) = features.iter().find(|&&f| tape.shape(f) != shape.as_slice()) {
        return Err(Error::shape(format!(
            "candidates must share a shape: {:?} vs {shape:?}",
            tape.shape(bad)
        )));
    }
    let c = tape.value(features[0]).dims4()?.1;
    let means = features
        .iter()
        .map(|&f| batch_mean(tape, f))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(means.len());
    for &a in &means {
        let mut row = Vec::with_capacity(means.len());
        for &b in &means {
            let d = tape.channel_dot(a, b)?;
            row.push(tape.reshape(d, &[1, 1, c])?);
        }
        rows.push(tape.concat(&row, 1)?);
    }
    tape.concat(&rows, 0)
}

/// Differentiable path scores `S_i = sum_j sum_c S^c_{i,j}`, shape `[N]`.
pub fn path_scores_var<T: Scalar>(tape: &mut Tape<T>, features: &[Var], mode: AttentionMode) -> Result<Var> {
    let n = features.len();
    let d = inner_products(tape, features)?;
    let axis = match mode {
        AttentionMode::Literal => 2,
        AttentionMode::PathNormalized => 0,
    };
    let s = tape.softmax(d, axis)?;
    let s = tape.sum_axis(s, 2)?;
    let s = tape.sum_axis(s, 1)?;
    tape.reshape(s, &[n])
}

/// Score the candidates and pick the best `k` (ties to the lower index).
pub fn path_scores<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Var],
    mode: AttentionMode,
    k: usize,
) -> Result<(Var, PathScores)> {
    let v = path_scores_var(tape, features, mode)?;
    let scores = tape.value(v).to_f64();
    let selected = select_top_k(&scores, k)?;
    Ok((v, PathScores { scores, selected }))
}

/// Scores closer than this (relative) count as tied.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Indices of the `k` largest scores in descending order. Scores within
/// [`TIE_TOLERANCE`] of the current best are treated as equal and the
/// lowest index among them wins.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("cannot select {k} of {} paths", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("path scores contain NaN"));
    }
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let best = remaining.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOLERANCE * best.abs().max(1.0);
        let pos = remaining
            .iter()
            .position(|&i| scores[i] >= best - tol)
            .expect("maximum exists");
        out.push(remaining.remove(pos));
    }
    Ok(out)
}

/// Element-wise sum of the selected candidates, in selection order.
pub fn fuse_selected<T: Scalar>(tape: &mut Tape<T>, features: &[Var], indices: &[usize]) -> Result<Var> {
    let picked = indices
        .iter()
        .map(|&i| {
            features
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("path index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&picked)
}

/// Frozen input paths for every layer of the macro structure. Layer `l`
/// (zero-based) chooses among outputs `0..=l`, where output 0 is the stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroGenotype {
    pub k: usize,
    pub mode: AttentionMode,
    pub layers: Vec<Vec<usize>>,
}

impl MacroGenotype {
    /// Selection that tie-breaking alone would produce.
    pub fn leading(num_layers: usize, k: usize, mode: AttentionMode) -> Self {
        Self {
            k,
            mode,
            layers: (0..num_layers).map(|l| (0..k.min(l + 1)).collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        for (l, inputs) in self.layers.iter().enumerate() {
            if inputs.is_empty() || inputs.len() > self.k {
                return Err(Error::invalid(format!(
                    "layer {l} selects {} inputs with k = {}",
                    inputs.len(),
                    self.k
                )));
            }
            if let Some(&bad) = inputs.iter().find(|&&i| i > l) {
                return Err(Error::invalid(format!(
                    "layer {l} cannot read output {bad} (only 0..={l} exist)"
                )));
            }
            let mut seen = inputs.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != inputs.len() {
                return Err(Error::invalid(format!("layer {l} repeats an input")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for MacroGenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "k {}", self.k)?;
        writeln!(f, "mode {}", self.mode)?;
        for (l, inputs) in self.layers.iter().enumerate() {
            let list: Vec<String> = inputs.iter().map(|i| i.to_string()).collect();
            writeln!(f, "layer {l} inputs {}", list.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for MacroGenotype {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut k = None;
        let mut mode = None;
        let mut layers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split(' ').collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(ln, format!("expected an integer, got '{s}'")))
            };
            match tok[..] {
                ["k", v] => k = Some(num(v)?),
                ["mode", m] => mode = Some(m.parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?),
                ["layer", idx, "inputs", list] => {
                    if num(idx)? != layers.len() {
                        return Err(Error::parse(ln, "layers must be listed in order from 0"));
                    }
                    layers.push(list.split(',').map(num).collect::<Result<Vec<_>>>()?);
                }
                _ => return Err(Error::parse(ln, format!("unrecognised line '{line}'"))),
            }
        }
        let g = MacroGenotype {
            k: k.ok_or_else(|| Error::parse(0, "missing 'k' header"))?,
            mode: mode.ok_or_else(|| Error::parse(0, "missing 'mode' header"))?,
            layers,
        };
        g.validate()?;
        Ok(g)
    }
}
