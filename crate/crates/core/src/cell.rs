//! The searchable normal cell: a small DAG whose edges carry either a
//! softmax-weighted mixture of all primitives or one chosen primitive.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::primitives::{rsp_wrap, PrimitiveKind, PrimitiveOp, RspMode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_KINDS: usize = PrimitiveKind::ALL.len();

/// How intermediate nodes combine into the cell output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputRule {
    #[default]
    Mean,
    Sum,
}

/// Node 0 is the cell input, nodes `1..=num_intermediate` are intermediate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub num_intermediate: usize,
    pub edges: Vec<(usize, usize)>,
    pub output: OutputRule,
}

impl Default for CellTopology {
    /// `0 -> 1`, `0 -> 2`, `1 -> 2`; output is the mean of nodes 1 and 2.
    fn default() -> Self {
        Self {
            num_intermediate: 2,
            edges: vec![(0, 1), (0, 2), (1, 2)],
            output: OutputRule::Mean,
        }
    }
}

impl CellTopology {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_intermediate == 0 {
            return Err(Error::invalid("a cell needs at least one intermediate node"));
        }
        for &(s, d) in &self.edges {
            if d <= s || d > self.num_intermediate {
                return Err(Error::invalid(format!(
                    "edge {s} -> {d} violates the DAG order for {} intermediate nodes",
                    self.num_intermediate
                )));
            }
        }
        for node in 1..=self.num_intermediate {
            if !self.edges.iter().any(|&(_, d)| d == node) {
                return Err(Error::invalid(format!("node {node} has no incoming edge")));
            }
        }
        Ok(())
    }
}

/// Continuous architecture parameters: one row of `NUM_KINDS` logits per
/// edge, shared by every cell of a supernet.
#[derive(Clone, Debug)]
pub struct ArchParams<T> {
    pub store: ParamStore<T>,
    pub alpha: ParamId,
    num_edges: usize,
}

impl<T: Scalar> ArchParams<T> {
    /// Zero logits plus gaussian noise of standard deviation `noise`.
    pub fn new(num_edges: usize, noise: f64, rng: &mut Rng) -> Result<Self> {
        let dist = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f64> = (0..num_edges * NUM_KINDS)
            .map(|_| dist.sample(rng) as f32 as f64)
            .collect();
        Self::from_values(num_edges, &data)
    }

    pub fn from_values(num_edges: usize, values: &[f64]) -> Result<Self> {
        let mut store = ParamStore::new();
        let alpha = store.add("alpha", Tensor::from_f64(&[num_edges, NUM_KINDS], values)?)?;
        Ok(Self {
            store,
            alpha,
            num_edges,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn values(&self) -> Vec<f64> {
        self.store.get(self.alpha).tensor.to_f64()
    }

    /// Row-wise softmax of the logits, computed in `f64`.
    pub fn softmax_rows(&self) -> Vec<Vec<f64>> {
        self.values().chunks(NUM_KINDS).map(softmax).collect()
    }

    pub fn var(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.store, self.alpha)
    }

    pub fn all_finite(&self) -> bool {
        self.store.get(self.alpha).tensor.all_finite()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest softmax weight; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let p = softmax(row);
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// The discrete cell: one primitive per edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub choices: Vec<(usize, PrimitiveKind)>,
    pub topology: CellTopology,
    pub channels: usize,
    pub rsp: bool,
}

impl Genotype {
    /// Every edge of the default topology set to `kind`.
    pub fn uniform(kind: PrimitiveKind, channels: usize, rsp: bool) -> Self {
        let topology = CellTopology::default();
        Self::from_kinds(&vec![kind; topology.num_edges()], topology, channels, rsp)
    }

    pub fn from_kinds(kinds: &[PrimitiveKind], topology: CellTopology, channels: usize, rsp: bool) -> Self {
        Self {
            choices: kinds.iter().copied().enumerate().collect(),
            topology,
            channels,
            rsp,
        }
    }

    pub fn kind(&self, edge: usize) -> Option<PrimitiveKind> {
        self.choices.iter().find(|(e, _)| *e == edge).map(|&(_, k)| k)
    }

    pub fn kinds(&self) -> Vec<PrimitiveKind> {
        (0..self.topology.num_edges()).filter_map(|e| self.kind(e)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let n = self.topology.num_edges();
        if self.choices.len() != n {
            return Err(Error::invalid(format!(
                "genotype has {} choices for {n} edges",
                self.choices.len()
            )));
        }
        for e in 0..n {
            if self.choices.iter().filter(|(i, _)| *i == e).count() != 1 {
                return Err(Error::invalid(format!("edge {e} needs exactly one primitive")));
            }
        }
        if self.channels == 0 || (self.rsp && !self.channels.is_multiple_of(2)) {
            return Err(Error::invalid(format!(
                "channel width {} invalid (partial wrapping needs an even width)",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn with_rsp(&self, rsp: bool) -> Self {
        Self { rsp, ..self.clone() }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self {
            channels,
            ..self.clone()
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "channels {}", self.channels)?;
        writeln!(f, "rsp {}", u8::from(self.rsp))?;
        writeln!(f, "nodes {}", self.topology.num_intermediate)?;
        for &(e, kind) in &self.choices {
            let (s, d) = self.topology.edges[e];
            writeln!(f, "edge {s} {d} {kind}")?;
        }
        Ok(())
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut channels = None;
        let mut rsp = None;
        let mut nodes = None;
        let mut edges = Vec::new();
        let mut kinds = Vec::new();
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
                ["channels", c] => channels = Some(num(c)?),
                ["rsp", "0"] => rsp = Some(false),
                ["rsp", "1"] => rsp = Some(true),
                ["nodes", n] => nodes = Some(num(n)?),
                ["edge", s, d, k] => {
                    edges.push((num(s)?, num(d)?));
                    kinds.push(
                        k.parse::<PrimitiveKind>()
                            .map_err(|e| Error::parse(ln, e.to_string()))?,
                    );
                }
                _ => return Err(Error::parse(ln, format!("unrecognised line '{line}'"))),
            }
        }
        let missing = |what: &str| Error::parse(0, format!("missing '{what}' header"));
        let topology = CellTopology {
            num_intermediate: nodes.ok_or_else(|| missing("nodes"))?,
            edges,
            output: OutputRule::Mean,
        };
        let g = Genotype::from_kinds(
            &kinds,
            topology,
            channels.ok_or_else(|| missing("channels"))?,
            rsp.ok_or_else(|| missing("rsp"))?,
        );
        g.validate()?;
        Ok(g)
    }
}

/// Per-edge argmax of the softmaxed logits (`values` is `edges x 5`,
/// row-major). Ties go to the earlier kind in canonical order.
pub fn discretize(values: &[f64], topology: &CellTopology, channels: usize, rsp: bool) -> Result<Genotype> {
    if values.len() != topology.num_edges() * NUM_KINDS {
        return Err(Error::shape(format!(
            "{} logits for {} edges",
            values.len(),
            topology.num_edges()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("architecture logits must be finite"));
    }
    let kinds: Vec<PrimitiveKind> = values
        .chunks(NUM_KINDS)
        .map(|row| PrimitiveKind::ALL[argmax(row)])
        .collect();
    Ok(Genotype::from_kinds(&kinds, topology.clone(), channels, rsp))
}

fn edge_apply<T: Scalar>(
    op: &PrimitiveOp,
    rsp: bool,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
) -> Result<Var> {
    if rsp {
        rsp_wrap(op, tape, store, x, RspMode::Concat)
    } else {
        op.apply(tape, store, x)
    }
}

/// `sum_o softmax(edge_alphas)_o * op_o(x)` over the five primitives, in
/// canonical order. `edge_alphas` holds raw logits of shape `[5]`.
pub fn mixed_op_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    edge_alphas: Var,
    ops: &[PrimitiveOp],
    rsp: bool,
) -> Result<Var> {
    let n = tape.value(edge_alphas).len();
    if n != NUM_KINDS || ops.len() != NUM_KINDS {
        return Err(Error::invalid(format!(
            "mixed op needs {NUM_KINDS} logits and {NUM_KINDS} ops, got {n} and {}",
            ops.len()
        )));
    }
    let flat = tape.reshape(edge_alphas, &[NUM_KINDS])?;
    let lambda = tape.softmax(flat, 0)?;
    let mut terms = Vec::with_capacity(NUM_KINDS);
    for (o, op) in ops.iter().enumerate() {
        let y = edge_apply(op, rsp, tape, store, x)?;
        terms.push(tape.scale_by(y, lambda, o)?);
    }
    tape.add_all(&terms)
}

/// How a cell's edges are resolved during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum CellArch<'a> {
    /// Softmax mixture driven by an `[edges, 5]` logit tensor on the tape.
    Mixed(Var),
    /// Only the genotype's primitive on each edge.
    Genotype(&'a Genotype),
    /// The single op each edge was built with.
    Fixed,
}

/// One cell instance with its own weights.
#[derive(Clone, Debug)]
pub struct Cell {
    pub topology: CellTopology,
    pub channels: usize,
    pub rsp: bool,
    edges: Vec<Vec<PrimitiveOp>>,
}

impl Cell {
    fn op_width(channels: usize, rsp: bool) -> Result<usize> {
        if rsp {
            if !channels.is_multiple_of(2) {
                return Err(Error::invalid(format!(
                    "partial wrapping needs an even channel count, got {channels}"
                )));
            }
            Ok(channels / 2)
        } else {
            Ok(channels)
        }
    }

    /// Supernet cell: every edge holds all five primitives.
    pub fn search<T: Scalar>(
        topology: CellTopology,
        channels: usize,
        rsp: bool,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        topology.validate()?;
        let width = Self::op_width(channels, rsp)?;
        let edges = (0..topology.num_edges())
            .map(|e| {
                PrimitiveKind::ALL
                    .iter()
                    .map(|&k| PrimitiveOp::new(k, width, false, &format!("{prefix}.edge{e}"), store, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            topology,
            channels,
            rsp,
            edges,
        })
    }

    /// Discrete cell holding only the genotype's primitives.
    pub fn from_genotype<T: Scalar>(
        genotype: &Genotype,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        genotype.validate()?;
        let width = Self::op_width(genotype.channels, genotype.rsp)?;
        let edges = genotype
            .kinds()
            .into_iter()
            .enumerate()
            .map(|(e, k)| {
                Ok(vec![PrimitiveOp::new(
                    k,
                    width,
                    false,
                    &format!("{prefix}.edge{e}"),
                    store,
                    rng,
                )?])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            topology: genotype.topology.clone(),
            channels: genotype.channels,
            rsp: genotype.rsp,
            edges,
        })
    }

    pub fn edge_ops(&self, edge: usize) -> &[PrimitiveOp] {
        &self.edges[edge]
    }

    pub fn param_count(&self) -> usize {
        self.edges.iter().flatten().map(PrimitiveOp::param_count).sum()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
        arch: CellArch<'_>,
    ) -> Result<Var> {
        let (_, c, _, _) = tape.value(input).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "cell of width {} got input {:?}",
                self.channels,
                tape.shape(input)
            )));
        }
        let mut nodes: Vec<Var> = vec![input];
        for node in 1..=self.topology.num_intermediate {
            let mut incoming = Vec::new();
            for (e, &(src, dst)) in self.topology.edges.iter().enumerate() {
                if dst != node {
                    continue;
                }
                let x = nodes[src];
                let y = match arch {
                    CellArch::Mixed(alpha) => {
                        let row = tape.slice(alpha, 0, e, 1)?;
                        mixed_op_forward(tape, store, x, row, &self.edges[e], self.rsp)?
                    }
                    CellArch::Genotype(g) => {
                        let kind = g
                            .kind(e)
                            .ok_or_else(|| Error::invalid(format!("genotype lacks edge {e}")))?;
                        let op = self.edges[e]
                            .iter()
                            .find(|op| op.kind == kind)
                            .ok_or_else(|| Error::invalid(format!("cell has no {kind} op on edge {e}")))?;
                        edge_apply(op, self.rsp, tape, store, x)?
                    }
                    CellArch::Fixed => {
                        let [op] = &self.edges[e][..] else {
                            return Err(Error::invalid(
                                "fixed forward needs exactly one op per edge; pass logits or a genotype",
                            ));
                        };
                        edge_apply(op, self.rsp, tape, store, x)?
                    }
                };
                incoming.push(y);
            }
            nodes.push(tape.add_all(&incoming)?);
        }
        let sum = tape.add_all(&nodes[1..])?;
        Ok(match self.topology.output {
            OutputRule::Sum => sum,
            OutputRule::Mean => tape.scale(sum, 1.0 / self.topology.num_intermediate as f64),
        })
    }
}

/// `n` sequential cells sharing one genotype, each with its own weights.
#[derive(Clone, Debug)]
pub struct CellStack {
    pub cells: Vec<Cell>,
}

/// Build `n` independent cells from the same genotype.
pub fn stack_cells<T: Scalar>(
    genotype: &Genotype,
    n: usize,
    prefix: &str,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<CellStack> {
    if n == 0 {
        return Err(Error::invalid("a cell stack needs at least one cell"));
    }
    let cells = (0..n)
        .map(|i| Cell::from_genotype(genotype, &format!("{prefix}.cell{i}"), store, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellStack { cells })
}

impl CellStack {
    pub fn param_count(&self) -> usize {
        self.cells.iter().map(Cell::param_count).sum()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.cells
            .iter()
            .try_fold(x, |h, cell| cell.forward(tape, store, h, CellArch::Fixed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn default_topology_is_valid() {
        CellTopology::default().validate().unwrap();
        let bad = CellTopology {
            num_intermediate: 2,
            edges: vec![(0, 1), (1, 1)],
            output: OutputRule::Mean,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uniform_logits_pick_conv3x3() {
        let g = discretize(&[0.0; 15], &CellTopology::default(), 8, false).unwrap();
        assert!(g.kinds().iter().all(|&k| k == PrimitiveKind::Conv3x3));
    }

    #[test]
    fn largest_logit_wins() {
        let mut v = vec![0.0; 15];
        v[4] = 9.0;
        let g = discretize(&v, &CellTopology::default(), 8, false).unwrap();
        assert_eq!(g.kind(0), Some(PrimitiveKind::Identity));
    }

    #[test]
    fn genotype_text_format() {
        let g = Genotype::from_kinds(
            &[
                PrimitiveKind::Conv3x3,
                PrimitiveKind::Identity,
                PrimitiveKind::DilatedConv3x3,
            ],
            CellTopology::default(),
            16,
            true,
        );
        let text = g.to_string();
        assert_eq!(
            text,
            "channels 16\nrsp 1\nnodes 2\nedge 0 1 conv3x3\nedge 0 2 identity\nedge 1 2 dilated3x3\n"
        );
        assert_eq!(text.parse::<Genotype>().unwrap(), g);
    }

    #[test]
    fn malformed_genotype_rejected() {
        assert!("channels 4\nrsp 0\nnodes 2\nedge 0 1 conv9x9\n"
            .parse::<Genotype>()
            .is_err());
        assert!("channels 4\nrsp 0\nnodes 2\nedge 0 1 conv3x3\n"
            .parse::<Genotype>()
            .is_err());
        assert!("channels  4\n".parse::<Genotype>().is_err());
    }

    #[test]
    fn fixed_forward_requires_single_ops() {
        let mut rng = seeded(0);
        let mut store = ParamStore::<f32>::new();
        let cell = Cell::search(CellTopology::default(), 4, false, "c", &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]).unwrap());
        assert!(cell.forward(&mut tape, &store, x, CellArch::Fixed).is_err());
    }
}
