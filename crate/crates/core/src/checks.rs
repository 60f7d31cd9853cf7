//! Catalogue of gradient-check cases covering every differentiable
//! building block, shared by the self-test command and the test suites.
//!
//! Each case draws its parameters from a seed in `f32` so that the
//! autodiff pass and the `f64` finite-difference reference see identical
//! values.

use rand::Rng as _;

use crate::attention::{fuse_selected, normalize_inputs, path_scores_var, AttentionMode};
use crate::autodiff::{Tape, Var};
use crate::cell::{mixed_op_forward, Cell, CellArch, CellTopology, NUM_KINDS};
use crate::error::Result;
use crate::gradcheck::{grad_check_entries, GradCheck, ScalarFn};
use crate::model::{NetShape, Network};
use crate::params::ParamStore;
use crate::primitives::{rsp_wrap, PrimitiveKind, PrimitiveOp, RspMode};
use crate::rng::{derived, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the checked tensor stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Input,
    Weight,
}

fn random_f32<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(Tensor::<f32>::uniform(shape, -1.0, 1.0, rng)?.cast())
}

/// Random entries with `0.1 <= |x| <= 1`, keeping check points away from
/// the ReLU kink at zero.
pub fn random_point<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let mut t = Tensor::<f32>::uniform(shape, -0.9, 0.9, rng)?;
    for v in t.data_mut() {
        *v += 0.1f32.copysign(*v);
    }
    Ok(t.cast())
}

/// `sum(out * R)` for a fixed random `R`; a generic scalar read-out that
/// exercises every output entry.
fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random_f32(&shape, rng)?);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// One primitive (optionally partial-wrapped) under a random projection.
#[derive(Clone, Debug)]
pub struct PrimitiveCase {
    pub kind: PrimitiveKind,
    pub shape: [usize; 4],
    pub rsp: Option<RspMode>,
    pub target: Target,
    pub seed: u64,
}

impl PrimitiveCase {
    fn op_width(&self) -> usize {
        if self.rsp.is_some() {
            self.shape[1] / 2
        } else {
            self.shape[1]
        }
    }

    /// The point at which the check runs.
    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut rng = derived(self.seed, 1);
        match self.target {
            Target::Input => random_point(&self.shape, &mut rng),
            Target::Weight => {
                let mut store = ParamStore::<T>::new();
                let op = PrimitiveOp::new(self.kind, self.op_width(), false, "p", &mut store, &mut rng)?;
                let id = op.param_ids().next().expect("target kind has weights");
                Ok(store.get(id).tensor.clone())
            }
        }
    }
}

impl ScalarFn for PrimitiveCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut rng = derived(self.seed, 0);
        let mut store = ParamStore::<T>::new();
        let op = PrimitiveOp::new(self.kind, self.op_width(), false, "p", &mut store, &mut rng)?;
        let input = match self.target {
            Target::Input => x,
            Target::Weight => {
                let id = op.param_ids().next().expect("target kind has weights");
                tape.bind_param(&store, id, x)?;
                let t = random_point(&self.shape, &mut rng)?;
                tape.constant(t)
            }
        };
        let out = match self.rsp {
            Some(mode) => rsp_wrap(&op, tape, &store, input, mode)?,
            None => op.apply(tape, &store, input)?,
        };
        project(tape, out, &mut rng)
    }
}

/// Run a case over all entries (or an evenly strided subset of at most
/// `max_entries`).
pub fn run_case<T: Scalar, F: ScalarFn>(f: &F, x: &Tensor<T>, step: f64, max_entries: usize) -> Result<GradCheck> {
    let n = x.len();
    let stride = n.div_ceil(max_entries.max(1)).max(1);
    let entries: Vec<usize> = (0..n).step_by(stride).collect();
    grad_check_entries(f, x, step, &entries)
}

/// Which tensor a composite case differentiates with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompositeTarget {
    Input,
    /// Architecture logits.
    Alpha,
    /// A convolution weight (the first projection or the first stem conv).
    Weight,
}

fn random_logits<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    Ok(Tensor::<f32>::randn(shape, 1.0, rng)?.cast())
}

/// Softmax-weighted mixture of the five primitives on one edge.
#[derive(Clone, Debug)]
pub struct MixedCase {
    pub shape: [usize; 4],
    pub rsp: bool,
    pub target: CompositeTarget,
    pub seed: u64,
}

impl MixedCase {
    fn width(&self) -> usize {
        if self.rsp {
            self.shape[1] / 2
        } else {
            self.shape[1]
        }
    }

    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut rng = derived(self.seed, 1);
        match self.target {
            CompositeTarget::Alpha => random_logits(&[NUM_KINDS], &mut rng),
            _ => random_point(&self.shape, &mut rng),
        }
    }
}

impl ScalarFn for MixedCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut rng = derived(self.seed, 0);
        let mut store = ParamStore::<T>::new();
        let ops = PrimitiveKind::ALL
            .iter()
            .map(|&k| PrimitiveOp::new(k, self.width(), false, "m", &mut store, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (input, alpha) = match self.target {
            CompositeTarget::Alpha => (tape.constant(random_point(&self.shape, &mut rng)?), x),
            _ => {
                let a = random_logits(&[NUM_KINDS], &mut rng)?;
                (x, tape.constant(a))
            }
        };
        let out = mixed_op_forward(tape, &store, input, alpha, &ops, self.rsp)?;
        project(tape, out, &mut rng)
    }
}

/// A full searchable cell in mixed mode.
#[derive(Clone, Debug)]
pub struct CellCase {
    pub shape: [usize; 4],
    pub rsp: bool,
    pub target: CompositeTarget,
    pub seed: u64,
}

impl CellCase {
    fn alpha_shape(&self) -> [usize; 2] {
        [CellTopology::default().num_edges(), NUM_KINDS]
    }

    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut rng = derived(self.seed, 1);
        match self.target {
            CompositeTarget::Alpha => random_logits(&self.alpha_shape(), &mut rng),
            _ => random_point(&self.shape, &mut rng),
        }
    }
}

impl ScalarFn for CellCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut rng = derived(self.seed, 0);
        let mut store = ParamStore::<T>::new();
        let cell = Cell::search(
            CellTopology::default(),
            self.shape[1],
            self.rsp,
            "c",
            &mut store,
            &mut rng,
        )?;
        let (input, alpha) = match self.target {
            CompositeTarget::Alpha => (tape.constant(random_point(&self.shape, &mut rng)?), x),
            _ => {
                let a = random_logits(&self.alpha_shape(), &mut rng)?;
                (x, tape.constant(a))
            }
        };
        let out = cell.forward(tape, &store, input, CellArch::Mixed(alpha))?;
        project(tape, out, &mut rng)
    }
}

/// Path attention over three candidates of mixed width and resolution:
/// projection, resize, path scores and fusion of every path.
#[derive(Clone, Debug)]
pub struct PamCase {
    pub mode: AttentionMode,
    pub target: CompositeTarget,
    pub seed: u64,
}

impl PamCase {
    pub const CHANNELS: usize = 4;
    const SOURCES: [[usize; 4]; 3] = [[2, 4, 8, 8], [2, 6, 4, 4], [2, 4, 8, 8]];

    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut rng = derived(self.seed, 1);
        match self.target {
            CompositeTarget::Weight => random_f32(&[Self::CHANNELS, Self::SOURCES[0][1], 1, 1], &mut rng),
            _ => random_point(&Self::SOURCES[0], &mut rng),
        }
    }
}

impl ScalarFn for PamCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut rng = derived(self.seed, 0);
        let mut store = ParamStore::<T>::new();
        let mut feats = Vec::new();
        let mut projs = Vec::new();
        for (i, s) in Self::SOURCES.iter().enumerate() {
            projs.push(store.add(format!("proj{i}"), random_f32(&[Self::CHANNELS, s[1], 1, 1], &mut rng)?)?);
            let f = random_point(s, &mut rng)?;
            feats.push(if i == 0 && self.target == CompositeTarget::Input {
                x
            } else {
                tape.constant(f)
            });
        }
        if self.target == CompositeTarget::Weight {
            tape.bind_param(&store, projs[0], x)?;
        }
        let norm = normalize_inputs(tape, &store, &feats, &projs, (Self::CHANNELS, 8, 8))?;
        let scores = path_scores_var(tape, &norm, self.mode)?;
        let all: Vec<usize> = (0..norm.len()).collect();
        let fused = fuse_selected(tape, &norm, &all)?;
        let a = project(tape, scores, &mut rng)?;
        let b = project(tape, fused, &mut rng)?;
        tape.add(a, b)
    }
}

/// Cross-entropy loss of the complete stage-one supernet.
#[derive(Clone, Debug)]
pub struct SupernetCase {
    pub target: CompositeTarget,
    pub seed: u64,
}

impl SupernetCase {
    pub const SHAPE: NetShape = NetShape {
        in_channels: 1,
        channels: 4,
        layers: 2,
        num_classes: 3,
    };
    const INPUT: [usize; 4] = [2, 1, 16, 16];

    fn network<T: Scalar>(&self) -> Result<Network<T>> {
        Network::cell_supernet(Self::SHAPE, true, 0.5, &mut derived(self.seed, 0))
    }

    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        let net = self.network::<T>()?;
        match self.target {
            CompositeTarget::Alpha => {
                let a = net.arch.as_ref().expect("supernet has logits");
                Ok(a.store.get(a.alpha).tensor.clone())
            }
            CompositeTarget::Weight => {
                let id = net.store.find("stem.0.weight").expect("stem weight");
                Ok(net.store.get(id).tensor.clone())
            }
            CompositeTarget::Input => random_point(&Self::INPUT, &mut derived(self.seed, 1)),
        }
    }
}

impl ScalarFn for SupernetCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let net = self.network::<T>()?;
        let mut rng = derived(self.seed, 2);
        let images = random_point::<T>(&Self::INPUT, &mut rng)?;
        let labels: Vec<u8> = (0..Self::INPUT[0] * Self::INPUT[2] * Self::INPUT[3])
            .map(|_| rng.random_range(0..Self::SHAPE.num_classes as u8))
            .collect();
        let input = match self.target {
            CompositeTarget::Input => x,
            CompositeTarget::Alpha => {
                let a = net.arch.as_ref().expect("supernet has logits");
                tape.bind_param(&a.store, a.alpha, x)?;
                tape.constant(images)
            }
            CompositeTarget::Weight => {
                let id = net.store.find("stem.0.weight").expect("stem weight");
                tape.bind_param(&net.store, id, x)?;
                tape.constant(images)
            }
        };
        let fwd = net.forward(tape, input)?;
        tape.cross_entropy(fwd.logits, &labels)
    }
}

/// Any case of the catalogue.
#[derive(Clone, Debug)]
pub enum CheckCase {
    Primitive(PrimitiveCase),
    Mixed(MixedCase),
    Cell(CellCase),
    Pam(PamCase),
    Supernet(SupernetCase),
}

impl CheckCase {
    pub fn point<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            CheckCase::Primitive(c) => c.point(),
            CheckCase::Mixed(c) => c.point(),
            CheckCase::Cell(c) => c.point(),
            CheckCase::Pam(c) => c.point(),
            CheckCase::Supernet(c) => c.point(),
        }
    }

    /// Short label without the seed, e.g. `primitive/conv3x3/rsp/weight`.
    pub fn label(&self) -> String {
        let rsp = |on: bool| if on { "rsp" } else { "plain" };
        match self {
            CheckCase::Primitive(c) => format!(
                "primitive/{}/{}/{:?}",
                c.kind,
                match c.rsp {
                    None => "plain",
                    Some(RspMode::Concat) => "rsp",
                    Some(RspMode::Additive) => "rsp-additive",
                },
                c.target
            ),
            CheckCase::Mixed(c) => format!("mixed/{}/{:?}", rsp(c.rsp), c.target),
            CheckCase::Cell(c) => format!("cell/{}/{:?}", rsp(c.rsp), c.target),
            CheckCase::Pam(c) => format!("pam/{}/{:?}", c.mode, c.target),
            CheckCase::Supernet(c) => format!("supernet/{:?}", c.target),
        }
        .to_lowercase()
    }
}

impl ScalarFn for CheckCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            CheckCase::Primitive(c) => c.eval(tape, x),
            CheckCase::Mixed(c) => c.eval(tape, x),
            CheckCase::Cell(c) => c.eval(tape, x),
            CheckCase::Pam(c) => c.eval(tape, x),
            CheckCase::Supernet(c) => c.eval(tape, x),
        }
    }
}

/// Every case for one seed: each primitive with and without partial
/// wrapping (input and weight targets), the mixed op, the cell, both
/// attention modes and the supernet loss.
pub fn catalogue(seed: u64) -> Vec<CheckCase> {
    let shape = [2, 8, 16, 16];
    let small = [2, 4, 8, 8];
    let mut out = Vec::new();
    for kind in PrimitiveKind::ALL {
        for rsp in [None, Some(RspMode::Concat)] {
            let targets: &[Target] = if kind.conv(1).is_some() {
                &[Target::Input, Target::Weight]
            } else {
                &[Target::Input]
            };
            for &target in targets {
                out.push(CheckCase::Primitive(PrimitiveCase {
                    kind,
                    shape,
                    rsp,
                    target,
                    seed,
                }));
            }
        }
    }
    for rsp in [false, true] {
        for target in [CompositeTarget::Input, CompositeTarget::Alpha] {
            out.push(CheckCase::Mixed(MixedCase {
                shape: small,
                rsp,
                target,
                seed,
            }));
            out.push(CheckCase::Cell(CellCase {
                shape: small,
                rsp,
                target,
                seed,
            }));
        }
    }
    for mode in [AttentionMode::Literal, AttentionMode::PathNormalized] {
        for target in [CompositeTarget::Input, CompositeTarget::Weight] {
            out.push(CheckCase::Pam(PamCase { mode, target, seed }));
        }
    }
    for target in [CompositeTarget::Alpha, CompositeTarget::Weight, CompositeTarget::Input] {
        out.push(CheckCase::Supernet(SupernetCase { target, seed }));
    }
    out
}
