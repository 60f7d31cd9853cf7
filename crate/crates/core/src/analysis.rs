//! Numerical analyses: gradient flow through deep chains of 1x1
//! convolutions and weight counting of plain versus partial-wrapped models.

use std::fmt;
use std::str::FromStr;

use crate::attention::MacroGenotype;
use crate::autodiff::{ConvSpec, Tape};
use crate::cell::Genotype;
use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::primitives::PrimitiveKind;
use crate::rng::{derived, seeded};
use crate::tensor::Tensor;
use crate::train::net_shape;

/// Skip pattern of a gradient-flow chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowArch {
    /// `x' = f(x)`
    Plain,
    /// `x' = f(x) + x`
    Residual,
    /// `x' = [f(x1) | f(x1) + x2]` with `x = [x1 | x2]`.
    Csp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl FromStr for FlowArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(FlowArch::Plain),
            "residual" => Ok(FlowArch::Residual),
            "csp" => Ok(FlowArch::Csp),
            _ => Err(Error::invalid(format!(
                "unknown architecture '{s}' (plain, residual, csp)"
            ))),
        }
    }
}

impl fmt::Display for FlowArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowArch::Plain => "plain",
            FlowArch::Residual => "residual",
            FlowArch::Csp => "csp",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::invalid(format!("unknown activation '{s}' (sigmoid, relu)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        })
    }
}

/// Per-layer weight-gradient norms of one chain, first layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFlowReport {
    pub architecture: FlowArch,
    pub activation: Activation,
    pub depth: usize,
    pub norms: Vec<f64>,
    /// For `Csp`: whether every bypassed half received exactly the gradient
    /// of the matching output half.
    pub bypass_exact: Option<bool>,
}

impl GradFlowReport {
    /// First-layer norm over last-layer norm.
    pub fn ratio(&self) -> f64 {
        self.norms[0] / self.norms[self.depth - 1]
    }
}

impl fmt::Display for GradFlowReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "architecture={} activation={} depth={}",
            self.architecture, self.activation, self.depth
        )?;
        writeln!(f, "layer,grad_norm")?;
        for (i, n) in self.norms.iter().enumerate() {
            writeln!(f, "{},{:e}", i + 1, n)?;
        }
        write!(f, "ratio={:e}", self.ratio())?;
        if let Some(b) = self.bypass_exact {
            write!(f, " bypass_exact={b}")?;
        }
        writeln!(f)
    }
}

/// Width of the gradient-flow chains.
pub const FLOW_CHANNELS: usize = 2;

/// Run one forward/backward pass through a `depth`-layer chain of 1x1
/// convolutions initialised to the identity, on a random `(1, 2, 4, 4)`
/// input, with loss `sum(output)`.
pub fn grad_flow_report(
    depth: usize,
    activation: Activation,
    architecture: FlowArch,
    seed: u64,
) -> Result<GradFlowReport> {
    if depth < 2 {
        return Err(Error::invalid(format!("depth must be >= 2, got {depth}")));
    }
    let c = FLOW_CHANNELS;
    let width = if architecture == FlowArch::Csp { c / 2 } else { c };
    let eye: Vec<f64> = (0..width * width)
        .map(|i| if i / width == i % width { 1.0 } else { 0.0 })
        .collect();
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::uniform(&[1, c, 4, 4], -1.0, 1.0, &mut seeded(seed))?;
    let mut h = tape.input(x);
    let mut weights = Vec::with_capacity(depth);
    let mut bypass = Vec::new();
    for _ in 0..depth {
        let w = tape.input(Tensor::from_f64(&[width, width, 1, 1], &eye)?);
        weights.push(w);
        let act = |tape: &mut Tape<f64>, v| match activation {
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Relu => tape.relu(v),
        };
        h = match architecture {
            FlowArch::Plain => {
                let z = tape.conv2d(h, w, None, ConvSpec::default())?;
                act(&mut tape, z)
            }
            FlowArch::Residual => {
                let z = tape.conv2d(h, w, None, ConvSpec::default())?;
                let y = act(&mut tape, z);
                tape.add(y, h)?
            }
            FlowArch::Csp => {
                let parts = tape.split(h, 1, &[width, width])?;
                let z = tape.conv2d(parts[0], w, None, ConvSpec::default())?;
                let y = act(&mut tape, z);
                let s = tape.add(y, parts[1])?;
                let out = tape.concat(&[y, s], 1)?;
                bypass.push((parts[1], out));
                out
            }
        };
    }
    let loss = tape.sum(h);
    tape.backward(loss)?;
    let norms = weights
        .iter()
        .map(|&w| {
            let g = tape.grad(w).unwrap_or(&[]);
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect::<Vec<_>>();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::invalid("gradient norms are not finite"));
    }
    let bypass_exact = (architecture == FlowArch::Csp).then(|| {
        bypass.iter().all(|&(x2, out)| match (tape.grad(x2), tape.grad(out)) {
            (Some(gx), Some(go)) => {
                let tail = &go[go.len() - gx.len()..];
                gx.iter().zip(tail).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            _ => false,
        })
    });
    Ok(GradFlowReport {
        architecture,
        activation,
        depth,
        norms,
        bypass_exact,
    })
}

/// Weight counts of one model variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantCount {
    pub variant: &'static str,
    /// Cell-edge weights per primitive, in canonical order.
    pub per_primitive: [usize; 5],
    pub edges: usize,
    /// Stem, head and path projections.
    pub other: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub plain: VariantCount,
    pub rsp: VariantCount,
}

impl ParamReport {
    /// `rsp / plain` over cell edges only; 1 when neither has edge weights.
    pub fn edge_ratio(&self) -> f64 {
        if self.plain.edges == 0 {
            1.0
        } else {
            self.rsp.edges as f64 / self.plain.edges as f64
        }
    }

    /// `rsp / plain` over every weight.
    pub fn ratio(&self) -> f64 {
        self.rsp.total as f64 / self.plain.total as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "variant")?;
        for k in PrimitiveKind::ALL {
            write!(f, ",{k}")?;
        }
        writeln!(f, ",edges,other,total")?;
        for v in [&self.plain, &self.rsp] {
            write!(f, "{}", v.variant)?;
            for n in v.per_primitive {
                write!(f, ",{n}")?;
            }
            writeln!(f, ",{},{},{}", v.edges, v.other, v.total)?;
        }
        writeln!(f, "edge_ratio={:.6} ratio={:.6}", self.edge_ratio(), self.ratio())
    }
}

/// Count weights by walking every registered buffer of the model.
pub fn enumerate_weights<T: crate::Scalar>(net: &Network<T>, variant: &'static str) -> Result<VariantCount> {
    let mut per_primitive = [0usize; 5];
    let mut other = 0;
    for w in net.store.weights() {
        let n = w.tensor.shape().iter().product::<usize>();
        if w.name.contains(".edge") {
            let kind: PrimitiveKind = w
                .name
                .rsplit('.')
                .nth(1)
                .ok_or_else(|| Error::invalid(format!("unexpected weight name '{}'", w.name)))?
                .parse()?;
            per_primitive[kind.index()] += n;
        } else {
            other += n;
        }
    }
    let edges = per_primitive.iter().sum();
    Ok(VariantCount {
        variant,
        per_primitive,
        edges,
        other,
        total: edges + other,
    })
}

/// Build the final model for `genotype` with and without partial wrapping
/// and count its weights. Paths follow `macro_g`, or the leading selection
/// when none is given.
pub fn count_params_report(
    genotype: &Genotype,
    macro_g: Option<&MacroGenotype>,
    cfg: &SearchConfig,
) -> Result<ParamReport> {
    let fallback = MacroGenotype::leading(cfg.layers, cfg.k_paths, cfg.attention_mode);
    let macro_g = macro_g.unwrap_or(&fallback);
    let base = genotype.with_channels(cfg.channels);
    let build = |rsp: bool, name: &'static str| -> Result<VariantCount> {
        let net = Network::<f32>::final_model(
            net_shape(cfg),
            &base.with_rsp(rsp),
            macro_g,
            cfg.stack_n,
            &mut derived(cfg.seed, 0),
        )?;
        enumerate_weights(&net, name)
    };
    Ok(ParamReport {
        plain: build(false, "plain")?,
        rsp: build(true, "rsp")?,
    })
}
