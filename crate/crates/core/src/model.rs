//! Segmentation networks built from cells: the stage-one supernet, the
//! path-attention supernet and the final stacked model.
//!
//! Layout: a stem of two stride-2 3x3 convolutions lifts the input to
//! `channels` at a quarter of the resolution, `layers` cell positions run at
//! that resolution, and a 1x1 convolution head is bilinearly upsampled back
//! to the input size. Layer `l` (zero-based) may read outputs `0..=l`,
//! where output 0 is the stem.

use serde::{Deserialize, Serialize};

use crate::attention::{fuse_selected, normalize_inputs, path_scores, AttentionMode, MacroGenotype, PathScores};
use crate::autodiff::{ConvSpec, Tape, Var};
use crate::cell::{stack_cells, ArchParams, Cell, CellArch, CellStack, CellTopology, Genotype};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::primitives::kaiming;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sizes shared by every network variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub in_channels: usize,
    pub channels: usize,
    pub layers: usize,
    pub num_classes: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.layers == 0 || self.num_classes < 2 {
            return Err(Error::invalid(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }
}

/// How each layer obtains its input.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Layer `l` reads output `l` directly.
    Chain,
    /// Score every earlier output and fuse the best `k` on each forward.
    Attention { mode: AttentionMode, k: usize },
    /// Fuse the frozen selection of a macro genotype.
    Fixed(MacroGenotype),
}

#[derive(Clone, Debug)]
enum Body {
    Search(Cell),
    Stack(CellStack),
}

#[derive(Clone, Debug)]
struct Layer {
    /// `(candidate index, 1x1 projection)` pairs.
    projections: Vec<(usize, ParamId)>,
    body: Body,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Per-layer path scores when routing by attention.
    pub scores: Vec<PathScores>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub shape: NetShape,
    pub store: ParamStore<T>,
    pub arch: Option<ArchParams<T>>,
    pub routing: Routing,
    pub genotype: Option<Genotype>,
    pub stack_n: usize,
    stem: [ParamId; 2],
    layers: Vec<Layer>,
    head_w: ParamId,
    head_b: ParamId,
}

const STEM_SPEC: ConvSpec = ConvSpec {
    stride: 2,
    padding: 1,
    dilation: 1,
    groups: 1,
};

fn stem_and_head<T: Scalar>(
    shape: &NetShape,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<([ParamId; 2], ParamId, ParamId)> {
    let (ci, c) = (shape.in_channels, shape.channels);
    let s0 = store.add("stem.0.weight", kaiming::<T>(&[c, ci, 3, 3], ci * 9, rng)?)?;
    let s1 = store.add("stem.1.weight", kaiming::<T>(&[c, c, 3, 3], c * 9, rng)?)?;
    let hw = store.add("head.weight", kaiming::<T>(&[shape.num_classes, c, 1, 1], c, rng)?)?;
    let hb = store.add("head.bias", Tensor::zeros(&[shape.num_classes])?)?;
    Ok(([s0, s1], hw, hb))
}

fn projection<T: Scalar>(
    layer: usize,
    cand: usize,
    c: usize,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<ParamId> {
    store.add(
        format!("layer{layer}.proj{cand}.weight"),
        kaiming::<T>(&[c, c, 1, 1], c, rng)?,
    )
}

impl<T: Scalar> Network<T> {
    /// Stage-one supernet: one mixed cell per layer, chained, with shared
    /// architecture logits.
    pub fn cell_supernet(shape: NetShape, rsp: bool, arch_noise: f64, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let topology = CellTopology::default();
        let mut store = ParamStore::new();
        let (stem, head_w, head_b) = stem_and_head(&shape, &mut store, rng)?;
        let layers = (0..shape.layers)
            .map(|l| {
                Ok(Layer {
                    projections: Vec::new(),
                    body: Body::Search(Cell::search(
                        topology.clone(),
                        shape.channels,
                        rsp,
                        &format!("layer{l}.cell0"),
                        &mut store,
                        rng,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let arch = ArchParams::new(topology.num_edges(), arch_noise, rng)?;
        Ok(Self {
            shape,
            store,
            arch: Some(arch),
            routing: Routing::Chain,
            genotype: None,
            stack_n: 1,
            stem,
            layers,
            head_w,
            head_b,
        })
    }

    /// Stage-two supernet: one fixed cell per layer, every earlier output
    /// projected and scored by path attention.
    pub fn path_supernet(
        shape: NetShape,
        genotype: &Genotype,
        mode: AttentionMode,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let selections: Vec<Vec<usize>> = (0..shape.layers).map(|l| (0..=l).collect()).collect();
        Self::stacked(shape, genotype, 1, Routing::Attention { mode, k }, &selections, rng)
    }

    /// Final model: `stack_n` cells per layer, inputs fixed by `macro_g`.
    pub fn final_model(
        shape: NetShape,
        genotype: &Genotype,
        macro_g: &MacroGenotype,
        stack_n: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        macro_g.validate()?;
        if macro_g.layers.len() != shape.layers {
            return Err(Error::invalid(format!(
                "macro genotype has {} layers, network has {}",
                macro_g.layers.len(),
                shape.layers
            )));
        }
        Self::stacked(
            shape,
            genotype,
            stack_n,
            Routing::Fixed(macro_g.clone()),
            &macro_g.layers,
            rng,
        )
    }

    fn stacked(
        shape: NetShape,
        genotype: &Genotype,
        stack_n: usize,
        routing: Routing,
        selections: &[Vec<usize>],
        rng: &mut Rng,
    ) -> Result<Self> {
        shape.validate()?;
        genotype.validate()?;
        if genotype.channels != shape.channels {
            return Err(Error::invalid(format!(
                "genotype is for {} channels, network uses {}",
                genotype.channels, shape.channels
            )));
        }
        let mut store = ParamStore::new();
        let (stem, head_w, head_b) = stem_and_head(&shape, &mut store, rng)?;
        let layers = selections
            .iter()
            .enumerate()
            .map(|(l, sel)| {
                let projections = sel
                    .iter()
                    .map(|&i| Ok((i, projection(l, i, shape.channels, &mut store, rng)?)))
                    .collect::<Result<Vec<_>>>()?;
                let body = Body::Stack(stack_cells(genotype, stack_n, &format!("layer{l}"), &mut store, rng)?);
                Ok(Layer { projections, body })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape,
            store,
            arch: None,
            routing,
            genotype: Some(genotype.clone()),
            stack_n,
            stem,
            layers,
            head_w,
            head_b,
        })
    }

    /// Number of scalar weights, excluding architecture logits.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Analytic weight count of the cell edges alone.
    pub fn cell_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.body {
                Body::Search(c) => c.param_count(),
                Body::Stack(s) => s.param_count(),
            })
            .sum()
    }

    /// Forward an `(n, in_channels, h, w)` batch to `(n, classes, h, w)`
    /// logits.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward> {
        let (_, ci, h, w) = tape.value(x).dims4()?;
        if ci != self.shape.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {:?}",
                self.shape.in_channels,
                tape.shape(x)
            )));
        }
        let st = &self.store;
        let mut y = x;
        for &id in &self.stem {
            let wv = tape.param(st, id);
            let z = tape.conv2d(y, wv, None, STEM_SPEC)?;
            let z = tape.channel_norm(z)?;
            y = tape.relu(z);
        }
        let (_, c, fh, fw) = tape.value(y).dims4()?;
        let alpha = self.arch.as_ref().map(|a| a.var(tape));
        let mut outs = vec![y];
        let mut scores = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let input = match &self.routing {
                Routing::Chain => outs[l],
                Routing::Attention { mode, k } => {
                    let ids: Vec<ParamId> = layer.projections.iter().map(|p| p.1).collect();
                    let feats = normalize_inputs(tape, st, &outs[..=l], &ids, (c, fh, fw))?;
                    let (_, ps) = path_scores(tape, &feats, *mode, (*k).min(l + 1))?;
                    let fused = fuse_selected(tape, &feats, &ps.selected)?;
                    scores.push(ps);
                    fused
                }
                Routing::Fixed(_) => {
                    let srcs: Vec<Var> = layer.projections.iter().map(|p| outs[p.0]).collect();
                    let ids: Vec<ParamId> = layer.projections.iter().map(|p| p.1).collect();
                    let feats = normalize_inputs(tape, st, &srcs, &ids, (c, fh, fw))?;
                    tape.add_all(&feats)?
                }
            };
            let out = match &layer.body {
                Body::Search(cell) => {
                    let a = alpha.ok_or_else(|| Error::invalid("search cell without architecture logits"))?;
                    cell.forward(tape, st, input, CellArch::Mixed(a))?
                }
                Body::Stack(stack) => stack.forward(tape, st, input)?,
            };
            outs.push(out);
        }
        let hw = tape.param(st, self.head_w);
        let hb = tape.param(st, self.head_b);
        let last = *outs.last().expect("at least one output");
        let logits = tape.conv2d(last, hw, Some(hb), ConvSpec::default())?;
        let logits = tape.interpolate_bilinear(logits, h, w)?;
        Ok(Forward { logits, scores })
    }

    /// Mean pixel cross-entropy of a batch.
    pub fn loss(&self, tape: &mut Tape<T>, images: Tensor<T>, labels: &[u8]) -> Result<(Var, Forward)> {
        let x = tape.constant(images);
        let fwd = self.forward(tape, x)?;
        let loss = tape.cross_entropy(fwd.logits, labels)?;
        Ok((loss, fwd))
    }

    /// Per-pixel argmax class of a batch, `(n, h, w)` row-major.
    pub fn predict(&self, images: Tensor<T>) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let fwd = self.forward(&mut tape, x)?;
        argmax_channels(tape.value(fwd.logits))
    }

    /// Serializable snapshot of a final model.
    pub fn to_file(&self) -> Result<ModelFile> {
        let (Some(genotype), Routing::Fixed(macro_g)) = (&self.genotype, &self.routing) else {
            return Err(Error::invalid(
                "only final models with a fixed macro genotype can be saved",
            ));
        };
        Ok(ModelFile {
            shape: self.shape,
            stack_n: self.stack_n,
            scalar: T::NAME.to_string(),
            genotype: genotype.to_string(),
            macro_genotype: macro_g.to_string(),
            weights: self
                .store
                .weights()
                .iter()
                .map(|w| SavedWeight {
                    name: w.name.clone(),
                    shape: w.tensor.shape().to_vec(),
                    data: w.tensor.to_f64(),
                })
                .collect(),
        })
    }

    /// Rebuild a final model and load its weights.
    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let genotype: Genotype = file.genotype.parse()?;
        let macro_g: MacroGenotype = file.macro_genotype.parse()?;
        let mut rng = crate::rng::seeded(0);
        let mut net = Self::final_model(file.shape, &genotype, &macro_g, file.stack_n, &mut rng)?;
        if net.store.len() != file.weights.len() {
            return Err(Error::invalid(format!(
                "model file has {} weights, architecture needs {}",
                file.weights.len(),
                net.store.len()
            )));
        }
        for saved in &file.weights {
            let id = net
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::invalid(format!("unexpected weight '{}'", saved.name)))?;
            let t = &mut net.store.get_mut(id).tensor;
            if t.shape() != saved.shape.as_slice() || saved.data.len() != t.len() {
                return Err(Error::shape(format!(
                    "weight '{}' has shape {:?}, expected {:?}",
                    saved.name,
                    saved.shape,
                    t.shape()
                )));
            }
            for (d, &v) in t.data_mut().iter_mut().zip(&saved.data) {
                *d = T::narrow(v);
            }
        }
        Ok(net)
    }
}

/// Argmax over the channel axis of `(n, k, h, w)` logits; ties go to the
/// lower class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.dims4()?;
    if k > 255 {
        return Err(Error::invalid("at most 255 classes are supported"));
    }
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(s * k + c) * hw + p] > d[(s * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedWeight {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk form of a trained final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub shape: NetShape,
    pub stack_n: usize,
    pub scalar: String,
    pub genotype: String,
    pub macro_genotype: String,
    pub weights: Vec<SavedWeight>,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::PrimitiveKind;
    use crate::rng::seeded;

    fn shape() -> NetShape {
        NetShape {
            in_channels: 1,
            channels: 4,
            layers: 3,
            num_classes: 3,
        }
    }

    fn input(n: usize) -> Tensor<f32> {
        Tensor::randn(&[n, 1, 16, 16], 1.0, &mut seeded(9)).unwrap()
    }

    #[test]
    fn every_variant_maps_to_input_resolution() {
        let mut rng = seeded(1);
        let g = Genotype::uniform(PrimitiveKind::Conv3x3, 4, true);
        let m = MacroGenotype::leading(3, 2, AttentionMode::PathNormalized);
        let nets = [
            Network::<f32>::cell_supernet(shape(), false, 1e-3, &mut rng).unwrap(),
            Network::path_supernet(shape(), &g, AttentionMode::PathNormalized, 2, &mut rng).unwrap(),
            Network::final_model(shape(), &g, &m, 2, &mut rng).unwrap(),
        ];
        for net in &nets {
            let mut tape = Tape::new();
            let x = tape.constant(input(2));
            let f = net.forward(&mut tape, x).unwrap();
            assert_eq!(tape.shape(f.logits), &[2, 3, 16, 16]);
        }
    }

    #[test]
    fn attention_routing_reports_scores() {
        let mut rng = seeded(2);
        let g = Genotype::uniform(PrimitiveKind::Identity, 4, false);
        let net = Network::<f32>::path_supernet(shape(), &g, AttentionMode::Literal, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(1));
        let f = net.forward(&mut tape, x).unwrap();
        let sel: Vec<_> = f.scores.iter().map(|s| s.selected.clone()).collect();
        assert_eq!(sel, vec![vec![0], vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn save_and_load_preserves_predictions() {
        let mut rng = seeded(3);
        let g = Genotype::uniform(PrimitiveKind::DepthwiseConv3x3, 4, false);
        let m = MacroGenotype::leading(3, 1, AttentionMode::PathNormalized);
        let net = Network::<f32>::final_model(shape(), &g, &m, 1, &mut rng).unwrap();
        let text = net.to_file().unwrap().to_json().unwrap();
        let back = Network::<f32>::from_file(&ModelFile::from_json(&text).unwrap()).unwrap();
        assert_eq!(back.store.fingerprint(), net.store.fingerprint());
        assert_eq!(back.predict(input(2)).unwrap(), net.predict(input(2)).unwrap());
    }

    #[test]
    fn mismatched_genotype_width_rejected() {
        let g = Genotype::uniform(PrimitiveKind::Conv3x3, 8, false);
        let m = MacroGenotype::leading(3, 2, AttentionMode::PathNormalized);
        assert!(Network::<f32>::final_model(shape(), &g, &m, 1, &mut seeded(0)).is_err());
    }
}
