//! The two search stages, final training and evaluation.
//!
//! Each phase draws its initial weights and its sample order from its own
//! random stream derived from `cfg.seed`, so a phase run on its own matches
//! the same phase inside a full pipeline bit for bit.

use std::fmt;

use rand::seq::SliceRandom;

use crate::attention::{select_top_k, MacroGenotype};
use crate::cell::{discretize, CellTopology, Genotype};
use crate::config::SearchConfig;
use crate::data::{half_split, load_dataset, synth_dataset, to_batch, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, MiouReport};
use crate::model::{argmax_channels, NetShape, Network};
use crate::optim::Sgd;
use crate::rng::{derived, Rng};
use crate::scalar::Scalar;
use crate::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CellSearch,
    PathSearch,
    Train,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::CellSearch => "cell_search",
            Phase::PathSearch => "path_search",
            Phase::Train => "train",
        }
    }

    fn streams(self) -> (u64, u64) {
        match self {
            Phase::CellSearch => (10, 11),
            Phase::PathSearch => (20, 21),
            Phase::Train => (30, 31),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One CSV row: mean training loss of the epoch and validation mIOU.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,phase,loss,miou";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.phase, r.loss, r.miou));
        }
        s
    }
}

/// The network shape a configuration describes.
pub fn net_shape(cfg: &SearchConfig) -> NetShape {
    NetShape {
        in_channels: cfg.in_channels,
        channels: cfg.channels,
        layers: cfg.layers,
        num_classes: cfg.num_classes,
    }
}

/// Train and validation sets named by the configuration. A missing
/// directory falls back to the synthetic set: the first `synth_train`
/// samples train, the next `synth_val` validate.
pub fn load_splits(cfg: &SearchConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let synth = || -> Result<(Vec<SegSample>, Vec<SegSample>)> {
        let mut all = synth_dataset(
            cfg.data_seed,
            cfg.synth_train + cfg.synth_val,
            cfg.synth_size,
            cfg.num_classes,
        )?;
        let val = all.split_off(cfg.synth_train);
        Ok((all, val))
    };
    let (train, val) = match (&cfg.train_dir, &cfg.val_dir) {
        (Some(t), Some(v)) => (load_dataset(t.as_ref())?, load_dataset(v.as_ref())?),
        (Some(t), None) => (load_dataset(t.as_ref())?, synth()?.1),
        (None, Some(v)) => (synth()?.0, load_dataset(v.as_ref())?),
        (None, None) => synth()?,
    };
    Ok((train, val))
}

/// Split a training set into the disjoint weight and architecture halves
/// used by both search stages.
pub fn search_splits(train: &[SegSample], seed: u64) -> (Vec<SegSample>, Vec<SegSample>) {
    let (a, b) = half_split(train.len(), &mut derived(seed, 1));
    let pick = |ix: &[usize]| ix.iter().map(|&i| train[i].clone()).collect();
    (pick(&a), pick(&b))
}

/// Cosine-annealed weight learning rate for zero-based `epoch`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

fn batches<T: Scalar>(
    samples: &[SegSample],
    batch_size: usize,
    crop: (usize, usize),
    rng: &mut Rng,
) -> Result<Vec<(crate::Tensor<T>, Vec<u8>)>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let cropped = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if (s.height, s.width) == crop {
                        Ok(s.clone())
                    } else {
                        s.random_crop(crop.0, crop.1, rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SegSample> = cropped.iter().collect();
            to_batch(&refs)
        })
        .collect()
}

fn check_loss(loss: f64, phase: Phase, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase: phase.name().to_string(),
            epoch,
        })
    }
}

fn check_inputs(train: &[SegSample], val: &[SegSample], cfg: &SearchConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    for s in train.iter().chain(val) {
        s.check_labels(cfg.num_classes)?;
        if s.channels != cfg.in_channels {
            return Err(Error::invalid(format!(
                "sample has {} channels, config expects {}",
                s.channels, cfg.in_channels
            )));
        }
    }
    Ok(())
}

/// One weight update on a batch. Returns the loss.
fn weight_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Sgd,
    images: crate::Tensor<T>,
    labels: &[u8],
) -> Result<(f64, Vec<crate::attention::PathScores>)> {
    net.store.set_requires_grad(true);
    if let Some(a) = net.arch.as_mut() {
        a.store.set_requires_grad(false);
    }
    let mut tape = Tape::new();
    let (loss, fwd) = net.loss(&mut tape, images, labels)?;
    let value = tape.value(loss).data()[0].widen();
    tape.backward(loss)?;
    tape.absorb_grads(&mut net.store)?;
    opt.step(&mut net.store)?;
    Ok((value, fwd.scores))
}

/// One architecture update on a batch; weights stay frozen.
fn arch_step<T: Scalar>(net: &mut Network<T>, opt: &mut Sgd, images: crate::Tensor<T>, labels: &[u8]) -> Result<f64> {
    net.store.set_requires_grad(false);
    net.arch
        .as_mut()
        .ok_or_else(|| Error::invalid("network has no architecture logits"))?
        .store
        .set_requires_grad(true);
    let mut tape = Tape::new();
    let (loss, _) = net.loss(&mut tape, images, labels)?;
    let value = tape.value(loss).data()[0].widen();
    tape.backward(loss)?;
    let arch = net.arch.as_mut().expect("checked above");
    tape.absorb_grads(&mut arch.store)?;
    opt.step(&mut arch.store)?;
    net.store.set_requires_grad(true);
    Ok(value)
}

/// Outcome of the cell search.
#[derive(Clone, Debug)]
pub struct CellSearchOutcome<T> {
    pub genotype: Genotype,
    pub network: Network<T>,
    pub initial_miou: f64,
    pub final_miou: f64,
}

/// First-order bilevel search: per batch, a weight step on `train` then an
/// architecture step on `val`.
pub fn stage1_cell_search<T: Scalar>(
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SearchConfig,
    log: &mut MetricsLog,
) -> Result<CellSearchOutcome<T>> {
    check_inputs(train, val, cfg)?;
    let phase = Phase::CellSearch;
    let (init_stream, order_stream) = phase.streams();
    let mut net = Network::<T>::cell_supernet(
        net_shape(cfg),
        cfg.rsp,
        cfg.arch_noise,
        &mut derived(cfg.seed, init_stream),
    )?;
    let mut order_rng = derived(cfg.seed, order_stream);
    let mut w_opt = Sgd::new(cfg.lr_w, cfg.momentum_w, cfg.wd_w)?;
    let mut a_opt = Sgd::new(cfg.lr_arch, cfg.momentum_arch, cfg.wd_arch)?;
    let initial_miou = evaluate_miou(&net, val, cfg.batch_size, cfg.num_classes)?.mean;
    let mut last_miou = initial_miou;
    for epoch in 0..cfg.epochs_cell {
        w_opt.lr = cosine_lr(cfg.lr_w, epoch, cfg.epochs_cell);
        let tb = batches::<T>(train, cfg.batch_size, cfg.crop, &mut order_rng)?;
        let vb = batches::<T>(val, cfg.batch_size, cfg.crop, &mut order_rng)?;
        let mut total = 0.0;
        for (i, (x, y)) in tb.into_iter().enumerate() {
            let (loss, _) = weight_step(&mut net, &mut w_opt, x, &y)?;
            check_loss(loss, phase, epoch + 1)?;
            total += loss;
            let (vx, vy) = &vb[i % vb.len()];
            let aloss = arch_step(&mut net, &mut a_opt, vx.clone(), vy)?;
            check_loss(aloss, phase, epoch + 1)?;
        }
        let loss = total / train.len().div_ceil(cfg.batch_size) as f64;
        last_miou = evaluate_miou(&net, val, cfg.batch_size, cfg.num_classes)?.mean;
        log.rows.push(LogRow {
            epoch: epoch + 1,
            phase,
            loss,
            miou: last_miou,
        });
    }
    let arch = net.arch.as_ref().expect("supernet has logits");
    if !arch.all_finite() {
        return Err(Error::Diverged {
            phase: phase.name().to_string(),
            epoch: cfg.epochs_cell,
        });
    }
    let genotype = discretize(&arch.values(), &CellTopology::default(), cfg.channels, cfg.rsp)?;
    Ok(CellSearchOutcome {
        genotype,
        network: net,
        initial_miou,
        final_miou: last_miou,
    })
}

/// Outcome of the path search.
#[derive(Clone, Debug)]
pub struct PathSearchOutcome {
    pub macro_genotype: MacroGenotype,
    /// Per-layer running-mean path scores that produced the selection.
    pub mean_scores: Vec<Vec<f64>>,
}

/// Number of final epochs whose path scores are averaged.
pub fn score_window(epochs: usize) -> usize {
    epochs.div_ceil(4)
}

/// Train the path-attention supernet with the cells fixed to `genotype`
/// and freeze the top-k paths of every layer.
pub fn stage2_path_search<T: Scalar>(
    train: &[SegSample],
    val: &[SegSample],
    genotype: &Genotype,
    cfg: &SearchConfig,
    log: &mut MetricsLog,
) -> Result<PathSearchOutcome> {
    check_inputs(train, val, cfg)?;
    let genotype = genotype.with_rsp(cfg.rsp);
    let phase = Phase::PathSearch;
    let (init_stream, order_stream) = phase.streams();
    let mut net = Network::<T>::path_supernet(
        net_shape(cfg),
        &genotype,
        cfg.attention_mode,
        cfg.k_paths,
        &mut derived(cfg.seed, init_stream),
    )?;
    let mut order_rng = derived(cfg.seed, order_stream);
    let mut opt = Sgd::new(cfg.lr_w, cfg.momentum_w, cfg.wd_w)?;
    let window_start = cfg.epochs_path - score_window(cfg.epochs_path);
    let mut sums: Vec<Vec<f64>> = (0..cfg.layers).map(|l| vec![0.0; l + 1]).collect();
    let mut count = 0usize;
    for epoch in 0..cfg.epochs_path {
        opt.lr = cosine_lr(cfg.lr_w, epoch, cfg.epochs_path);
        let mut total = 0.0;
        let tb = batches::<T>(train, cfg.batch_size, cfg.crop, &mut order_rng)?;
        let nb = tb.len();
        for (x, y) in tb {
            let (loss, scores) = weight_step(&mut net, &mut opt, x, &y)?;
            check_loss(loss, phase, epoch + 1)?;
            total += loss;
            if epoch >= window_start {
                for (acc, s) in sums.iter_mut().zip(&scores) {
                    for (a, v) in acc.iter_mut().zip(&s.scores) {
                        *a += v;
                    }
                }
                count += 1;
            }
        }
        let miou = evaluate_miou(&net, val, cfg.batch_size, cfg.num_classes)?.mean;
        log.rows.push(LogRow {
            epoch: epoch + 1,
            phase,
            loss: total / nb as f64,
            miou,
        });
    }
    let macro_genotype = if count == 0 {
        MacroGenotype::leading(cfg.layers, cfg.k_paths, cfg.attention_mode)
    } else {
        let layers = sums
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let mean: Vec<f64> = s.iter().map(|v| v / count as f64).collect();
                select_top_k(&mean, cfg.k_paths.min(l + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        MacroGenotype {
            k: cfg.k_paths,
            mode: cfg.attention_mode,
            layers,
        }
    };
    let mean_scores = sums
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|v| if count > 0 { v / count as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(PathSearchOutcome {
        macro_genotype,
        mean_scores,
    })
}

/// A trained final model and its validation score.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub network: Network<T>,
    pub report: MiouReport,
    pub params: usize,
}

/// Stack the searched cell `stack_n` times per layer and train weights.
pub fn train_final<T: Scalar>(
    genotype: &Genotype,
    macro_g: &MacroGenotype,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SearchConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome<T>> {
    check_inputs(train, val, cfg)?;
    let genotype = genotype.with_rsp(cfg.rsp);
    let phase = Phase::Train;
    let (init_stream, order_stream) = phase.streams();
    let mut net = Network::<T>::final_model(
        net_shape(cfg),
        &genotype,
        macro_g,
        cfg.stack_n,
        &mut derived(cfg.seed, init_stream),
    )?;
    let mut order_rng = derived(cfg.seed, order_stream);
    let mut opt = Sgd::new(cfg.lr_w, cfg.momentum_w, cfg.wd_w)?;
    let mut report = evaluate_miou(&net, val, cfg.batch_size, cfg.num_classes)?;
    for epoch in 0..cfg.epochs_train {
        opt.lr = cosine_lr(cfg.lr_w, epoch, cfg.epochs_train);
        let mut total = 0.0;
        let tb = batches::<T>(train, cfg.batch_size, cfg.crop, &mut order_rng)?;
        let nb = tb.len();
        for (x, y) in tb {
            let (loss, _) = weight_step(&mut net, &mut opt, x, &y)?;
            check_loss(loss, phase, epoch + 1)?;
            total += loss;
        }
        report = evaluate_miou(&net, val, cfg.batch_size, cfg.num_classes)?;
        log.rows.push(LogRow {
            epoch: epoch + 1,
            phase,
            loss: total / nb as f64,
            miou: report.mean,
        });
    }
    let params = net.param_count();
    Ok(TrainOutcome {
        network: net,
        report,
        params,
    })
}

/// Score `model` on `dataset`, forwarding fixed-order batches of
/// `batch_size` full-size samples.
pub fn evaluate_miou<T: Scalar>(
    model: &Network<T>,
    dataset: &[SegSample],
    batch_size: usize,
    num_classes: usize,
) -> Result<MiouReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut conf = Confusion::new(num_classes)?;
    for chunk in dataset.chunks(batch_size) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (x, labels) = to_batch::<T>(&refs)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, xv)?;
        let pred = argmax_channels(tape.value(fwd.logits))?;
        conf.update(&pred, &labels)?;
    }
    conf.miou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 0, 1), 0.1);
    }

    #[test]
    fn score_window_is_a_quarter_rounded_up() {
        assert_eq!(score_window(10), 3);
        assert_eq!(score_window(1), 1);
        assert_eq!(score_window(0), 0);
    }

    #[test]
    fn csv_layout() {
        let log = MetricsLog {
            rows: vec![LogRow {
                epoch: 1,
                phase: Phase::Train,
                loss: 0.5,
                miou: 0.25,
            }],
        };
        assert_eq!(log.to_csv(), "epoch,phase,loss,miou\n1,train,0.500000,0.250000\n");
    }
}
