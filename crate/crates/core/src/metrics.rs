//! Confusion matrices and mean intersection-over-union.

use crate::autodiff::IGNORE_LABEL;
use crate::error::{Error, Result};

/// `counts[truth * k + pred]` over labelled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    /// Add one prediction/label pair. Pixels labelled [`IGNORE_LABEL`] are
    /// skipped.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= k || p >= k {
                return Err(Error::invalid(format!(
                    "class id {} out of range for {k} classes",
                    t.max(p)
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IOU and their mean. Classes that occur in neither the
    /// predictions nor the labels get `None` and are left out of the mean.
    pub fn miou(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::invalid("no labelled pixels to score"));
        }
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// mIOU of a set of prediction/label maps.
pub fn miou_of(pairs: &[(Vec<u8>, Vec<u8>)], num_classes: usize) -> Result<MiouReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot score an empty dataset"));
    }
    let mut conf = Confusion::new(num_classes)?;
    for (p, t) in pairs {
        conf.update(p, t)?;
    }
    conf.miou()
}
