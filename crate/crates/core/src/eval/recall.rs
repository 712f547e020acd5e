use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::training::{teacher_forced, Batch};

/// Teacher-forced entity-label recall `R_n@k` with `n` the label count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub num_labels: usize,
    pub steps: usize,
    /// `k -> hits / steps`.
    pub recall: BTreeMap<usize, f64>,
}

impl RecallTable {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Position of `target` when the row is sorted by score descending, ties
/// broken towards the lower index.
fn rank<T: Scalar>(row: &[T], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

/// Feeds ground-truth `(y, m)` and counts, per `k`, the steps whose true next
/// label is among the top-`k` entries of the label distribution.
pub fn label_recall<T: Scalar>(model: &Model<T>, batches: &[Batch], ks: &[usize]) -> Result<RecallTable> {
    let c = model.config.num_labels;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > c) {
        return Err(Error::Config(format!("recall cut-off {k} outside 1..={c}")));
    }
    if !model.config.variant.has_label_head() {
        return Err(Error::Config(format!(
            "variant `{}` has no label head",
            model.config.variant.name()
        )));
    }
    let mut histogram = vec![0usize; c];
    let mut steps = 0;
    for batch in batches {
        let mut tape = Tape::inference();
        let outputs = teacher_forced(model, &mut tape, batch, None)?;
        for (t, out) in outputs.iter().enumerate() {
            let pe = tape.value(out.log_pe.expect("label head present"));
            for (b, row) in pe.data().chunks(c).enumerate() {
                if batch.mask[t][b] {
                    histogram[rank(row, batch.target_labels[t][b])] += 1;
                    steps += 1;
                }
            }
        }
    }
    let recall = ks
        .iter()
        .map(|&k| {
            let hits: usize = histogram[..k].iter().sum();
            let r = if steps == 0 { 0.0 } else { hits as f64 / steps as f64 };
            (k, r)
        })
        .collect();
    Ok(RecallTable {
        num_labels: c,
        steps,
        recall,
    })
}
