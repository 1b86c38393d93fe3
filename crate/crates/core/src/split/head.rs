//! Channel duplication and the head re-initialization / fine-tune that
//! follows a split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{classify, ActivationVector, PrototypeBank};

use super::adam::{adam_step, AdamConfig, AdamState};

fn copy_row(m: &Matrix, e: usize, what: &'static str) -> Result<Matrix> {
    if e >= m.rows() {
        return Err(Error::OutOfRange {
            what,
            index: e,
            len: m.rows(),
        });
    }
    let mut out = m.clone();
    let row = m.row(e).to_vec();
    out.push_row(&row)?;
    Ok(out)
}

/// Appends a copy of kernel row `e`.
pub fn duplicate_kernel(kernels: &Matrix, e: usize) -> Result<Matrix> {
    copy_row(kernels, e, "prototype")
}

/// Appends a copy of head row `e`.
pub fn extend_head(head: &Matrix, e: usize) -> Result<Matrix> {
    copy_row(head, e, "prototype")
}

/// Duplicates prototype `e` (kernel and head row) into a new last channel.
pub fn duplicate_prototype(bank: &PrototypeBank, e: usize) -> Result<PrototypeBank> {
    bank.check_prototype(e)?;
    PrototypeBank::new(
        duplicate_kernel(bank.kernels(), e)?,
        extend_head(bank.head(), e)?,
        bank.class_names().to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneParams {
    /// Adam step size.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 0.0,
            batch_size: 10,
            epochs: 1,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInit {
    pub mean: f64,
    pub std: f64,
    /// No positive weights elsewhere; the fixed fallback distribution was used.
    pub fallback: bool,
}

/// Mean and population standard deviation of the strictly positive head
/// entries outside `rows`.
pub fn positive_weight_stats(head: &Matrix, rows: &[usize]) -> Option<(f64, f64)> {
    let values: Vec<f64> = (0..head.rows())
        .filter(|r| !rows.contains(r))
        .flat_map(|r| head.row(r).iter().copied())
        .filter(|&w| w > 0.0)
        .collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Redraws head rows `rows` from a normal fit on the other positive
/// weights, then fine-tunes only those rows on
/// `-log(o_y / sum(o) + eps)` with minibatch Adam, clamping to
/// non-negative after every step. Every other row is left untouched.
pub fn reinit_and_finetune_head(
    bank: &PrototypeBank,
    rows: &[usize],
    dataset: &[(ActivationVector, usize)],
    params: &FinetuneParams,
    seed: u64,
) -> Result<(PrototypeBank, HeadInit)> {
    for &r in rows {
        bank.check_prototype(r)?;
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidConfig("fine-tune batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (init, dist) = match positive_weight_stats(bank.head(), rows) {
        Some((mean, std)) => (HeadInit { mean, std, fallback: false }, Normal::new(mean, std)),
        None => (
            HeadInit { mean: 0.1, std: 0.01, fallback: true },
            Normal::new(0.1, 0.01),
        ),
    };
    let dist = dist.map_err(|e| Error::InvalidConfig(format!("head init: {e}")))?;
    let mut out = bank.clone();
    let k = out.num_classes();
    for &r in rows {
        for c in 0..k {
            let w = if init.std == 0.0 { init.mean } else { dist.sample(&mut rng) };
            out.head_mut().set(r, c, w.max(0.0));
        }
    }

    let eps = params.epsilon;
    let adam = AdamConfig {
        learning_rate: params.learning_rate,
        weight_decay: params.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(rows.len() * k);
    let mut weights: Vec<f64> = rows.iter().flat_map(|&r| out.head().row(r).to_vec()).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(params.batch_size) {
            let batch = idx.iter().map(|&i| &dataset[i]);
            let batch_len = idx.len();
            let mut grad = vec![0.0; rows.len() * k];
            for (p, label) in batch {
                let scores = classify(p, &out)?;
                let total: f64 = scores.iter().sum();
                if total <= 0.0 || *label >= k {
                    continue;
                }
                let ratio = scores[*label] / total;
                let dl_dratio = -1.0 / (ratio + eps);
                for (ri, &r) in rows.iter().enumerate() {
                    let pd = p.0[r];
                    for j in 0..k {
                        let indicator = if j == *label { total } else { 0.0 };
                        let dratio = (indicator - scores[*label]) / (total * total);
                        grad[ri * k + j] += dl_dratio * dratio * pd;
                    }
                }
            }
            let scale = 1.0 / batch_len as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut weights, &grad, &mut state, &adam);
            for w in weights.iter_mut() {
                *w = w.max(0.0);
            }
            for (ri, &r) in rows.iter().enumerate() {
                out.head_mut().row_mut(r).copy_from_slice(&weights[ri * k..(ri + 1) * k]);
            }
        }
    }
    Ok((out, init))
}
