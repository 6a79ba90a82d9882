//! Cross-modal center loss, discriminative cross-entropy, cross-modal pair
//! loss, their weighted sum, and the class-center bank.
//!
//! Embeddings are passed per modality as `[n x k]` tape values whose row `i`
//! belongs to instance `i` of the batch, so `labels[i]` labels row `i` of
//! every modality.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// One center per class in the common space. Centers move only through
/// [`apply_center_update`]; losses treat them as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank<T> {
    centers: Tensor<T>,
    center_lr: T,
}

impl<T: Scalar> CenterBank<T> {
    pub fn new(centers: Tensor<T>, center_lr: T) -> Result<Self> {
        if centers.shape().len() != 2 {
            return Err(Error::contract(format!(
                "center bank must be a [classes x dim] matrix, got {:?}",
                centers.shape()
            )));
        }
        if !centers.all_finite() {
            return Err(Error::contract("center bank holds non-finite values"));
        }
        if !(center_lr >= T::zero() && center_lr.is_finite()) {
            return Err(Error::config("center_lr", "must be finite and >= 0"));
        }
        Ok(CenterBank { centers, center_lr })
    }

    /// Gaussian centers scaled by 0.1.
    pub fn init(num_classes: usize, dim: usize, center_lr: T, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..num_classes * dim)
            .map(|_| T::from_f64_lossy(0.1 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(Tensor::matrix(num_classes, dim, values)?, center_lr)
    }

    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn centers(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn center(&self, class: usize) -> &[T] {
        self.centers.row(class)
    }

    pub fn center_lr(&self) -> T {
        self.center_lr
    }

    /// Plain-text matrix: one line per class, space-separated decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for j in 0..self.num_classes() {
            let row: Vec<String> = self.center(j).iter().map(|v| v.to_decimal()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, center_lr: T) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|f| T::parse_decimal(f).ok_or_else(|| Error::contract(format!("bad center value `{f}`"))))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(Tensor::from_rows(&rows)?, center_lr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, center_lr: T) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, center_lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_c: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_c: 1.0,
            alpha_d: 1.0,
            alpha_m: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("alpha_c", self.alpha_c),
            ("alpha_d", self.alpha_d),
            ("alpha_m", self.alpha_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if self.alpha_c == 0.0 && self.alpha_d == 0.0 && self.alpha_m == 0.0 {
            return Err(Error::config("alpha_c", "at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Keeps only the terms named in an ablation spec: `l1` is cross-entropy,
    /// `l2` the center loss, `l3` the pair loss, joined with `+`.
    pub fn ablation(self, spec: &str) -> Result<Self> {
        let mut keep = [false; 3];
        for term in spec.split('+').map(str::trim) {
            match term.to_ascii_lowercase().as_str() {
                "l1" => keep[0] = true,
                "l2" => keep[1] = true,
                "l3" => keep[2] = true,
                other => {
                    return Err(Error::config(
                        "loss",
                        format!("unknown loss term `{other}`, expected l1, l2 or l3"),
                    ))
                }
            }
        }
        Ok(LossWeights {
            alpha_d: if keep[0] { self.alpha_d } else { 0.0 },
            alpha_c: if keep[1] { self.alpha_c } else { 0.0 },
            alpha_m: if keep[2] { self.alpha_m } else { 0.0 },
        })
    }
}

fn check_batch<T: Scalar>(tape: &Tape<T>, embeddings: &[Var], labels: &[usize]) -> Result<(usize, usize)> {
    if embeddings.is_empty() || labels.is_empty() {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    let shape = tape.value(embeddings[0]).shape().to_vec();
    for &e in embeddings {
        let s = tape.value(e).shape();
        if s != shape.as_slice() || s.len() != 2 || s[0] != labels.len() {
            return Err(Error::contract(format!(
                "every modality needs one embedding per instance: got {s:?} for {} labels",
                labels.len()
            )));
        }
    }
    Ok((shape[0], shape[1]))
}

/// `1/2 * sum_i sum_m ||v_i^m - C_{y_i}||^2`, divided by `n * M` under
/// [`Reduction::Mean`]. No gradient reaches the centers.
pub fn cross_modal_center_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: &[Var],
    labels: &[usize],
    bank: &CenterBank<T>,
    reduction: Reduction,
) -> Result<Var> {
    let (n, k) = check_batch(tape, embeddings, labels)?;
    if k != bank.dim() {
        return Err(Error::Shape {
            op: "cross_modal_center_loss",
            left: vec![n, k],
            right: bank.centers().shape().to_vec(),
        });
    }
    let mut gathered = Vec::with_capacity(n * k);
    for &y in labels {
        if y >= bank.num_classes() {
            return Err(Error::contract(format!(
                "label {y} has no center ({} classes)",
                bank.num_classes()
            )));
        }
        gathered.extend_from_slice(bank.center(y));
    }
    let centers = tape.constant(Tensor::matrix(n, k, gathered)?);
    let mut total: Option<Var> = None;
    for &v in embeddings {
        let d = tape.squared_euclidean(v, centers)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let half = T::from_f64_lossy(0.5);
    let factor = match reduction {
        Reduction::Sum => half,
        Reduction::Mean => half / T::from_usize(n * embeddings.len()).expect("batch size fits"),
    };
    tape.scale(total.expect("non-empty"), factor)
}

/// Per-class center shift `sum_i sum_m [y_i = j] (C_j - v_i^m) / (1 + sum_i [y_i = j])`.
///
/// The denominator counts instances, not (instance, modality) pairs.
/// Classes absent from the batch get a zero row.
pub fn center_delta<T: Scalar>(embeddings: &[&Tensor<T>], labels: &[usize], bank: &CenterBank<T>) -> Result<Tensor<T>> {
    if embeddings.is_empty() || labels.is_empty() {
        return Err(Error::contract("center update needs a non-empty batch"));
    }
    let (classes, k) = (bank.num_classes(), bank.dim());
    for e in embeddings {
        if e.shape() != [labels.len(), k] {
            return Err(Error::Shape {
                op: "center_delta",
                left: e.shape().to_vec(),
                right: vec![labels.len(), k],
            });
        }
    }
    let mut numer = vec![T::zero(); classes * k];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!("label {y} has no center ({classes} classes)")));
        }
        counts[y] += 1;
        let c = bank.center(y);
        for e in embeddings {
            let row = &mut numer[y * k..(y + 1) * k];
            for ((acc, &cj), &v) in row.iter_mut().zip(c).zip(e.row(i)) {
                *acc = *acc + (cj - v);
            }
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        let denom = T::one() + T::from_usize(count).expect("count fits");
        numer[j * k..(j + 1) * k].iter_mut().for_each(|v| *v = *v / denom);
    }
    Tensor::matrix(classes, k, numer)
}

/// `C_j <- C_j - center_lr * delta_j` for every class.
pub fn apply_center_update<T: Scalar>(bank: &mut CenterBank<T>, delta: &Tensor<T>) -> Result<()> {
    if delta.shape() != bank.centers.shape() {
        return Err(Error::Shape {
            op: "apply_center_update",
            left: bank.centers.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let lr = bank.center_lr;
    let updated: Vec<T> = bank
        .centers
        .values()
        .iter()
        .zip(delta.values())
        .map(|(&c, &d)| c - lr * d)
        .collect();
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "apply_center_update",
        });
    }
    bank.centers.values_mut().copy_from_slice(&updated);
    Ok(())
}

/// `-(1/n) sum_i sum_m log p_i^m[y_i]`: summed over modalities, averaged
/// over instances only.
pub fn discriminative_loss<T: Scalar>(tape: &mut Tape<T>, log_probs: &[Var], labels: &[usize]) -> Result<Var> {
    let (n, classes) = check_batch(tape, log_probs, labels)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut total: Option<Var> = None;
    for &lp in log_probs {
        let picked = tape.pick_sum(lp, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, picked)?,
            None => picked,
        });
    }
    let factor = -T::one() / T::from_usize(n).expect("batch size fits");
    tape.scale(total.expect("non-empty"), factor)
}

/// Sum over unordered modality pairs of `||v_i^a - v_i^b||^2`, averaged
/// over instances under [`Reduction::Mean`].
pub fn cross_modal_mse<T: Scalar>(tape: &mut Tape<T>, embeddings: &[Var], reduction: Reduction) -> Result<Var> {
    let Some(&first) = embeddings.first() else {
        return Err(Error::contract("pair loss needs at least one modality"));
    };
    let rows = tape.value(first).shape().first().copied().unwrap_or(0);
    let labels = vec![0usize; rows];
    let (n, _) = check_batch(tape, embeddings, &labels)?;
    let mut total: Option<Var> = None;
    for a in 0..embeddings.len() {
        for b in a + 1..embeddings.len() {
            let d = tape.squared_euclidean(embeddings[a], embeddings[b])?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
    }
    let Some(total) = total else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.scale(total, T::one() / T::from_usize(n).expect("batch size fits")),
    }
}

/// `alpha_c l_c + alpha_d l_d + alpha_m l_m`. Terms with a zero weight are
/// left off the graph entirely.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, center: Var, disc: Var, mse: Var, w: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, alpha) in [(center, w.alpha_c), (disc, w.alpha_d), (mse, w.alpha_m)] {
        if !tape.value(term).is_scalar() {
            return Err(Error::contract("combined_loss expects scalar terms"));
        }
        if alpha == 0.0 {
            continue;
        }
        let scaled = if alpha == 1.0 {
            term
        } else {
            tape.scale(term, T::from_f64_lossy(alpha))?
        };
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}
