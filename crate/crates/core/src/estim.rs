//! Neural Jensen-Shannon lower bounds on multivariate mutual information.
//!
//! A small discriminator T is trained to tell joint activation samples from
//! samples of the product of marginals; its maximized GAN-style objective
//!
//! ```text
//! E[log sigmoid(T(h))] + E[log(1 - sigmoid(T(h_bar)))]
//! ```
//!
//! attains -2 log 2 when the two distributions coincide and 2 JSD - 2 log 2
//! at the optimum, so every estimate here is reported shifted by +2 log 2:
//! independence reads 0 and the ceiling is 2 log 2. Samples from the product
//! of marginals are manufactured by independently permuting each column of
//! the batch, which preserves every column's multiset exactly.
//!
//! The estimates are JS surrogates for the KL-based mutual information, not
//! KL values; they are compared against exact JS oracles, never against
//! entropies.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeds;
use crate::tensor::{Adam, Tensor, TensorError};

/// Shift added to the raw discriminator objective so that identical
/// distributions score 0; the shifts cancel in the diversity difference.
pub const JS_OFFSET: f64 = 2.0 * LN_2;

/// Fresh shuffles averaged for the reported value after training.
const EVAL_SHUFFLES: usize = 16;

#[derive(Debug, Error)]
pub enum EstimError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("need at least 2 filters/units, got {0}")]
    TooFewUnits(usize),
    #[error("labels length {got} does not match {rows} rows")]
    LabelLength { rows: usize, got: usize },
    #[error("no class has at least 2 samples")]
    NoEligibleClass,
    #[error("non-finite objective at update {step}; training aborted")]
    NonFinite { step: usize },
    #[error("activation values must be finite")]
    NonFiniteInput,
    #[error("batch csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// K x m matrix of activations, one row per sample, optionally labeled.
#[derive(Clone, Debug)]
pub struct ActivationBatch {
    values: Tensor,
    labels: Option<Vec<usize>>,
}

impl ActivationBatch {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self, EstimError> {
        let t = Tensor::from_vec(values, &[rows, cols])?;
        Self::from_tensor(t, None)
    }

    pub fn with_labels(
        values: Vec<f64>,
        rows: usize,
        cols: usize,
        labels: Vec<usize>,
    ) -> Result<Self, EstimError> {
        let t = Tensor::from_vec(values, &[rows, cols])?;
        Self::from_tensor(t, Some(labels))
    }

    /// Wrap an existing (possibly graph-connected) [K,m] tensor.
    pub fn from_tensor(values: Tensor, labels: Option<Vec<usize>>) -> Result<Self, EstimError> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(EstimError::TooFewRows { needed: 1, got: 0 });
        }
        if !values.all_finite() {
            return Err(EstimError::NonFiniteInput);
        }
        if let Some(l) = &labels {
            if l.len() != shape[0] {
                return Err(EstimError::LabelLength { rows: shape[0], got: l.len() });
            }
        }
        Ok(ActivationBatch { values, labels })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows grouped by class label, classes ascending.
    pub fn rows_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if let Some(labels) = &self.labels {
            for (row, &y) in labels.iter().enumerate() {
                map.entry(y).or_default().push(row);
            }
        }
        map
    }

    /// Copy with rows reordered; labels follow their rows.
    fn reordered(&self, order: &[usize]) -> Result<Self, EstimError> {
        let values = self.values.gather_rows(order)?.detach();
        let labels = self
            .labels
            .as_ref()
            .map(|l| order.iter().map(|&r| l[r]).collect());
        Ok(ActivationBatch { values, labels })
    }

    /// Canonical row order: lexicographic by activation values. Makes the
    /// standalone estimates invariant under row permutation of the input.
    fn canonical_order(&self) -> Vec<usize> {
        let m = self.cols();
        self.values.with_data(|d| {
            let mut idx: Vec<usize> = (0..self.rows()).collect();
            idx.sort_by(|&a, &b| {
                let ra = &d[a * m..(a + 1) * m];
                let rb = &d[b * m..(b + 1) * m];
                for (x, y) in ra.iter().zip(rb) {
                    match x.total_cmp(y) {
                        std::cmp::Ordering::Equal => continue,
                        other => return other,
                    }
                }
                std::cmp::Ordering::Equal
            });
            idx
        })
    }
}

/// One independent uniform permutation of 0..k per column.
pub fn column_permutations(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..m)
        .map(|_| {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(rng);
            perm
        })
        .collect()
}

/// Pseudo-samples from the product of marginals: each column permuted by an
/// independent seeded permutation. Column multisets are exactly preserved.
pub fn shuffle_marginal_product(batch: &ActivationBatch, seed: u64) -> Result<ActivationBatch, EstimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = shuffle_with_rng(batch.values(), &mut rng)?;
    // rows no longer correspond to samples, so labels are dropped
    ActivationBatch::from_tensor(t.detach(), None)
}

/// Shuffle a [K,m] tensor's columns in-graph (gradient flows back through
/// the permutation).
pub fn shuffle_with_rng(values: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, EstimError> {
    let shape = values.shape();
    let (k, m) = (shape[0], shape[1]);
    if k < 2 {
        return Err(EstimError::TooFewRows { needed: 2, got: k });
    }
    let perms = column_permutations(k, m, rng);
    Ok(values.shuffle_columns(&perms)?)
}

/// View conv feature maps [K,F,Hs,Ws] as an activation batch with
/// K*Hs*Ws rows and F columns: the filter responses at one spatial position
/// of one sample form one joint sample.
pub fn filters_to_activation_batch(feature_maps: &Tensor) -> Result<ActivationBatch, EstimError> {
    let shape = feature_maps.shape();
    if shape.len() == 4 && shape[1] < 2 {
        return Err(EstimError::TooFewUnits(shape[1]));
    }
    let t = feature_maps.filters_to_batch()?;
    ActivationBatch::from_tensor(t, None)
}

/// Per-sample labels expanded to per-spatial-position rows, matching
/// `filters_to_activation_batch` row order.
pub fn expand_labels_for_spatial(labels: &[usize], positions: usize) -> Vec<usize> {
    labels.iter().flat_map(|&y| std::iter::repeat(y).take(positions)).collect()
}

/// Random row subset (without replacement) capped at `max_rows`, input
/// order preserved. Used to bound discriminator cost on conv layers.
pub fn subsample_rows(
    batch: &ActivationBatch,
    max_rows: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ActivationBatch, EstimError> {
    if batch.rows() <= max_rows {
        return Ok(batch.clone());
    }
    let mut idx: Vec<usize> = (0..batch.rows()).collect();
    idx.shuffle(rng);
    let mut keep: Vec<usize> = idx.into_iter().take(max_rows).collect();
    keep.sort_unstable();
    batch.reordered(&keep)
}

/// Feed-forward scorer T: R^m -> R with one ReLU hidden layer, trained by
/// its own Adam state to maximize the JS objective.
pub struct Discriminator {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    opt: Adam,
    input_dim: usize,
}

/// Hidden width of the paper-standard m-200-1 scorer.
pub const DISC_HIDDEN: usize = 200;
/// Discriminator learning rate.
pub const DISC_LR: f64 = 1e-4;

impl Discriminator {
    /// Standard m-200-1 scorer with learning rate 1e-4.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self::with_config(input_dim, DISC_HIDDEN, DISC_LR, seed)
    }

    pub fn with_config(input_dim: usize, hidden: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // ReLU hidden layer: sqrt(2/fan_in); sigmoid-facing output: sqrt(1/fan_in).
        let w1 = Tensor::randn_param(&[input_dim, hidden], (2.0 / input_dim as f64).sqrt(), &mut rng);
        let b1 = Tensor::zeros_param(&[hidden]);
        let w2 = Tensor::randn_param(&[hidden, 1], (1.0 / hidden as f64).sqrt(), &mut rng);
        let b2 = Tensor::zeros_param(&[1]);
        let opt = Adam::new(vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()], lr);
        Discriminator { w1, b1, w2, b2, opt, input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("disc.w1".into(), self.w1.clone()),
            ("disc.b1".into(), self.b1.clone()),
            ("disc.w2".into(), self.w2.clone()),
            ("disc.b2".into(), self.b2.clone()),
        ]
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Scores, one finite scalar per row.
    pub fn score(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let h = x.matmul(&self.w1)?.add_row_bias(&self.b1)?.relu();
        h.matmul(&self.w2)?.add_row_bias(&self.b2)
    }

    /// One maximization step on the objective; returns its pre-step value.
    pub fn maximize_step(&mut self, objective: &Tensor) -> Result<f64, EstimError> {
        let value = objective.item();
        if !value.is_finite() {
            return Err(EstimError::NonFinite { step: self.opt.step_count() as usize });
        }
        objective.scale(-1.0).backward()?;
        self.opt.step()?;
        Ok(value)
    }
}

/// Raw JS surrogate objective:
/// mean log sigmoid(T(joint)) + mean log(1 - sigmoid(T(marginal))).
pub fn js_objective(disc: &Discriminator, joint: &Tensor, marginal: &Tensor) -> Result<Tensor, EstimError> {
    let pos = disc.score(joint)?.sigmoid().ln_clamped().mean();
    let neg = disc.score(marginal)?.sigmoid().rsub_scalar(1.0).ln_clamped().mean();
    Ok(pos.add(&neg)?)
}

fn eval_objective(
    disc: &Discriminator,
    values: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64, EstimError> {
    let mut total = 0.0;
    for _ in 0..EVAL_SHUFFLES {
        let shuffled = shuffle_with_rng(values, rng)?;
        total += js_objective(disc, values, &shuffled)?.item();
    }
    Ok(total / EVAL_SHUFFLES as f64)
}

/// Train `disc` for `updates` maximization steps against seeded marginal
/// shuffles of `batch`, then report the averaged objective + 2 log 2.
///
/// Deterministic given (batch contents, discriminator state, updates, seed);
/// the batch is put in canonical row order first, so row permutations of the
/// input do not change the value.
pub fn js_mi_estimate(
    batch: &ActivationBatch,
    disc: &mut Discriminator,
    updates: usize,
    seed: u64,
) -> Result<f64, EstimError> {
    if batch.rows() < 2 {
        return Err(EstimError::TooFewRows { needed: 2, got: batch.rows() });
    }
    let canon = batch.reordered(&batch.canonical_order())?;
    let values = canon.values().detach();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "js-mi", 0));
    disc.zero_grads();
    for step in 0..updates {
        let shuffled = shuffle_with_rng(&values, &mut rng)?;
        let obj = js_objective(disc, &values, &shuffled)?;
        disc.maximize_step(&obj).map_err(|e| match e {
            EstimError::NonFinite { .. } => EstimError::NonFinite { step },
            other => other,
        })?;
    }
    Ok(eval_objective(disc, &values, &mut rng)? + JS_OFFSET)
}

/// Class-conditional JS estimate: the per-class objective is trained and
/// evaluated on class-restricted rows with one shared discriminator, then
/// combined by within-batch class proportions. Classes with fewer than two
/// samples are skipped and the priors renormalized over the rest.
pub fn conditional_js_mi_estimate(
    batch: &ActivationBatch,
    disc: &mut Discriminator,
    updates: usize,
    seed: u64,
) -> Result<f64, EstimError> {
    if batch.labels().is_none() {
        return Err(EstimError::LabelLength { rows: batch.rows(), got: 0 });
    }
    let canon = batch.reordered(&batch.canonical_order())?;
    let by_class = canon.rows_by_class();
    let eligible: Vec<(usize, Vec<usize>)> =
        by_class.into_iter().filter(|(_, rows)| rows.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(EstimError::NoEligibleClass);
    }
    let total: usize = eligible.iter().map(|(_, r)| r.len()).sum();
    let class_values: Vec<Tensor> = eligible
        .iter()
        .map(|(_, rows)| canon.values().gather_rows(rows).map(|t| t.detach()))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "js-mi-cond", 0));
    disc.zero_grads();
    for step in 0..updates {
        for values in &class_values {
            let shuffled = shuffle_with_rng(values, &mut rng)?;
            let obj = js_objective(disc, values, &shuffled)?;
            disc.maximize_step(&obj).map_err(|e| match e {
                EstimError::NonFinite { .. } => EstimError::NonFinite { step },
                other => other,
            })?;
        }
    }
    let mut estimate = 0.0;
    for ((_, rows), values) in eligible.iter().zip(&class_values) {
        let prior = rows.len() as f64 / total as f64;
        estimate += prior * (eval_objective(disc, values, &mut rng)? + JS_OFFSET);
    }
    Ok(estimate)
}

/// Diversity estimate: unconditional JS estimate minus the class-conditional
/// one. The +2 log 2 shifts cancel exactly when every class is retained.
pub fn d_lb_estimate(
    batch: &ActivationBatch,
    disc_joint: &mut Discriminator,
    disc_cond: &mut Discriminator,
    updates: usize,
    seed: u64,
) -> Result<f64, EstimError> {
    let unconditional = js_mi_estimate(batch, disc_joint, updates, seeds::derive(seed, "d-lb", 1))?;
    let conditional =
        conditional_js_mi_estimate(batch, disc_cond, updates, seeds::derive(seed, "d-lb", 2))?;
    Ok(unconditional - conditional)
}

/// Read a batch from CSV: header row of unit names, optional `label` column.
pub fn read_batch_csv(path: &Path) -> Result<ActivationBatch, EstimError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| EstimError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| EstimError::Csv(e.to_string()))?.clone();
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let m = headers.len() - usize::from(label_col.is_some());
    if m < 1 {
        return Err(EstimError::TooFewUnits(0));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| EstimError::Csv(e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            if Some(col) == label_col {
                labels.push(field.trim().parse::<usize>().map_err(|e| {
                    EstimError::Csv(format!("row {}, column {col}: bad label: {e}", line + 2))
                })?);
            } else {
                values.push(field.trim().parse::<f64>().map_err(|e| {
                    EstimError::Csv(format!("row {}, column {col}: bad value: {e}", line + 2))
                })?);
            }
        }
    }
    let rows = values.len() / m;
    if label_col.is_some() {
        ActivationBatch::with_labels(values, rows, m, labels)
    } else {
        ActivationBatch::new(values, rows, m)
    }
}
