//! The adversarial diversity-regularized training loop and its baselines.
//!
//! One outer iteration does, in order: forward the classifier on a batch,
//! train the unconditional discriminator T1 against marginal shuffles of the
//! (detached) hidden activations, train the shared conditional discriminator
//! T2 on class-restricted rows, then recompute both objectives through the
//! live activation graph with the discriminators frozen and take one Adam
//! step on the classifier for
//!
//! ```text
//! T_loss = E_loss + lambda * (D_JS - D_JS^L)
//! ```
//!
//! The baselines reuse the same loop: `none`/`dropout` skip the adversarial
//! machinery entirely, `decov` swaps in the covariance penalty, and `udm` is
//! literally this loop with the conditional branch disabled and its own
//! weight. Discriminator parameters are verified bitwise-unchanged across
//! every classifier step.

use std::f64::consts::LN_2;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Dataset, MixtureSpec, Split};
use crate::estim::{
    expand_labels_for_spatial, js_objective, shuffle_with_rng, ActivationBatch, Discriminator,
    EstimError, JS_OFFSET,
};
use crate::metrics::{self, MetricsError};
use crate::seeds;
use crate::tensor::{Adam, Tensor, TensorError};

/// Probe batches (accuracy and correlation-gap evaluation) are drawn with
/// this fixed master seed so every method sees the same probe rows.
const PROBE_SEED: u64 = 0x5eed_0001;
/// Held-out probe size for periodic evaluation.
const PROBE_ROWS: usize = 2048;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Estim(#[from] EstimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] data::DataError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Dropout,
    Decov,
    Udm,
    Ldm,
}

impl std::fmt::Display for Regularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regularizer::None => "none",
            Regularizer::Dropout => "dropout",
            Regularizer::Decov => "decov",
            Regularizer::Udm => "udm",
            Regularizer::Ldm => "ldm",
        };
        f.write_str(s)
    }
}

/// Network shape. The regularized layer is the ReLU hidden layer for the
/// MLP and the last pool layer (viewed filter-wise) for the CNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Arch {
    Mlp {
        input: usize,
        hidden: usize,
        classes: usize,
    },
    SmallCnn {
        in_channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        classes: usize,
    },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Mlp { input: 784, hidden: 32, classes: 10 }
    }
}

impl Arch {
    pub fn classes(&self) -> usize {
        match *self {
            Arch::Mlp { classes, .. } | Arch::SmallCnn { classes, .. } => classes,
        }
    }

    pub fn input_width(&self) -> usize {
        match *self {
            Arch::Mlp { input, .. } => input,
            Arch::SmallCnn { in_channels, height, width, .. } => in_channels * height * width,
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source")]
pub enum DataSpec {
    /// Official IDX files from the data directory, with the noise protocol.
    Mnist {
        #[serde(default = "default_true")]
        noise_train: bool,
        #[serde(default = "default_true")]
        noise_test: bool,
        #[serde(default)]
        noise_seed: u64,
    },
    /// Gaussian-mixture fixtures, fast enough for tests.
    Synth {
        train: MixtureSpec,
        test: MixtureSpec,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_true() -> bool {
    true
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Mnist { noise_train: true, noise_test: true, noise_seed: 0 }
    }
}

/// Full run configuration; serialized as the `train` subcommand's JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Regularizer,
    /// Balance weight for the diversity regularizer.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_disc_lr")]
    pub disc_learning_rate: f64,
    /// Discriminator updates per classifier update (applies to T1 and T2).
    #[serde(default = "default_disc_updates")]
    pub disc_updates: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: Arch,
    #[serde(default = "default_aux_weight")]
    pub decov_weight: f64,
    #[serde(default = "default_aux_weight")]
    pub udm_weight: f64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Cap on regularizer rows per step for the conv path.
    #[serde(default = "default_conv_rows")]
    pub conv_reg_max_rows: usize,
    /// How batches are drawn from the training set.
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub data: DataSpec,
}

/// Batch sampling discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// K uniform draws per step, with replacement across steps.
    #[default]
    Uniform,
    /// Shuffled epochs, every sample once per pass.
    Epoch,
}

fn default_lambda() -> f64 {
    0.7
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_disc_lr() -> f64 {
    1e-4
}
fn default_disc_updates() -> usize {
    4
}
fn default_iterations() -> usize {
    1000
}
fn default_eval_every() -> usize {
    50
}
fn default_aux_weight() -> f64 {
    0.1
}
fn default_dropout() -> f64 {
    0.5
}
fn default_conv_rows() -> usize {
    1024
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.learning_rate <= 0.0 || self.disc_learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.iterations == 0 || self.eval_every == 0 {
            return Err(TrainError::Config("iterations and eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::Config(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Classifier with a designated regularized layer.
pub enum Model {
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    SmallCnn {
        conv_w: Tensor,
        conv_b: Tensor,
        fc_w: Tensor,
        fc_b: Tensor,
        in_channels: usize,
        height: usize,
        width: usize,
    },
}

/// Forward products: the activations feeding the regularizer (one row per
/// sample for the MLP, one per spatial position for the CNN) and the logits.
pub struct Activations {
    pub reg: Tensor,
    pub logits: Tensor,
    /// Spatial positions per sample in `reg` (1 for dense layers).
    pub positions: usize,
}

impl Model {
    pub fn new(arch: &Arch, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        match *arch {
            Arch::Mlp { input, hidden, classes } => {
                if input == 0 || hidden < 2 || classes < 2 {
                    return Err(TrainError::Config(format!("bad MLP shape {arch:?}")));
                }
                // ReLU hidden layer: sqrt(2/fan_in); softmax output: sqrt(1/fan_in).
                Ok(Model::Mlp {
                    w1: Tensor::randn_param(&[input, hidden], (2.0 / input as f64).sqrt(), rng),
                    b1: Tensor::zeros_param(&[hidden]),
                    w2: Tensor::randn_param(&[hidden, classes], (1.0 / hidden as f64).sqrt(), rng),
                    b2: Tensor::zeros_param(&[classes]),
                })
            }
            Arch::SmallCnn { in_channels, height, width, filters, kernel, classes } => {
                if filters < 2 || kernel == 0 || kernel > height.min(width) || classes < 2 {
                    return Err(TrainError::Config(format!("bad CNN shape {arch:?}")));
                }
                let (oh, ow) = (height - kernel + 1, width - kernel + 1);
                if oh < 2 || ow < 2 {
                    return Err(TrainError::Config("conv output too small to pool".into()));
                }
                let fan_in = in_channels * kernel * kernel;
                let flat = filters * (oh / 2) * (ow / 2);
                Ok(Model::SmallCnn {
                    conv_w: Tensor::randn_param(
                        &[filters, in_channels, kernel, kernel],
                        (2.0 / fan_in as f64).sqrt(),
                        rng,
                    ),
                    conv_b: Tensor::zeros_param(&[filters]),
                    fc_w: Tensor::randn_param(&[flat, classes], (1.0 / flat as f64).sqrt(), rng),
                    fc_b: Tensor::zeros_param(&[classes]),
                    in_channels,
                    height,
                    width,
                })
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Model::Mlp { w1, b1, w2, b2 } => vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()],
            Model::SmallCnn { conv_w, conv_b, fc_w, fc_b, .. } => {
                vec![conv_w.clone(), conv_b.clone(), fc_w.clone(), fc_b.clone()]
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        match self {
            Model::Mlp { w1, b1, w2, b2 } => vec![
                ("w1".into(), w1.clone()),
                ("b1".into(), b1.clone()),
                ("w2".into(), w2.clone()),
                ("b2".into(), b2.clone()),
            ],
            Model::SmallCnn { conv_w, conv_b, fc_w, fc_b, .. } => vec![
                ("conv_w".into(), conv_w.clone()),
                ("conv_b".into(), conv_b.clone()),
                ("fc_w".into(), fc_w.clone()),
                ("fc_b".into(), fc_b.clone()),
            ],
        }
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Units feeding the regularizer (MLP hidden width or CNN filter count).
    pub fn regularized_units(&self) -> usize {
        match self {
            Model::Mlp { w1, .. } => w1.shape()[1],
            Model::SmallCnn { conv_w, .. } => conv_w.shape()[0],
        }
    }

    /// Forward pass on a flat [K, d] feature batch. `dropout` carries the
    /// rate and the mask stream, used only in training mode.
    pub fn forward(
        &self,
        x: &Tensor,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Activations, TrainError> {
        match self {
            Model::Mlp { w1, b1, w2, b2 } => {
                let hidden = x.matmul(w1)?.add_row_bias(b1)?.relu();
                let classified = match dropout {
                    Some((rate, rng)) => apply_dropout(&hidden, rate, rng)?,
                    None => hidden.clone(),
                };
                let logits = classified.matmul(w2)?.add_row_bias(b2)?;
                Ok(Activations { reg: hidden, logits, positions: 1 })
            }
            Model::SmallCnn { conv_w, conv_b, fc_w, fc_b, in_channels, height, width } => {
                let k = x.shape()[0];
                let images = x.reshape(&[k, *in_channels, *height, *width])?;
                let pool = images.conv2d(conv_w, conv_b)?.relu().max_pool2()?;
                let pool_shape = pool.shape();
                let positions = pool_shape[2] * pool_shape[3];
                let reg = pool.filters_to_batch()?;
                let flat = pool.reshape(&[k, pool_shape[1] * positions])?;
                let classified = match dropout {
                    Some((rate, rng)) => apply_dropout(&flat, rate, rng)?,
                    None => flat,
                };
                let logits = classified.matmul(fc_w)?.add_row_bias(fc_b)?;
                Ok(Activations { reg, logits, positions })
            }
        }
    }
}

/// Inverted dropout: keep with probability 1-rate, scale kept units by
/// 1/(1-rate) so inference needs no rescaling.
fn apply_dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor, TrainError> {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, &x.shape())?;
    Ok(x.mul(&mask)?)
}

/// T_loss = E_loss + lambda * (D_JS - D_JS^L), differentiable through the
/// activation path.
pub fn total_loss(
    e_loss: &Tensor,
    d_js: &Tensor,
    d_js_l: &Tensor,
    lambda: f64,
) -> Result<Tensor, TrainError> {
    if lambda < 0.0 {
        return Err(TrainError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(e_loss.add(&d_js.sub(d_js_l)?.scale(lambda))?)
}

/// Off-diagonal covariance penalty of the batch activations.
pub fn decov_penalty(batch: &ActivationBatch) -> Result<Tensor, TrainError> {
    Ok(batch.values().decov()?)
}

/// Per-iteration losses.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub e_loss: f64,
    /// Unconditional JS estimate (shifted: independence reads 0).
    pub d_js: f64,
    /// Class-conditional JS estimate (shifted).
    pub d_js_l: f64,
    pub t_loss: f64,
    /// True when every class in the batch was a singleton and the
    /// conditional branch had to be skipped.
    pub conditional_skipped: bool,
}

/// One evaluation row; the CSV schema is this struct in field order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub e_loss: f64,
    pub d_js: f64,
    pub d_js_l: f64,
    pub t_loss: f64,
    pub corre: f64,
    pub corre_cond: f64,
    pub corre_gap: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Everything a finished run reports.
#[derive(Serialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<EvalRow>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_gap: f64,
    pub conditional_skips: usize,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Fixed-order CSV of the evaluation rows.
    pub fn rows_to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,e_loss,d_js,d_js_l,t_loss,corre,corre_cond,corre_gap,train_acc,test_acc\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.e_loss,
                r.d_js,
                r.d_js_l,
                r.t_loss,
                r.corre,
                r.corre_cond,
                r.corre_gap,
                r.train_acc,
                r.test_acc
            ));
        }
        out
    }
}

/// Training state: classifier, optimizer, discriminators, RNG streams.
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    opt: Adam,
    t1: Option<Discriminator>,
    t2: Option<Discriminator>,
    /// Disables the conditional branch; true only for `ldm`.
    conditional: bool,
    /// Weight multiplying the adversarial terms (lambda or the UDM weight).
    adv_weight: f64,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    subsample_rng: ChaCha8Rng,
    iteration: usize,
    pub conditional_skips: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut init_rng = seeds::stream(config.seed, "model-init", 0);
        let model = Model::new(&config.arch, &mut init_rng)?;
        let opt = Adam::new(model.params(), config.learning_rate);
        let adversarial = matches!(config.method, Regularizer::Udm | Regularizer::Ldm);
        let units = model.regularized_units();
        let (t1, t2) = if adversarial {
            (
                Some(Discriminator::with_config(
                    units,
                    crate::estim::DISC_HIDDEN,
                    config.disc_learning_rate,
                    seeds::derive(config.seed, "t1-init", 0),
                )),
                Some(Discriminator::with_config(
                    units,
                    crate::estim::DISC_HIDDEN,
                    config.disc_learning_rate,
                    seeds::derive(config.seed, "t2-init", 0),
                )),
            )
        } else {
            (None, None)
        };
        let conditional = matches!(config.method, Regularizer::Ldm);
        let adv_weight = match config.method {
            Regularizer::Ldm => config.lambda,
            Regularizer::Udm => config.udm_weight,
            _ => 0.0,
        };
        Ok(Trainer {
            shuffle_rng: seeds::stream(config.seed, "shuffles", 0),
            dropout_rng: seeds::stream(config.seed, "dropout", 0),
            subsample_rng: seeds::stream(config.seed, "conv-subsample", 0),
            model,
            opt,
            t1,
            t2,
            conditional,
            adv_weight,
            iteration: 0,
            conditional_skips: 0,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn discriminators(&self) -> (Option<&Discriminator>, Option<&Discriminator>) {
        (self.t1.as_ref(), self.t2.as_ref())
    }

    /// Test hook: run the LDM code path with the conditional branch forced
    /// off (what `udm` configures implicitly).
    #[doc(hidden)]
    pub fn force_conditional(&mut self, enabled: bool) {
        self.conditional = enabled;
    }

    /// Regularizer-layer rows for the discriminators, with per-row labels;
    /// conv activations are capped at `conv_reg_max_rows` rows.
    fn reg_rows(
        &mut self,
        reg: &Tensor,
        labels: &[usize],
        positions: usize,
    ) -> Result<(Tensor, Vec<usize>), TrainError> {
        let expanded;
        let row_labels: &[usize] = if positions == 1 {
            labels
        } else {
            expanded = expand_labels_for_spatial(labels, positions);
            &expanded
        };
        let rows = reg.shape()[0];
        if rows <= self.config.conv_reg_max_rows {
            return Ok((reg.clone(), row_labels.to_vec()));
        }
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(&mut self.subsample_rng);
        let mut keep: Vec<usize> = idx.into_iter().take(self.config.conv_reg_max_rows).collect();
        keep.sort_unstable();
        let kept_labels = keep.iter().map(|&r| row_labels[r]).collect();
        Ok((reg.gather_rows(&keep)?, kept_labels))
    }

    /// One full training step (Algorithm lines: forward, T1 updates,
    /// per-class T2 updates, recompute, classifier step).
    pub fn step(&mut self, features: &[f64], labels: &[usize]) -> Result<StepMetrics, TrainError> {
        self.iteration += 1;
        let k = labels.len();
        let x = Tensor::from_vec(features.to_vec(), &[k, self.config.arch.input_width()])?;
        let dropout = if self.config.method == Regularizer::Dropout {
            Some((self.config.dropout_rate, &mut self.dropout_rng))
        } else {
            None
        };
        let acts = self.model.forward(&x, dropout)?;
        let e_loss = acts.logits.softmax_cross_entropy(labels)?;

        let mut d_js_value = 0.0;
        let mut d_js_l_value = 0.0;
        let mut conditional_skipped = false;
        let t_loss;

        match self.config.method {
            Regularizer::None | Regularizer::Dropout => {
                t_loss = e_loss.clone();
            }
            Regularizer::Decov => {
                let batch = ActivationBatch::from_tensor(acts.reg.clone(), None)?;
                let penalty = decov_penalty(&batch)?;
                t_loss = e_loss.add(&penalty.scale(self.config.decov_weight))?;
            }
            Regularizer::Udm | Regularizer::Ldm => {
                let (reg_rows, row_labels) = self.reg_rows(&acts.reg, labels, acts.positions)?;
                let detached = reg_rows.detach();

                // -- maximization phase: T1 on joint vs marginal shuffles --
                let t1 = self.t1.as_mut().expect("adversarial method has T1");
                t1.zero_grads();
                for _ in 0..self.config.disc_updates {
                    let shuffled = shuffle_with_rng(&detached, &mut self.shuffle_rng)?;
                    let obj = js_objective(t1, &detached, &shuffled)?;
                    t1.maximize_step(&obj)?;
                }

                // -- maximization phase: shared T2, one pass per class and round --
                let eligible: Vec<(usize, Vec<usize>)> = {
                    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> =
                        std::collections::BTreeMap::new();
                    for (row, &y) in row_labels.iter().enumerate() {
                        by_class.entry(y).or_default().push(row);
                    }
                    by_class.into_iter().filter(|(_, rows)| rows.len() >= 2).collect()
                };
                if self.conditional {
                    if eligible.is_empty() {
                        conditional_skipped = true;
                        self.conditional_skips += 1;
                    } else {
                        let t2 = self.t2.as_mut().expect("adversarial method has T2");
                        t2.zero_grads();
                        for _ in 0..self.config.disc_updates {
                            for (_, rows) in &eligible {
                                let class_det = detached.gather_rows(rows)?;
                                let shuffled = shuffle_with_rng(&class_det, &mut self.shuffle_rng)?;
                                let obj = js_objective(t2, &class_det, &shuffled)?;
                                t2.maximize_step(&obj)?;
                            }
                        }
                    }
                }

                // -- recompute through the live graph, discriminators frozen --
                let before: Vec<Vec<f64>> = self
                    .t1
                    .iter()
                    .chain(self.t2.iter())
                    .flat_map(|d| d.params())
                    .map(|p| p.data())
                    .collect();

                let t1 = self.t1.as_ref().expect("adversarial method has T1");
                let shuffled = shuffle_with_rng(&reg_rows, &mut self.shuffle_rng)?;
                let d_js_raw = js_objective(t1, &reg_rows, &shuffled)?;
                d_js_value = d_js_raw.item() + JS_OFFSET;

                let d_js_l_raw = if self.conditional && !eligible.is_empty() {
                    let t2 = self.t2.as_ref().expect("adversarial method has T2");
                    let total: usize = eligible.iter().map(|(_, r)| r.len()).sum();
                    let mut weighted: Option<Tensor> = None;
                    for (_, rows) in &eligible {
                        let class_rows = reg_rows.gather_rows(rows)?;
                        let shuffled = shuffle_with_rng(&class_rows, &mut self.shuffle_rng)?;
                        let obj = js_objective(t2, &class_rows, &shuffled)?;
                        let prior = rows.len() as f64 / total as f64;
                        let term = obj.scale(prior);
                        weighted = Some(match weighted {
                            Some(acc) => acc.add(&term)?,
                            None => term,
                        });
                    }
                    let raw = weighted.expect("eligible classes are nonempty");
                    d_js_l_value = raw.item() + JS_OFFSET;
                    raw
                } else {
                    Tensor::scalar(0.0)
                };

                // With every retained class the +2 log 2 shifts cancel in the
                // difference; using raw objectives keeps that exact.
                let adv = if self.conditional && !eligible.is_empty() {
                    d_js_raw.sub(&d_js_l_raw)?
                } else {
                    d_js_raw
                };
                t_loss = e_loss.add(&adv.scale(self.adv_weight))?;

                // classifier step must not move the discriminators
                self.model.zero_grads();
                t_loss.backward()?;
                self.opt.step()?;
                let after: Vec<Vec<f64>> = self
                    .t1
                    .iter()
                    .chain(self.t2.iter())
                    .flat_map(|d| d.params())
                    .map(|p| p.data())
                    .collect();
                if before != after {
                    return Err(TrainError::Invariant(
                        "discriminator parameters changed during the classifier step".into(),
                    ));
                }
                // stale adversarial gradients must not leak into the next
                // maximization phase
                for d in self.t1.iter().chain(self.t2.iter()) {
                    d.zero_grads();
                }
                return Ok(StepMetrics {
                    iteration: self.iteration,
                    e_loss: e_loss.item(),
                    d_js: d_js_value,
                    d_js_l: d_js_l_value,
                    t_loss: t_loss.item(),
                    conditional_skipped,
                });
            }
        }

        self.model.zero_grads();
        t_loss.backward()?;
        self.opt.step()?;
        Ok(StepMetrics {
            iteration: self.iteration,
            e_loss: e_loss.item(),
            d_js: d_js_value,
            d_js_l: d_js_l_value,
            t_loss: t_loss.item(),
            conditional_skipped,
        })
    }

    /// Inference logits (no dropout, no graph bookkeeping needed by callers).
    pub fn infer_logits(&self, features: &[f64], rows: usize) -> Result<Tensor, TrainError> {
        let x = Tensor::from_vec(features.to_vec(), &[rows, self.config.arch.input_width()])?;
        Ok(self.model.forward(&x, None)?.logits)
    }

    /// Regularized-layer activations in inference mode, labels expanded to
    /// rows for the conv path.
    pub fn infer_reg_batch(
        &self,
        features: &[f64],
        labels: &[usize],
    ) -> Result<ActivationBatch, TrainError> {
        let x = Tensor::from_vec(features.to_vec(), &[labels.len(), self.config.arch.input_width()])?;
        let acts = self.model.forward(&x, None)?;
        let row_labels = if acts.positions == 1 {
            labels.to_vec()
        } else {
            expand_labels_for_spatial(labels, acts.positions)
        };
        Ok(ActivationBatch::from_tensor(acts.reg.detach(), Some(row_labels))?)
    }
}

/// Deterministic batch index stream. Batches are sampled uniformly from the
/// training set (each step draws K indices with replacement across steps),
/// the literal reading of "sample a batch of K data vectors"; an
/// epoch-shuffled mode exists for completeness.
struct BatchStream {
    rows: usize,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
    sampling: Sampling,
}

impl BatchStream {
    fn new(rows: usize, batch: usize, sampling: Sampling, rng: ChaCha8Rng) -> Self {
        BatchStream { rows, order: (0..rows).collect(), cursor: rows, batch, rng, sampling }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match self.sampling {
            Sampling::Uniform => {
                (0..self.batch).map(|_| self.rng.random_range(0..self.rows)).collect()
            }
            Sampling::Epoch => {
                if self.cursor + self.batch > self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let slice = self.order[self.cursor..self.cursor + self.batch].to_vec();
                self.cursor += self.batch;
                slice
            }
        }
    }
}

fn probe_indices(rows: usize, tag: &str) -> Vec<usize> {
    let mut rng = seeds::stream(PROBE_SEED, tag, rows as u64);
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut rng);
    idx.truncate(PROBE_ROWS.min(rows));
    idx
}

/// Full training run with periodic evaluation and end-of-budget reporting.
pub fn run_experiment(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunRecord, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let classes = config.arch.classes();
    if train.cols != config.arch.input_width() || test.cols != config.arch.input_width() {
        return Err(TrainError::Data(format!(
            "dataset width {} does not match architecture input {}",
            train.cols,
            config.arch.input_width()
        )));
    }
    if train.labels.iter().chain(&test.labels).any(|&y| y >= classes) {
        return Err(TrainError::Data(format!("labels exceed {classes} classes")));
    }
    if train.rows < config.batch_size {
        return Err(TrainError::Data(format!(
            "training set has {} rows, batch size is {}",
            train.rows, config.batch_size
        )));
    }

    let mut trainer = Trainer::new(config.clone())?;
    let mut batches = BatchStream::new(
        train.rows,
        config.batch_size,
        config.sampling,
        seeds::stream(config.seed, "batches", 0),
    );

    let train_probe = probe_indices(train.rows, "train-probe");
    let test_probe = probe_indices(test.rows, "test-probe");
    let probe_features_train = train.feature_rows(&train_probe);
    let probe_labels_train = train.label_rows(&train_probe);
    let probe_features_test = test.feature_rows(&test_probe);
    let probe_labels_test = test.label_rows(&test_probe);

    let mut rows = Vec::new();
    for _ in 0..config.iterations {
        let batch_idx = batches.next_batch();
        let features = train.feature_rows(&batch_idx);
        let labels = train.label_rows(&batch_idx);
        let metrics_row = trainer.step(&features, &labels)?;

        if metrics_row.iteration % config.eval_every == 0 {
            let train_logits = trainer.infer_logits(&probe_features_train, probe_labels_train.len())?;
            let test_logits = trainer.infer_logits(&probe_features_test, probe_labels_test.len())?;
            let train_acc = metrics::accuracy(&train_logits, &probe_labels_train)?;
            let test_acc = metrics::accuracy(&test_logits, &probe_labels_test)?;
            let probe_batch = trainer.infer_reg_batch(&probe_features_test, &probe_labels_test)?;
            let corre = metrics::correlation_index(&probe_batch)?;
            let gap = metrics::correlation_gap(&probe_batch)?;
            rows.push(EvalRow {
                iteration: metrics_row.iteration,
                e_loss: metrics_row.e_loss,
                d_js: metrics_row.d_js,
                d_js_l: metrics_row.d_js_l,
                t_loss: metrics_row.t_loss,
                corre,
                corre_cond: corre - gap,
                corre_gap: gap,
                train_acc,
                test_acc,
            });
        }
    }

    // end-of-budget accuracies on the full splits
    let final_train_accuracy = chunked_accuracy(&trainer, train)?;
    let final_test_accuracy = chunked_accuracy(&trainer, test)?;
    Ok(RunRecord {
        config: config.clone(),
        rows,
        final_train_accuracy,
        final_test_accuracy,
        final_gap: final_train_accuracy - final_test_accuracy,
        conditional_skips: trainer.conditional_skips,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Accuracy over a full dataset, evaluated in slices to bound memory.
fn chunked_accuracy(trainer: &Trainer, data: &Dataset) -> Result<f64, TrainError> {
    let chunk = 4096;
    let mut correct_weighted = 0.0;
    let mut row = 0;
    while row < data.rows {
        let hi = (row + chunk).min(data.rows);
        let idx: Vec<usize> = (row..hi).collect();
        let logits = trainer.infer_logits(&data.feature_rows(&idx), idx.len())?;
        let acc = metrics::accuracy(&logits, &data.label_rows(&idx))?;
        correct_weighted += acc * idx.len() as f64;
        row = hi;
    }
    Ok(correct_weighted / data.rows as f64)
}

/// Materialize the datasets a config asks for. `data_dir` is only consulted
/// for MNIST.
pub fn prepare_data(config: &TrainConfig, data_dir: &Path) -> Result<(Dataset, Dataset), TrainError> {
    match &config.data {
        DataSpec::Mnist { noise_train, noise_test, noise_seed } => {
            let train = data::load_mnist_split(data_dir, Split::Train)?;
            let test = data::load_mnist_split(data_dir, Split::Test)?;
            let train = if *noise_train {
                data::add_gaussian_noise(&train, seeds::derive(*noise_seed, "train-noise", 0))
            } else {
                train
            };
            let test = if *noise_test {
                data::add_gaussian_noise(&test, seeds::derive(*noise_seed, "test-noise", 0))
            } else {
                test
            };
            Ok((train, test))
        }
        DataSpec::Synth { train, test, data_seed } => {
            let mut train_set = data::synth_mixture(train, seeds::derive(*data_seed, "synth-train", 0))?;
            train_set.split = Split::Train;
            let mut test_set = data::synth_mixture(test, seeds::derive(*data_seed, "synth-test", 0))?;
            test_set.split = Split::Test;
            Ok((train_set, test_set))
        }
    }
}

/// The shifted objective value a perfectly confused discriminator reports.
pub const INDEPENDENT_OBJECTIVE: f64 = 0.0;
/// Ceiling of the shifted objective (2 log 2).
pub const OBJECTIVE_CEILING: f64 = 2.0 * LN_2;
