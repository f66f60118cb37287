//! Exact information quantities over finite discrete distributions.
//!
//! Everything here is computed by full enumeration of a dense joint mass
//! table, with no estimation anywhere: this module is the ground truth the
//! neural estimators are judged against. A [`DiscreteJoint`] covers m hidden
//! units (one finite alphabet each) and optionally a label axis, stored as
//! the last axis.
//!
//! Logarithms are natural by default with base 2 selectable. The
//! Hellman-Raviv error bound is the one place base 2 is mandatory: with a
//! uniform binary label and an uninformative representation the inequality
//! reads 1/2 <= H(Y)/2, which holds with equality in bits and fails in nats.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense joint tables larger than this are refused; the oracle is for desk
/// scale, not production scale.
pub const MAX_OUTCOMES: usize = 10_000_000;

/// Tolerance for "masses sum to one".
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("negative mass {mass} at flat index {index}")]
    NegativeMass { index: usize, mass: f64 },
    #[error("masses sum to {sum}, expected 1 within {MASS_TOL}")]
    NotNormalized { sum: f64 },
    #[error("joint would hold {0} outcomes, above the cap of {MAX_OUTCOMES}")]
    TooLarge(usize),
    #[error("pmf length {got} does not match alphabets ({expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("operation needs {needed}, joint has {got}")]
    WrongArity { needed: &'static str, got: String },
    #[error("joints have different alphabets: {0:?} vs {1:?}")]
    AlphabetMismatch(Vec<usize>, Vec<usize>),
    #[error("empty alphabet at axis {0}")]
    EmptyAlphabet(usize),
    #[error("joint file: {0}")]
    File(String),
}

/// Logarithm base for reported quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

impl LogBase {
    #[inline]
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Nats => x.ln(),
            LogBase::Bits => x.log2(),
        }
    }
}

/// Entropy of a raw mass vector with 0 log 0 := 0.
pub fn entropy_pmf(pmf: &[f64], base: LogBase) -> Result<f64, OracleError> {
    validate_pmf(pmf)?;
    Ok(entropy_unchecked(pmf, base))
}

fn entropy_unchecked(pmf: &[f64], base: LogBase) -> f64 {
    -pmf.iter().filter(|&&p| p > 0.0).map(|&p| p * base.log(p)).sum::<f64>()
}

fn validate_pmf(pmf: &[f64]) -> Result<(), OracleError> {
    for (index, &mass) in pmf.iter().enumerate() {
        if mass < 0.0 {
            return Err(OracleError::NegativeMass { index, mass });
        }
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > MASS_TOL {
        return Err(OracleError::NotNormalized { sum });
    }
    Ok(())
}

/// Exact probability mass table over a finite product alphabet
/// (m hidden-unit axes, then an optional label axis).
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    unit_sizes: Vec<usize>,
    classes: usize,
    pmf: Vec<f64>,
    base: LogBase,
}

/// On-disk form: `{"alphabets": [...], "labels": size or 0, "pmf": [...]}`,
/// pmf row-major with the label axis last.
#[derive(Serialize, Deserialize)]
struct JointFile {
    alphabets: Vec<usize>,
    labels: usize,
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    /// Joint over unit axes only.
    pub fn new(unit_sizes: &[usize], pmf: Vec<f64>) -> Result<Self, OracleError> {
        Self::with_labels(unit_sizes, 0, pmf)
    }

    /// Joint over unit axes plus a trailing label axis (`classes == 0` for
    /// unlabeled).
    pub fn with_labels(unit_sizes: &[usize], classes: usize, pmf: Vec<f64>) -> Result<Self, OracleError> {
        if let Some(axis) = unit_sizes.iter().position(|&s| s == 0) {
            return Err(OracleError::EmptyAlphabet(axis));
        }
        let mut expected: usize = 1;
        for &s in unit_sizes {
            expected = expected.saturating_mul(s);
        }
        if classes > 0 {
            expected = expected.saturating_mul(classes);
        }
        if expected > MAX_OUTCOMES {
            return Err(OracleError::TooLarge(expected));
        }
        if expected != pmf.len() {
            return Err(OracleError::LengthMismatch { expected, got: pmf.len() });
        }
        validate_pmf(&pmf)?;
        Ok(DiscreteJoint {
            unit_sizes: unit_sizes.to_vec(),
            classes,
            pmf,
            base: LogBase::Nats,
        })
    }

    pub fn with_base(mut self, base: LogBase) -> Self {
        self.base = base;
        self
    }

    pub fn base(&self) -> LogBase {
        self.base
    }

    pub fn unit_count(&self) -> usize {
        self.unit_sizes.len()
    }

    pub fn unit_sizes(&self) -> &[usize] {
        &self.unit_sizes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    fn has_labels(&self) -> Result<(), OracleError> {
        if self.classes == 0 {
            return Err(OracleError::WrongArity {
                needed: "a label axis",
                got: format!("{} units, no labels", self.unit_sizes.len()),
            });
        }
        Ok(())
    }

    /// All axis sizes including the label axis when present.
    fn axes(&self) -> Vec<usize> {
        let mut a = self.unit_sizes.clone();
        if self.classes > 0 {
            a.push(self.classes);
        }
        a
    }

    /// Marginal mass table over the chosen axes (indices into `axes()`),
    /// in the order given.
    pub fn marginal(&self, keep: &[usize]) -> Vec<f64> {
        let axes = self.axes();
        let out_len: usize = keep.iter().map(|&a| axes[a]).product();
        let mut out = vec![0.0; out_len.max(1)];
        let mut idx = vec![0usize; axes.len()];
        for &mass in &self.pmf {
            if mass != 0.0 {
                let mut o = 0usize;
                for &a in keep {
                    o = o * axes[a] + idx[a];
                }
                out[o] += mass;
            }
            // row-major increment, last axis fastest
            for a in (0..axes.len()).rev() {
                idx[a] += 1;
                if idx[a] < axes[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }

    /// Joint entropy of the full table.
    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.pmf, self.base)
    }

    /// Entropy of the label marginal.
    pub fn label_entropy(&self) -> Result<f64, OracleError> {
        self.has_labels()?;
        Ok(entropy_unchecked(&self.marginal(&[self.unit_sizes.len()]), self.base))
    }

    /// KL(joint of units || product of its own unit marginals); 0 for m = 1
    /// by convention (the divergence of a distribution to itself).
    /// The label axis, if any, is marginalized out first.
    pub fn multivariate_mi(&self) -> f64 {
        let m = self.unit_sizes.len();
        if m < 2 {
            return 0.0;
        }
        let units: Vec<usize> = (0..m).collect();
        let joint = self.marginal(&units);
        let marginals: Vec<Vec<f64>> = (0..m).map(|i| self.marginal(&[i])).collect();
        let mut idx = vec![0usize; m];
        let mut total = 0.0;
        for &p in &joint {
            if p > 0.0 {
                let mut q = 1.0;
                for (i, &v) in idx.iter().enumerate() {
                    q *= marginals[i][v];
                }
                total += p * self.base.log(p / q);
            }
            for a in (0..m).rev() {
                idx[a] += 1;
                if idx[a] < self.unit_sizes[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        total
    }

    /// Conditional slice of the unit joint given label `y`, with its prior.
    fn conditional_given_label(&self, y: usize) -> (f64, Vec<f64>) {
        let m = self.unit_sizes.len();
        let unit_len: usize = self.unit_sizes.iter().product();
        let mut slice = vec![0.0; unit_len];
        let c = self.classes;
        for u in 0..unit_len {
            slice[u] = self.pmf[u * c + y];
        }
        let prior: f64 = slice.iter().sum();
        if prior > 0.0 {
            for v in slice.iter_mut() {
                *v /= prior;
            }
        }
        let _ = m;
        (prior, slice)
    }

    /// Expectation over labels of the multivariate MI of the conditional
    /// unit distribution. Zero-probability classes contribute nothing.
    pub fn conditional_multivariate_mi(&self) -> Result<f64, OracleError> {
        self.has_labels()?;
        let mut total = 0.0;
        for y in 0..self.classes {
            let (prior, slice) = self.conditional_given_label(y);
            if prior > 0.0 {
                let cond = DiscreteJoint {
                    unit_sizes: self.unit_sizes.clone(),
                    classes: 0,
                    pmf: slice,
                    base: self.base,
                };
                total += prior * cond.multivariate_mi();
            }
        }
        Ok(total)
    }

    /// Label-based diversity: I(h_1;...;h_m) - I(h_1;...;h_m | Y).
    /// May be negative when units are marginally disentangled but
    /// class-conditionally correlated.
    pub fn d_lb_exact(&self) -> Result<f64, OracleError> {
        Ok(self.multivariate_mi() - self.conditional_multivariate_mi()?)
    }

    /// Mutual information between one unit and the label.
    pub fn unit_label_mi(&self, unit: usize) -> Result<f64, OracleError> {
        self.has_labels()?;
        let label_axis = self.unit_sizes.len();
        let joint = self.marginal(&[unit, label_axis]);
        let pu = self.marginal(&[unit]);
        let py = self.marginal(&[label_axis]);
        let c = self.classes;
        let mut total = 0.0;
        for (i, &p) in joint.iter().enumerate() {
            if p > 0.0 {
                total += p * self.base.log(p / (pu[i / c] * py[i % c]));
            }
        }
        Ok(total)
    }

    /// Mutual information between the whole unit tuple and the label.
    pub fn units_label_mi(&self) -> Result<f64, OracleError> {
        self.has_labels()?;
        let unit_len: usize = self.unit_sizes.iter().product();
        let c = self.classes;
        let units: Vec<usize> = (0..self.unit_sizes.len()).collect();
        let ph = self.marginal(&units);
        let py = self.marginal(&[self.unit_sizes.len()]);
        let mut total = 0.0;
        for u in 0..unit_len {
            for y in 0..c {
                let p = self.pmf[u * c + y];
                if p > 0.0 {
                    total += p * self.base.log(p / (ph[u] * py[y]));
                }
            }
        }
        Ok(total)
    }

    /// Both sides of the ensemble decomposition
    /// I(h;Y) = sum_i I(h_i;Y) + I(h_1;...;h_m|Y) - I(h_1;...;h_m),
    /// returned as LHS minus RHS. An exact identity: the residual should
    /// vanish to enumeration precision on any valid joint.
    pub fn ensemble_decomposition_residual(&self) -> Result<f64, OracleError> {
        let lhs = self.units_label_mi()?;
        let mut per_unit = 0.0;
        for i in 0..self.unit_sizes.len() {
            per_unit += self.unit_label_mi(i)?;
        }
        let rhs = per_unit + self.conditional_multivariate_mi()? - self.multivariate_mi();
        Ok(lhs - rhs)
    }

    /// Bayes error of predicting Y from the unit tuple, and the
    /// Hellman-Raviv bound (H(Y) - I(h;Y))/2 = H(Y|h)/2. Computed in bits
    /// regardless of the configured base; the inequality needs base 2.
    pub fn hellman_raviv_check(&self) -> Result<(f64, f64), OracleError> {
        self.has_labels()?;
        let unit_len: usize = self.unit_sizes.iter().product();
        let c = self.classes;
        let mut bayes_error = 0.0;
        let mut cond_entropy_bits = 0.0;
        for u in 0..unit_len {
            let cell = &self.pmf[u * c..(u + 1) * c];
            let ph: f64 = cell.iter().sum();
            if ph > 0.0 {
                let best = cell.iter().cloned().fold(0.0, f64::max);
                bayes_error += ph - best;
                for &pj in cell {
                    if pj > 0.0 {
                        cond_entropy_bits -= pj * (pj / ph).log2();
                    }
                }
            }
        }
        Ok((bayes_error, cond_entropy_bits / 2.0))
    }

    pub fn read_json(path: &Path) -> Result<Self, OracleError> {
        let f = File::open(path).map_err(|e| OracleError::File(format!("{}: {e}", path.display())))?;
        let file: JointFile = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| OracleError::File(format!("{}: {e}", path.display())))?;
        Self::with_labels(&file.alphabets, file.labels, file.pmf)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), OracleError> {
        let f = File::create(path).map_err(|e| OracleError::File(format!("{}: {e}", path.display())))?;
        let file = JointFile {
            alphabets: self.unit_sizes.clone(),
            labels: self.classes,
            pmf: self.pmf.clone(),
        };
        serde_json::to_writer(BufWriter::new(f), &file)
            .map_err(|e| OracleError::File(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// KL(p || q) = sum p log(p/q). Support violations (p > 0 where q = 0) are
/// reported as an explicit +infinity, not a float overflow.
pub fn kl_divergence(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<f64, OracleError> {
    if p.unit_sizes != q.unit_sizes || p.classes != q.classes {
        return Err(OracleError::AlphabetMismatch(p.axes(), q.axes()));
    }
    let mut total = 0.0;
    for (&pm, &qm) in p.pmf.iter().zip(&q.pmf) {
        if pm > 0.0 {
            if qm <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += pm * p.base.log(pm / qm);
        }
    }
    Ok(total)
}

/// Jensen-Shannon divergence, always finite, in [0, log 2].
pub fn js_divergence_exact(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<f64, OracleError> {
    if p.unit_sizes != q.unit_sizes || p.classes != q.classes {
        return Err(OracleError::AlphabetMismatch(p.axes(), q.axes()));
    }
    let mut total = 0.0;
    for (&pm, &qm) in p.pmf.iter().zip(&q.pmf) {
        let mm = 0.5 * (pm + qm);
        if pm > 0.0 {
            total += 0.5 * pm * p.base.log(pm / mm);
        }
        if qm > 0.0 {
            total += 0.5 * qm * p.base.log(qm / mm);
        }
    }
    Ok(total)
}

/// Product of the unit marginals of a joint, as a new joint over the same
/// unit axes (label axis dropped).
pub fn product_of_marginals(joint: &DiscreteJoint) -> DiscreteJoint {
    let m = joint.unit_count();
    let marginals: Vec<Vec<f64>> = (0..m).map(|i| joint.marginal(&[i])).collect();
    let len: usize = joint.unit_sizes().iter().product();
    let mut pmf = vec![0.0; len];
    let mut idx = vec![0usize; m];
    for v in pmf.iter_mut() {
        let mut q = 1.0;
        for (i, &u) in idx.iter().enumerate() {
            q *= marginals[i][u];
        }
        *v = q;
        for a in (0..m).rev() {
            idx[a] += 1;
            if idx[a] < joint.unit_sizes()[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    DiscreteJoint {
        unit_sizes: joint.unit_sizes().to_vec(),
        classes: 0,
        pmf,
        base: joint.base(),
    }
}
