//! Exhaustive verification of the mutual-information generalization bound
//! and its diversity decomposition on fully enumerable toy learning
//! problems.
//!
//! A toy problem fixes a finite instance space, deterministic hidden maps,
//! a finite hypothesis set, a bounded loss, and an explicit stochastic
//! learning rule P(W|S). Every dataset of size n is enumerated, so the
//! generalization gap, I(f(S); W), and every entropy in the decomposition
//! are exact numbers rather than estimates. Learning rules are tables on
//! purpose: executing a real optimizer would make I(f(S); W) intractable,
//! which is the very reason the diversity decomposition exists.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info::{entropy_pmf, DiscreteJoint, LogBase, OracleError};

/// Enumeration refuses above |Z|^n * |W| of this size.
pub const MAX_ENUMERATION: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("|Z|^n * |W| = {0} exceeds the enumeration cap of {MAX_ENUMERATION}")]
    EnumerationCap(usize),
    #[error("rule row {row} sums to {sum}, expected 1 within 1e-12")]
    RuleRowNotNormalized { row: usize, sum: f64 },
    #[error("rule table has {got} entries, expected {expected}")]
    RuleShape { expected: usize, got: usize },
    #[error("loss value {value} outside declared range [{lo}, {hi}]")]
    LossOutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("loss table has {got} entries, expected {expected}")]
    LossShape { expected: usize, got: usize },
    #[error("hidden map {unit} has {got} entries for {expected} inputs, or a value out of range")]
    BadHiddenMap { unit: usize, expected: usize, got: usize },
    #[error("loss range is empty: [{lo}, {hi}]")]
    EmptyLossRange { lo: f64, hi: f64 },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("problem file: {0}")]
    File(String),
}

/// How the learning rule is specified.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSpec {
    /// Full P(W|S) table, |Z|^n rows of |W| masses, datasets in
    /// lexicographic order (first sample most significant).
    Table(Vec<f64>),
    /// Same distribution over W for every dataset.
    Constant(Vec<f64>),
    /// Uniform over the empirical-risk minimizers of each dataset.
    Erm,
}

/// Fully enumerable learning problem.
///
/// Serialized form matches the field names below; `loss` is flattened over
/// (joint hidden value, label, hypothesis), so the loss can only depend on x
/// through the hidden maps, which is exactly the f(Z) = (h(X), Y) contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyProblemSpec {
    pub x_size: usize,
    pub y_size: usize,
    /// P_Z over (x, y), row-major with y fastest.
    pub instance_pmf: Vec<f64>,
    pub unit_alphabets: Vec<usize>,
    /// One map per hidden unit: x -> alphabet value.
    pub hidden_maps: Vec<Vec<usize>>,
    pub hypotheses: usize,
    /// l(f(z), w) flattened over (hidden joint index, y, w).
    pub loss: Vec<f64>,
    pub loss_range: (f64, f64),
    pub rule: RuleSpec,
    pub n: usize,
}

pub struct ToyLearningProblem {
    spec: ToyProblemSpec,
    /// Resolved P(W|S) table.
    rule: Vec<f64>,
    /// Joint hidden index per x.
    hid_of_x: Vec<usize>,
    z_count: usize,
    dataset_count: usize,
}

impl ToyLearningProblem {
    pub fn new(spec: ToyProblemSpec) -> Result<Self, BoundError> {
        let z_count = spec.x_size * spec.y_size;
        let mut dataset_count: usize = 1;
        for _ in 0..spec.n {
            dataset_count = dataset_count.saturating_mul(z_count);
        }
        let total = dataset_count.saturating_mul(spec.hypotheses);
        if total > MAX_ENUMERATION {
            return Err(BoundError::EnumerationCap(total));
        }
        if spec.instance_pmf.len() != z_count {
            return Err(BoundError::File(format!(
                "instance pmf has {} entries for |Z| = {z_count}",
                spec.instance_pmf.len()
            )));
        }
        // reuse the oracle's pmf validation
        entropy_pmf(&spec.instance_pmf, LogBase::Nats)?;
        if spec.hidden_maps.len() != spec.unit_alphabets.len() {
            return Err(BoundError::BadHiddenMap {
                unit: spec.hidden_maps.len(),
                expected: spec.unit_alphabets.len(),
                got: spec.hidden_maps.len(),
            });
        }
        for (unit, map) in spec.hidden_maps.iter().enumerate() {
            if map.len() != spec.x_size || map.iter().any(|&v| v >= spec.unit_alphabets[unit]) {
                return Err(BoundError::BadHiddenMap {
                    unit,
                    expected: spec.x_size,
                    got: map.len(),
                });
            }
        }
        let hid_count: usize = spec.unit_alphabets.iter().product();
        let expected_loss = hid_count * spec.y_size * spec.hypotheses;
        if spec.loss.len() != expected_loss {
            return Err(BoundError::LossShape { expected: expected_loss, got: spec.loss.len() });
        }
        let (lo, hi) = spec.loss_range;
        if !(lo <= hi) {
            return Err(BoundError::EmptyLossRange { lo, hi });
        }
        for &v in &spec.loss {
            if v < lo || v > hi {
                return Err(BoundError::LossOutOfRange { value: v, lo, hi });
            }
        }
        let rule = match &spec.rule {
            RuleSpec::Table(t) => t.clone(),
            RuleSpec::Constant(dist) => {
                if dist.len() != spec.hypotheses {
                    return Err(BoundError::RuleShape { expected: spec.hypotheses, got: dist.len() });
                }
                let mut t = Vec::with_capacity(dataset_count * spec.hypotheses);
                for _ in 0..dataset_count {
                    t.extend_from_slice(dist);
                }
                t
            }
            RuleSpec::Erm => Vec::new(), // resolved below, needs hid_of_x
        };
        let hid_of_x: Vec<usize> = (0..spec.x_size)
            .map(|x| {
                let mut acc = 0usize;
                for (unit, map) in spec.hidden_maps.iter().enumerate() {
                    acc = acc * spec.unit_alphabets[unit] + map[x];
                }
                acc
            })
            .collect();
        let mut problem = ToyLearningProblem { spec, rule, hid_of_x, z_count, dataset_count };
        if matches!(problem.spec.rule, RuleSpec::Erm) {
            problem.rule = problem.erm_table();
        }
        let expected_rule = problem.dataset_count * problem.spec.hypotheses;
        if problem.rule.len() != expected_rule {
            return Err(BoundError::RuleShape { expected: expected_rule, got: problem.rule.len() });
        }
        for row in 0..problem.dataset_count {
            let sum: f64 =
                problem.rule[row * problem.spec.hypotheses..(row + 1) * problem.spec.hypotheses].iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(BoundError::RuleRowNotNormalized { row, sum });
            }
        }
        Ok(problem)
    }

    pub fn spec(&self) -> &ToyProblemSpec {
        &self.spec
    }

    pub fn read_json(path: &Path) -> Result<Self, BoundError> {
        let f = File::open(path).map_err(|e| BoundError::File(format!("{}: {e}", path.display())))?;
        let spec: ToyProblemSpec = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| BoundError::File(format!("{}: {e}", path.display())))?;
        Self::new(spec)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), BoundError> {
        let f = File::create(path).map_err(|e| BoundError::File(format!("{}: {e}", path.display())))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.spec)
            .map_err(|e| BoundError::File(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    #[inline]
    fn loss_at(&self, hid: usize, y: usize, w: usize) -> f64 {
        self.spec.loss[(hid * self.spec.y_size + y) * self.spec.hypotheses + w]
    }

    /// Decode dataset index into z samples (most significant digit first).
    fn decode(&self, mut s_idx: usize) -> Vec<usize> {
        let mut zs = vec![0usize; self.spec.n];
        for k in (0..self.spec.n).rev() {
            zs[k] = s_idx % self.z_count;
            s_idx /= self.z_count;
        }
        zs
    }

    /// Probability of a dataset and its empirical risk per hypothesis.
    fn dataset_stats(&self, s_idx: usize) -> (f64, Vec<f64>) {
        let zs = self.decode(s_idx);
        let mut prob = 1.0;
        let mut risks = vec![0.0; self.spec.hypotheses];
        for &z in &zs {
            prob *= self.spec.instance_pmf[z];
            let (x, y) = (z / self.spec.y_size, z % self.spec.y_size);
            let hid = self.hid_of_x[x];
            for (w, r) in risks.iter_mut().enumerate() {
                *r += self.loss_at(hid, y, w);
            }
        }
        for r in risks.iter_mut() {
            *r /= self.spec.n as f64;
        }
        (prob, risks)
    }

    fn erm_table(&self) -> Vec<f64> {
        let wc = self.spec.hypotheses;
        let mut table = vec![0.0; self.dataset_count * wc];
        for s_idx in 0..self.dataset_count {
            let (_, risks) = self.dataset_stats(s_idx);
            let best = risks.iter().cloned().fold(f64::INFINITY, f64::min);
            let winners: Vec<usize> =
                (0..wc).filter(|&w| (risks[w] - best).abs() < 1e-12).collect();
            for &w in &winners {
                table[s_idx * wc + w] = 1.0 / winners.len() as f64;
            }
        }
        table
    }

    /// Marginal P_W induced by the rule.
    fn hypothesis_marginal(&self) -> Vec<f64> {
        let wc = self.spec.hypotheses;
        let mut pw = vec![0.0; wc];
        for s_idx in 0..self.dataset_count {
            let (prob, _) = self.dataset_stats(s_idx);
            for w in 0..wc {
                pw[w] += prob * self.rule[s_idx * wc + w];
            }
        }
        pw
    }

    /// Exact generalization gap g = E_{S (x) W}[L] - E_{(S,W)}[L].
    pub fn generalization_gap_exact(&self) -> Result<f64, BoundError> {
        let wc = self.spec.hypotheses;
        let pw = self.hypothesis_marginal();
        let mut joint_term = 0.0;
        let mut product_term = 0.0;
        for s_idx in 0..self.dataset_count {
            let (prob, risks) = self.dataset_stats(s_idx);
            if prob == 0.0 {
                continue;
            }
            for w in 0..wc {
                joint_term += prob * self.rule[s_idx * wc + w] * risks[w];
                product_term += prob * pw[w] * risks[w];
            }
        }
        Ok(product_term - joint_term)
    }

    /// Joint mass over (f(S), W) as a sorted map; datasets with the same
    /// hidden-value/label trace merge, exactly as f collapses them.
    fn f_s_w_joint(&self) -> BTreeMap<(Vec<usize>, usize), f64> {
        let wc = self.spec.hypotheses;
        let mut joint = BTreeMap::new();
        for s_idx in 0..self.dataset_count {
            let (prob, _) = self.dataset_stats(s_idx);
            if prob == 0.0 {
                continue;
            }
            let fkey: Vec<usize> = self
                .decode(s_idx)
                .iter()
                .map(|&z| {
                    let (x, y) = (z / self.spec.y_size, z % self.spec.y_size);
                    self.hid_of_x[x] * self.spec.y_size + y
                })
                .collect();
            for w in 0..wc {
                let mass = prob * self.rule[s_idx * wc + w];
                if mass > 0.0 {
                    *joint.entry((fkey.clone(), w)).or_insert(0.0) += mass;
                }
            }
        }
        joint
    }

    /// Exact I(f(S); W) in nats.
    pub fn mi_dataset_hypothesis(&self) -> Result<f64, BoundError> {
        let joint = self.f_s_w_joint();
        let mut pf: BTreeMap<&Vec<usize>, f64> = BTreeMap::new();
        let mut pw = vec![0.0; self.spec.hypotheses];
        for ((fkey, w), &mass) in &joint {
            *pf.entry(fkey).or_insert(0.0) += mass;
            pw[*w] += mass;
        }
        let mut mi = 0.0;
        for ((fkey, w), &mass) in &joint {
            mi += mass * (mass / (pf[fkey] * pw[*w])).ln();
        }
        Ok(mi.max(0.0).min(f64::INFINITY))
    }

    /// (|g|, sqrt(2 sigma^2 I(f(S);W) / n)) with sigma = (b-a)/2.
    pub fn lemma1_bound(&self) -> Result<(f64, f64), BoundError> {
        let g = self.generalization_gap_exact()?;
        let mi = self.mi_dataset_hypothesis()?;
        let sigma = (self.spec.loss_range.1 - self.spec.loss_range.0) / 2.0;
        let bound = (2.0 * sigma * sigma * mi / self.spec.n as f64).sqrt();
        Ok((g.abs(), bound))
    }

    /// Single-sample joint over (h_1, ..., h_m, Y) induced by P_Z.
    pub fn single_sample_joint(&self) -> Result<DiscreteJoint, BoundError> {
        let hid_count: usize = self.spec.unit_alphabets.iter().product();
        let mut pmf = vec![0.0; hid_count * self.spec.y_size];
        for x in 0..self.spec.x_size {
            for y in 0..self.spec.y_size {
                pmf[self.hid_of_x[x] * self.spec.y_size + y] +=
                    self.spec.instance_pmf[x * self.spec.y_size + y];
            }
        }
        Ok(DiscreteJoint::with_labels(&self.spec.unit_alphabets, self.spec.y_size, pmf)?)
    }

    /// Left side minus right side of the decomposition identity, both sides
    /// exact, compared on the radicands:
    ///
    /// I(f(S);W)/n  vs  I(h_1;..;h_m) - I(h_1;..;h_m|Y) - sum_i I(h_i;Y)
    ///                  + H(Y) + (H(W) - H(S_y, W | h(S_x)))/n.
    pub fn theorem1_residual(&self) -> Result<f64, BoundError> {
        let n = self.spec.n as f64;
        let lhs = self.mi_dataset_hypothesis()? / n;

        let single = self.single_sample_joint()?;
        let mi_units = single.multivariate_mi();
        let cond_mi = single.conditional_multivariate_mi()?;
        let mut per_unit_label = 0.0;
        for i in 0..self.spec.unit_alphabets.len() {
            per_unit_label += single.unit_label_mi(i)?;
        }
        let h_y = single.label_entropy()?;
        let h_w = entropy_pmf(&normalize(self.hypothesis_marginal()), LogBase::Nats)?;

        // H(S_y, W | h(S_x)) = H(h(S_x), S_y, W) - H(h(S_x))
        let mut triple: BTreeMap<(Vec<usize>, Vec<usize>, usize), f64> = BTreeMap::new();
        let mut hmarg: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let wc = self.spec.hypotheses;
        for s_idx in 0..self.dataset_count {
            let (prob, _) = self.dataset_stats(s_idx);
            if prob == 0.0 {
                continue;
            }
            let zs = self.decode(s_idx);
            let hkey: Vec<usize> = zs.iter().map(|&z| self.hid_of_x[z / self.spec.y_size]).collect();
            let ykey: Vec<usize> = zs.iter().map(|&z| z % self.spec.y_size).collect();
            *hmarg.entry(hkey.clone()).or_insert(0.0) += prob;
            for w in 0..wc {
                let mass = prob * self.rule[s_idx * wc + w];
                if mass > 0.0 {
                    *triple.entry((hkey.clone(), ykey.clone(), w)).or_insert(0.0) += mass;
                }
            }
        }
        let h_triple = -triple.values().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        let h_hidden = -hmarg.values().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        let h_cond = h_triple - h_hidden;

        let rhs = mi_units - cond_mi - per_unit_label + h_y + (h_w - h_cond) / n;
        Ok(lhs - rhs)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    }
    v
}

/// Dimension ranges for randomized toy problems.
#[derive(Debug, Clone)]
pub struct RandomProblemOptions {
    pub max_x: usize,
    pub max_y: usize,
    pub max_units: usize,
    pub max_unit_alphabet: usize,
    pub max_hypotheses: usize,
    pub max_n: usize,
    /// Restrict to 0-1 loss (sigma = 1/2).
    pub zero_one_loss: bool,
}

impl Default for RandomProblemOptions {
    fn default() -> Self {
        RandomProblemOptions {
            max_x: 4,
            max_y: 3,
            max_units: 2,
            max_unit_alphabet: 3,
            max_hypotheses: 4,
            max_n: 3,
            zero_one_loss: false,
        }
    }
}

/// Random fully enumerable problem: strictly positive instance pmf, random
/// hidden maps, and a random stochastic rule table.
pub fn random_problem(rng: &mut ChaCha8Rng, opts: &RandomProblemOptions) -> ToyLearningProblem {
    let x_size = rng.random_range(2..=opts.max_x);
    let y_size = rng.random_range(2..=opts.max_y);
    let m = rng.random_range(1..=opts.max_units);
    let unit_alphabets: Vec<usize> =
        (0..m).map(|_| rng.random_range(2..=opts.max_unit_alphabet)).collect();
    let hidden_maps: Vec<Vec<usize>> = unit_alphabets
        .iter()
        .map(|&a| (0..x_size).map(|_| rng.random_range(0..a)).collect())
        .collect();
    let instance_pmf = normalize((0..x_size * y_size).map(|_| rng.random::<f64>() + 0.1).collect());
    let hypotheses = rng.random_range(2..=opts.max_hypotheses);
    let n = rng.random_range(1..=opts.max_n);
    let hid_count: usize = unit_alphabets.iter().product();
    let loss: Vec<f64> = (0..hid_count * y_size * hypotheses)
        .map(|_| {
            if opts.zero_one_loss {
                f64::from(rng.random_range(0..2u8))
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let z_count = x_size * y_size;
    let dataset_count = z_count.pow(n as u32);
    let mut rule = Vec::with_capacity(dataset_count * hypotheses);
    for _ in 0..dataset_count {
        let row = normalize((0..hypotheses).map(|_| rng.random::<f64>() + 0.05).collect());
        rule.extend(row);
    }
    let spec = ToyProblemSpec {
        x_size,
        y_size,
        instance_pmf,
        unit_alphabets,
        hidden_maps,
        hypotheses,
        loss,
        loss_range: (0.0, 1.0),
        rule: RuleSpec::Table(rule),
        n,
    };
    ToyLearningProblem::new(spec).expect("randomly generated problem is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use approx::assert_relative_eq;
    use std::f64::consts::LN_2;

    /// Two datasets: x in {0,1} mapped straight through one binary unit,
    /// labels equal x, uniform P_Z, two constant hypotheses "predict 0" /
    /// "predict 1" under 0-1 loss.
    fn predictor_spec(rule: RuleSpec, n: usize) -> ToyProblemSpec {
        // loss[(hid, y, w)] = [w != y]
        let mut loss = vec![0.0; 2 * 2 * 2];
        for hid in 0..2 {
            for y in 0..2 {
                for w in 0..2 {
                    loss[(hid * 2 + y) * 2 + w] = if w == y { 0.0 } else { 1.0 };
                }
            }
        }
        ToyProblemSpec {
            x_size: 2,
            y_size: 2,
            instance_pmf: vec![0.5, 0.0, 0.0, 0.5], // y = x, uniform x
            unit_alphabets: vec![2],
            hidden_maps: vec![vec![0, 1]],
            hypotheses: 2,
            loss,
            loss_range: (0.0, 1.0),
            rule,
            n,
        }
    }

    #[test]
    fn constant_rule_has_zero_gap_and_zero_mi() {
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Constant(vec![0.5, 0.5]), 2)).unwrap();
        assert!(p.generalization_gap_exact().unwrap().abs() < 1e-15);
        assert!(p.mi_dataset_hypothesis().unwrap().abs() < 1e-15);
        let (g, bound) = p.lemma1_bound().unwrap();
        assert!(g < 1e-15 && bound < 1e-15);
    }

    #[test]
    fn identity_readout_of_two_uniform_datasets_has_ln2_mi() {
        // n = 1, rule copies the label into W: f(S) determines W exactly and
        // both are uniform over two values.
        let mut rule = vec![0.0; 4 * 2];
        for z in 0..4 {
            let y = z % 2;
            rule[z * 2 + y] = 1.0;
        }
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Table(rule), 1)).unwrap();
        assert_relative_eq!(p.mi_dataset_hypothesis().unwrap(), LN_2, epsilon = 1e-12);
    }

    #[test]
    fn erm_on_two_hypotheses_is_consistent_with_enumeration() {
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Erm, 2)).unwrap();
        let g = p.generalization_gap_exact().unwrap();
        let (gabs, bound) = p.lemma1_bound().unwrap();
        assert_relative_eq!(gabs, g.abs(), epsilon = 1e-15);
        assert!(gabs <= bound + 1e-12, "|g| = {gabs} > bound = {bound}");
        // ERM on separable data generalizes here but not perfectly: the
        // all-same-label datasets pick a one-sided hypothesis.
        assert!(g > 0.0);
    }

    #[test]
    fn memorizing_rule_has_positive_gap() {
        // Rule = ERM with n = 1: training loss 0 always, test loss positive.
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Erm, 1)).unwrap();
        let g = p.generalization_gap_exact().unwrap();
        assert!(g > 0.0);
        let (gabs, bound) = p.lemma1_bound().unwrap();
        assert!(gabs <= bound + 1e-12);
    }

    #[test]
    fn lemma1_arithmetic_example() {
        // sigma = 1/2, n = 4, I = 0.2 -> bound = sqrt(2*0.25*0.2/4).
        let bound = (2.0f64 * 0.25 * 0.2 / 4.0).sqrt();
        assert_relative_eq!(bound, 0.15811388300841897, epsilon = 1e-15);
    }

    #[test]
    fn theorem1_residual_constant_rule() {
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Constant(vec![0.3, 0.7]), 2)).unwrap();
        assert!(p.theorem1_residual().unwrap().abs() < 1e-9);
    }

    #[test]
    fn theorem1_residual_single_unit_convention() {
        // m = 1: multivariate MI terms are 0 by convention, identity holds.
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Erm, 2)).unwrap();
        assert!(p.theorem1_residual().unwrap().abs() < 1e-9);
    }

    #[test]
    fn theorem1_residual_randomized_suite() {
        let mut rng = seeds::stream(11, "bound-tests", 0);
        for _ in 0..20 {
            let p = random_problem(&mut rng, &RandomProblemOptions::default());
            let r = p.theorem1_residual().unwrap();
            assert!(r.abs() < 1e-9, "residual {r} on a random problem");
        }
    }

    #[test]
    fn lemma1_randomized_suite_zero_one_loss() {
        let opts = RandomProblemOptions { zero_one_loss: true, ..Default::default() };
        let mut rng = seeds::stream(13, "bound-tests", 1);
        for _ in 0..50 {
            let p = random_problem(&mut rng, &opts);
            let (g, bound) = p.lemma1_bound().unwrap();
            assert!(g <= bound + 1e-12, "|g| = {g} > bound = {bound}");
        }
    }

    #[test]
    fn loss_scaling_rescales_gap_and_bound_linearly() {
        let mut rng = seeds::stream(17, "bound-tests", 2);
        let base = random_problem(&mut rng, &RandomProblemOptions::default());
        let c = 3.5;
        let mut scaled_spec = base.spec().clone();
        scaled_spec.loss.iter_mut().for_each(|v| *v *= c);
        scaled_spec.loss_range = (scaled_spec.loss_range.0 * c, scaled_spec.loss_range.1 * c);
        let scaled = ToyLearningProblem::new(scaled_spec).unwrap();
        let (g1, b1) = base.lemma1_bound().unwrap();
        let (g2, b2) = scaled.lemma1_bound().unwrap();
        assert_relative_eq!(g2, c * g1, epsilon = 1e-10);
        assert_relative_eq!(b2, c * b1, epsilon = 1e-10);
        assert!(g2 <= b2 + 1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let mut spec = predictor_spec(RuleSpec::Constant(vec![0.5, 0.5]), 2);
        spec.n = 11; // 4^11 * 2 > 1e6
        assert!(matches!(
            ToyLearningProblem::new(spec),
            Err(BoundError::EnumerationCap(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let p = ToyLearningProblem::new(predictor_spec(RuleSpec::Erm, 2)).unwrap();
        p.write_json(&path).unwrap();
        let q = ToyLearningProblem::read_json(&path).unwrap();
        assert_relative_eq!(
            p.theorem1_residual().unwrap(),
            q.theorem1_residual().unwrap(),
            epsilon = 1e-15
        );
        assert_eq!(p.generalization_gap_exact().unwrap(), q.generalization_gap_exact().unwrap());
    }
}
