//! Margin probability framework.
//!
//! Every loss in the family shares the non-target logit `s·cos θ_j` and differs
//! only in the target logit `h(θ_t)`:
//!
//! ```text
//! Softmax         h(θ) = cos θ
//! CombinedMargin  h(θ) = cos(m1·θ + m2) − m3
//! Linear          h(θ) = −a·θ + b
//! ```
//!
//! The probability of the target class is `e^{s·h(θ_t)} / (e^{s·h(θ_t)} + Σ_{j≠t} e^{s·cos θ_j})`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-38;

/// Tolerance used by the principle auditor when comparing logits.
pub const PRINCIPLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Softmax,
    CombinedMargin,
    Linear,
}

/// Parameters of one margin loss instance.
///
/// Fields unused by the chosen family are carried along but ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub family: Family,
    /// Multiplicative angular margin.
    #[serde(default = "one")]
    pub m1: f64,
    /// Additive angular margin (radians).
    #[serde(default)]
    pub m2: f64,
    /// Additive cosine margin.
    #[serde(default)]
    pub m3: f64,
    /// Linear slope (per radian).
    #[serde(default = "one")]
    pub a: f64,
    /// Linear intercept.
    #[serde(default = "one")]
    pub b: f64,
    /// Logit scale.
    pub s: f64,
}

fn one() -> f64 {
    1.0
}

impl MarginSpec {
    pub fn softmax(s: f64) -> Self {
        Self {
            family: Family::Softmax,
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
            a: 1.0,
            b: 1.0,
            s,
        }
    }

    pub fn combined(m1: f64, m2: f64, m3: f64, s: f64) -> Self {
        Self {
            family: Family::CombinedMargin,
            m1,
            m2,
            m3,
            ..Self::softmax(s)
        }
    }

    /// Additive angular margin instance, m2 = 0.5.
    pub fn arcface(s: f64) -> Self {
        Self::combined(1.0, 0.5, 0.0, s)
    }

    /// Additive cosine margin instance, m3 = 0.35.
    pub fn cosface(s: f64) -> Self {
        Self::combined(1.0, 0.0, 0.35, s)
    }

    /// Plain multiplicative angular margin, m1 = 4, without the piecewise
    /// re-parameterization.
    pub fn sphereface(s: f64) -> Self {
        Self::combined(4.0, 0.0, 0.0, s)
    }

    pub fn linear(a: f64, b: f64, s: f64) -> Self {
        Self {
            family: Family::Linear,
            a,
            b,
            ..Self::softmax(s)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LatseError::InvalidSpec(msg));
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad(format!("scale s must be positive, got {}", self.s));
        }
        match self.family {
            Family::Softmax => Ok(()),
            Family::Linear => {
                if !(self.a > 0.0 && self.a.is_finite()) || !self.b.is_finite() {
                    return bad(format!(
                        "linear slope must be positive and finite, got a={} b={}",
                        self.a, self.b
                    ));
                }
                Ok(())
            }
            Family::CombinedMargin => {
                if !(self.m1 >= 1.0) || !(self.m2 >= 0.0) || !(self.m3 >= 0.0) {
                    return bad(format!(
                        "combined margin needs m1>=1, m2>=0, m3>=0, got ({}, {}, {})",
                        self.m1, self.m2, self.m3
                    ));
                }
                Ok(())
            }
        }
    }

    /// Short human-readable label, used as a CSV column header.
    pub fn label(&self) -> String {
        match self.family {
            Family::Softmax => "softmax".to_string(),
            Family::CombinedMargin => {
                format!("combined(m1={},m2={},m3={})", self.m1, self.m2, self.m3)
            }
            Family::Linear => format!("linear(a={},b={})", self.a, self.b),
        }
    }

    /// Target logit without domain checking.
    #[inline]
    pub(crate) fn h(&self, theta: f64) -> f64 {
        match self.family {
            Family::Softmax => theta.cos(),
            Family::CombinedMargin => (self.m1 * theta + self.m2).cos() - self.m3,
            Family::Linear => -self.a * theta + self.b,
        }
    }

    /// dh/dθ.
    #[inline]
    pub(crate) fn dh(&self, theta: f64) -> f64 {
        match self.family {
            Family::Softmax => -theta.sin(),
            Family::CombinedMargin => -self.m1 * (self.m1 * theta + self.m2).sin(),
            Family::Linear => -self.a,
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=PI).contains(&theta) {
        Ok(())
    } else {
        Err(LatseError::AngleDomain(theta))
    }
}

/// Unscaled target logit `h(θ)` of `spec`.
pub fn target_logit(spec: &MarginSpec, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    Ok(spec.h(theta))
}

/// Angles between each sample and every class center, with the label of each
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleBatch {
    angles: Array2<f64>,
    targets: Vec<usize>,
}

impl AngleBatch {
    /// `angles` is N × K.
    pub fn new(angles: Array2<f64>, targets: Vec<usize>) -> Result<Self> {
        let (n, k) = angles.dim();
        if targets.len() != n {
            return Err(LatseError::Shape(format!(
                "{} target indices for {} samples",
                targets.len(),
                n
            )));
        }
        if k == 0 {
            return Err(LatseError::Shape("zero classes".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(LatseError::Shape(format!(
                "target index {t} outside {k} classes"
            )));
        }
        if let Some(&bad) = angles.iter().find(|&&v| !(0.0..=PI).contains(&v)) {
            return Err(LatseError::AngleDomain(bad));
        }
        Ok(Self { angles, targets })
    }

    pub fn angles(&self) -> &Array2<f64> {
        &self.angles
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn num_samples(&self) -> usize {
        self.angles.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.angles.ncols()
    }
}

/// Row-stochastic matrix of class probabilities, N × K.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub probs: Array2<f64>,
}

impl ProbDist {
    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.probs.row(i)
    }

    /// Class with the largest probability per row; ties go to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Scaled logits of one sample, written into `out`.
fn fill_logits(spec: &MarginSpec, thetas: ArrayView1<'_, f64>, target: usize, out: &mut [f64]) {
    for (j, (&theta, slot)) in thetas.iter().zip(out.iter_mut()).enumerate() {
        *slot = if j == target {
            spec.s * spec.h(theta)
        } else {
            spec.s * theta.cos()
        };
    }
}

/// Softmax of `logits` in place, with max subtraction.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in logits.iter_mut() {
        *z /= total;
    }
}

/// Margin probabilities: the target column uses the margin logit, every other
/// column the plain scaled cosine.
pub fn margin_probability(spec: &MarginSpec, batch: &AngleBatch) -> ProbDist {
    let (n, k) = batch.angles.dim();
    let mut probs = Array2::zeros((n, k));
    let mut row = vec![0.0; k];
    for i in 0..n {
        fill_logits(spec, batch.angles.row(i), batch.targets[i], &mut row);
        softmax_in_place(&mut row);
        probs.row_mut(i).iter_mut().zip(&row).for_each(|(p, &v)| *p = v);
    }
    ProbDist { probs }
}

/// Plain scaled-cosine class probabilities, no label involved. This is what a
/// trained network predicts at inference time.
pub fn cosine_probability(s: f64, cosines: &Array2<f64>) -> ProbDist {
    let k = cosines.ncols();
    let mut probs = Array2::zeros(cosines.dim());
    let mut row = vec![0.0; k];
    for (i, c) in cosines.rows().into_iter().enumerate() {
        row.iter_mut().zip(c.iter()).for_each(|(z, &v)| *z = s * v);
        softmax_in_place(&mut row);
        probs.row_mut(i).iter_mut().zip(&row).for_each(|(p, &v)| *p = v);
    }
    ProbDist { probs }
}

/// Result of the discriminative loss.
#[derive(Debug, Clone)]
pub struct DLoss {
    /// Mean over samples of `−log P_t`.
    pub loss: f64,
    /// Per-sample `−log P_t`.
    pub per_sample: Vec<f64>,
    /// ∂loss/∂θ, same shape as the angle matrix.
    pub grad_theta: Array2<f64>,
    /// Set when some target probability fell below [`LOG_CLAMP`].
    pub clamped: bool,
}

/// Cross-entropy of the margin probabilities with analytic angle gradients.
pub fn dloss(spec: &MarginSpec, batch: &AngleBatch) -> DLoss {
    let (n, k) = batch.angles.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::zeros((n, k));
    let mut per_sample = Vec::with_capacity(n);
    let mut clamped = false;
    let mut row = vec![0.0; k];
    for i in 0..n {
        let t = batch.targets[i];
        let thetas = batch.angles.row(i);
        fill_logits(spec, thetas, t, &mut row);
        // −ln P_t = ln(1 + Σ_{j≠t} e^{z_j − z_t}), exact even when P_t ≈ 1
        let zt = row[t];
        let others: f64 = (0..k).filter(|&j| j != t).map(|j| (row[j] - zt).exp()).sum();
        softmax_in_place(&mut row);
        let pt = row[t];
        if pt < LOG_CLAMP {
            clamped = true;
            per_sample.push(-LOG_CLAMP.ln());
        } else {
            per_sample.push(others.ln_1p());
        }
        let mut g = grad.row_mut(i);
        for j in 0..k {
            let dz = if j != t {
                row[j]
            } else if others.is_finite() {
                // P_t − 1 without cancellation
                -others / (1.0 + others)
            } else {
                pt - 1.0
            };
            let dz_dtheta = if j == t {
                spec.s * spec.dh(thetas[j])
            } else {
                -spec.s * thetas[j].sin()
            };
            g[j] = dz * dz_dtheta * inv_n;
        }
    }
    // Fixed index order keeps the reduction deterministic.
    let loss = per_sample.iter().sum::<f64>() * inv_n;
    DLoss {
        loss,
        per_sample,
        grad_theta: grad,
        clamped,
    }
}

/// Evenly spaced θ samples from `start` to `end` inclusive.
pub fn theta_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let count = ((end - start) / step + 1e-9).floor() as usize;
    let mut pts: Vec<f64> = (0..=count).map(|i| start + i as f64 * step).collect();
    if let Some(&last) = pts.last() {
        if last > end {
            pts.pop();
        }
    }
    if pts.last().is_some_and(|&last| end - last > PRINCIPLE_TOL) {
        pts.push(end);
    }
    pts
}

/// Closed θ interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

/// Outcome of the two-principle audit over a θ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipleReport {
    pub spec: MarginSpec,
    pub grid: Vec<f64>,
    /// Penalty principle: `h(θ) ≤ cos θ` everywhere.
    pub p1_ok: bool,
    /// Maximal runs of grid points with negative penalty.
    pub p1_violations: Vec<Interval>,
    /// Monotone principle: `h` non-increasing between neighbouring grid points.
    pub p2_ok: bool,
    /// Maximal runs of grid segments along which `h` increases.
    pub p2_violations: Vec<Interval>,
    /// Whether growing the additive margins never raises the target logit.
    /// `None` for families without an additive margin ordering.
    pub margin_order_ok: Option<bool>,
}

/// Collapses a boolean mask over segments `[grid[i], grid[i + offset]]` into maximal
/// intervals.
fn runs(grid: &[f64], failing: &[bool], offset: usize) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &bad) in failing.iter().enumerate() {
        match (bad, open) {
            (true, None) => open = Some(i),
            (false, Some(first)) => {
                out.push(Interval {
                    start: grid[first],
                    end: grid[i - 1 + offset],
                });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(first) = open {
        out.push(Interval {
            start: grid[first],
            end: grid[failing.len() - 1 + offset],
        });
    }
    out
}

/// Audits `spec` against the penalty and monotone principles on
/// `[grid_start, grid_end]`.
pub fn check_principles(
    spec: &MarginSpec,
    grid_start: f64,
    grid_end: f64,
    step: f64,
) -> Result<PrincipleReport> {
    if !(0.0 <= grid_start && grid_start < grid_end && grid_end <= PI) || !(step > 0.0) {
        return Err(LatseError::InvalidSpec(format!(
            "grid must satisfy 0 <= start < end <= pi with step > 0, got [{grid_start}, {grid_end}] step {step}"
        )));
    }
    let grid = theta_grid(grid_start, grid_end, step);
    let logits: Vec<f64> = grid.iter().map(|&t| spec.h(t)).collect();

    let p1_fail: Vec<bool> = grid
        .iter()
        .zip(&logits)
        .map(|(&t, &h)| h > t.cos() + PRINCIPLE_TOL)
        .collect();
    let p2_fail: Vec<bool> = logits
        .windows(2)
        .map(|w| w[1] > w[0] + PRINCIPLE_TOL)
        .collect();
    let p1_violations = runs(&grid, &p1_fail, 0);
    let p2_violations = runs(&grid, &p2_fail, 1);

    let margin_order_ok = match spec.family {
        Family::CombinedMargin if spec.m2 > 0.0 || spec.m3 > 0.0 => {
            let fractions = [0.0, 0.25, 0.5, 0.75, 1.0];
            let ok = grid.iter().all(|&t| {
                let values: Vec<f64> = fractions
                    .iter()
                    .map(|&f| {
                        MarginSpec::combined(spec.m1, f * spec.m2, f * spec.m3, spec.s).h(t)
                    })
                    .collect();
                values.windows(2).all(|w| w[1] <= w[0] + PRINCIPLE_TOL)
            });
            Some(ok)
        }
        _ => None,
    };

    Ok(PrincipleReport {
        spec: *spec,
        p1_ok: p1_violations.is_empty(),
        p1_violations,
        p2_ok: p2_violations.is_empty(),
        p2_violations,
        margin_order_ok,
        grid,
    })
}

fn fmt_intervals(list: &[Interval]) -> String {
    list.iter()
        .map(|iv| format!("[{:.9}, {:.9}]", iv.start, iv.end))
        .collect::<Vec<_>>()
        .join("; ")
}

impl PrincipleReport {
    /// Key-value rendering, one `key = value` pair per line.
    pub fn to_key_value(&self, config_hash: &str) -> String {
        let mut out = String::new();
        let s = &self.spec;
        let _ = writeln!(out, "# config_hash = {config_hash}");
        let _ = writeln!(out, "spec.label = {}", s.label());
        let _ = writeln!(out, "spec.family = {}", family_name(s.family));
        for (key, value) in [
            ("m1", s.m1),
            ("m2", s.m2),
            ("m3", s.m3),
            ("a", s.a),
            ("b", s.b),
            ("s", s.s),
        ] {
            let _ = writeln!(out, "spec.{key} = {value}");
        }
        let first = self.grid.first().copied().unwrap_or(0.0);
        let last = self.grid.last().copied().unwrap_or(0.0);
        let _ = writeln!(out, "grid.start = {first:.9}");
        let _ = writeln!(out, "grid.end = {last:.9}");
        let _ = writeln!(out, "grid.points = {}", self.grid.len());
        let _ = writeln!(out, "p1.ok = {}", self.p1_ok);
        let _ = writeln!(out, "p1.violations = {}", fmt_intervals(&self.p1_violations));
        let _ = writeln!(out, "p2.ok = {}", self.p2_ok);
        let _ = writeln!(out, "p2.violations = {}", fmt_intervals(&self.p2_violations));
        let order = match self.margin_order_ok {
            Some(ok) => ok.to_string(),
            None => "n/a".to_string(),
        };
        let _ = writeln!(out, "margin_order.ok = {order}");
        let _ = writeln!(
            out,
            "note = penalty audited on target logits; exp is monotone so this equals the probability-function check"
        );
        out
    }
}

pub fn family_name(family: Family) -> &'static str {
    match family {
        Family::Softmax => "softmax",
        Family::CombinedMargin => "combined_margin",
        Family::Linear => "linear",
    }
}

/// Target-logit curves: one θ column and one column per spec.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub labels: Vec<String>,
    pub thetas: Vec<f64>,
    /// `rows[i][j]` is `target_logit(specs[j], thetas[i])`.
    pub rows: Vec<Vec<f64>>,
}

pub fn emit_curves(specs: &[MarginSpec], thetas: &[f64]) -> Result<CurveTable> {
    if specs.is_empty() {
        return Err(LatseError::Empty("no margin specs to plot".into()));
    }
    if thetas.is_empty() {
        return Err(LatseError::Empty("empty theta grid".into()));
    }
    let rows = thetas
        .iter()
        .map(|&t| specs.iter().map(|s| target_logit(s, t)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(CurveTable {
        labels: specs.iter().map(MarginSpec::label).collect(),
        thetas: thetas.to_vec(),
        rows,
    })
}

impl CurveTable {
    /// CSV with θ first and 9 decimal digits per value.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash = {config_hash}\ntheta");
        for label in &self.labels {
            let _ = write!(out, ",\"{label}\"");
        }
        out.push('\n');
        for (theta, row) in self.thetas.iter().zip(&self.rows) {
            let _ = write!(out, "{theta:.9}");
            for v in row {
                let _ = write!(out, ",{v:.9}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_class(theta_t: f64, theta_o: f64) -> AngleBatch {
        AngleBatch::new(array![[theta_t, theta_o]], vec![0]).unwrap()
    }

    #[test]
    fn target_logit_examples() {
        assert_eq!(target_logit(&MarginSpec::softmax(1.0), 0.0).unwrap(), 1.0);
        assert_eq!(
            target_logit(&MarginSpec::linear(0.88, 0.88, 64.0), 0.0).unwrap(),
            0.88
        );
        let arc = target_logit(&MarginSpec::arcface(64.0), 0.0).unwrap();
        assert!((arc - 0.877_582_561_890_372_7).abs() < 1e-15);
    }

    #[test]
    fn target_logit_rejects_out_of_domain() {
        let spec = MarginSpec::softmax(1.0);
        assert!(matches!(
            target_logit(&spec, -1e-3),
            Err(LatseError::AngleDomain(_))
        ));
        assert!(target_logit(&spec, PI + 1e-9).is_err());
        assert!(target_logit(&spec, PI).is_ok());
    }

    #[test]
    fn validation() {
        assert!(MarginSpec::softmax(0.0).validate().is_err());
        assert!(MarginSpec::linear(0.0, 1.0, 1.0).validate().is_err());
        assert!(MarginSpec::combined(0.5, 0.0, 0.0, 1.0).validate().is_err());
        assert!(MarginSpec::combined(1.0, -0.1, 0.0, 1.0).validate().is_err());
        assert!(MarginSpec::arcface(64.0).validate().is_ok());
    }

    #[test]
    fn linear_two_class_probability() {
        let p = margin_probability(&MarginSpec::linear(1.0, 1.0, 1.0), &two_class(0.0, PI / 2.0));
        // e / (e + 1), cos(π/2) contributes e^0 up to rounding
        assert!((p.probs[[0, 0]] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn uniform_when_angles_equal() {
        let batch = AngleBatch::new(array![[1.1, 1.1, 1.1, 1.1]], vec![2]).unwrap();
        let p = margin_probability(&MarginSpec::softmax(30.0), &batch);
        for &v in p.probs.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class() {
        let batch = AngleBatch::new(array![[2.0]], vec![0]).unwrap();
        let spec = MarginSpec::linear(0.88, 0.88, 64.0);
        assert_eq!(margin_probability(&spec, &batch).probs[[0, 0]], 1.0);
        let d = dloss(&spec, &batch);
        assert_eq!(d.loss, 0.0);
        assert_eq!(d.grad_theta[[0, 0]], 0.0);
    }

    #[test]
    fn dloss_examples() {
        let d = dloss(&MarginSpec::softmax(1.0), &two_class(0.0, PI / 2.0));
        assert!((d.loss - 0.313_261_687_518_222_8).abs() < 1e-12);
        let d = dloss(&MarginSpec::linear(1.0, 1.0, 1.0), &two_class(0.0, PI / 2.0));
        assert!((d.grad_theta[[0, 0]] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(!d.clamped);
    }

    #[test]
    fn dloss_clamps_underflow() {
        // Target far worse than the other class at a huge scale.
        let batch = two_class(PI, 0.0);
        let d = dloss(&MarginSpec::linear(1.0, 0.0, 64.0), &batch);
        assert!(d.clamped);
        assert!(d.loss.is_finite());
        assert!((d.loss - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn angle_batch_validation() {
        assert!(AngleBatch::new(array![[0.1, 0.2]], vec![2]).is_err());
        assert!(AngleBatch::new(array![[0.1, 4.0]], vec![0]).is_err());
        assert!(AngleBatch::new(array![[0.1, 0.2]], vec![0, 1]).is_err());
    }

    #[test]
    fn linear_instance_passes_both_principles() {
        let r = check_principles(&MarginSpec::linear(0.88, 0.88, 64.0), 0.0, PI, 1e-3).unwrap();
        assert!(r.p1_ok && r.p2_ok, "{r:?}");
        assert_eq!(r.margin_order_ok, None);
    }

    #[test]
    fn arcface_instance_violates_near_pi() {
        let r = check_principles(&MarginSpec::arcface(64.0), 0.0, PI, 1e-3).unwrap();
        assert!(!r.p2_ok);
        assert_eq!(r.p2_violations.len(), 1);
        let iv = r.p2_violations[0];
        assert!((iv.start - (PI - 0.5)).abs() < 2e-3, "{iv:?}");
        assert_eq!(iv.end, PI);
        // P1 fails around θ = 3.0 where cos(3.5) > cos(3.0)
        assert!(!r.p1_ok);
        assert!(r.p1_violations.iter().any(|iv| iv.start <= 3.0 && 3.0 <= iv.end));
        assert!((3.5f64.cos() - 3.0f64.cos() - 0.053_53).abs() < 1e-4);
    }

    #[test]
    fn cosface_instance_passes() {
        let r = check_principles(&MarginSpec::cosface(64.0), 0.0, PI, 1e-3).unwrap();
        assert!(r.p1_ok && r.p2_ok);
        assert_eq!(r.margin_order_ok, Some(true));
    }

    #[test]
    fn sphereface_plain_is_not_monotone() {
        let r = check_principles(&MarginSpec::sphereface(64.0), 0.0, PI, 1e-3).unwrap();
        assert!(!r.p2_ok);
        assert!(!r.p1_ok);
    }

    #[test]
    fn grid_errors() {
        let spec = MarginSpec::softmax(1.0);
        assert!(check_principles(&spec, 1.0, 0.5, 1e-3).is_err());
        assert!(check_principles(&spec, 0.0, 4.0, 1e-3).is_err());
        assert!(check_principles(&spec, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_includes_end() {
        let g = theta_grid(0.0, PI, 1e-3);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), PI);
        assert_eq!(g.len(), 3143);
    }

    #[test]
    fn intervals_lie_within_grid() {
        let r = check_principles(&MarginSpec::arcface(1.0), 0.5, 3.0, 1e-2).unwrap();
        for iv in r.p1_violations.iter().chain(&r.p2_violations) {
            assert!(iv.start >= 0.5 && iv.end <= 3.0 && iv.start <= iv.end);
        }
    }

    #[test]
    fn curves_examples() {
        let t = emit_curves(&[MarginSpec::softmax(1.0), MarginSpec::cosface(1.0)], &[0.0, PI / 2.0])
            .unwrap();
        assert!((t.rows[0][1] - 0.65).abs() < 1e-15);
        assert!(t.rows[1][0].abs() < 1e-15);
        let csv = t.to_csv("abc");
        assert!(csv.contains("1.570796327,0.000000000,-0.350000000"));
        assert!(emit_curves(&[], &[0.0]).is_err());
    }

    #[test]
    fn report_key_value() {
        let r = check_principles(&MarginSpec::arcface(64.0), 0.0, PI, 1e-3).unwrap();
        let kv = r.to_key_value("h");
        assert!(kv.contains("p2.ok = false"));
        assert!(kv.contains("spec.family = combined_margin"));
    }
}
