//! The latent-class linear mixed model: design matrices, class-prior
//! mapping, and exact marginal log-likelihood evaluation with analytic
//! gradients.
//!
//! Each class g has fixed effects beta_g over a time/treatment design,
//! random intercept+slope b ~ N(0, B_g) with B_g = L_g L_g', and residual
//! sd sigma_g. The per-subject marginal covariance V = Z B Z' + sigma^2 I
//! is handled through the 2x2 capacitance matrix M = I + (ZL)'(ZL)/sigma^2,
//! so evaluation is O(n) per subject with no dense n x n factorization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Cohort, Subject, SubjectId};

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Linear,
    Quadratic,
}

impl std::fmt::Display for Trend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trend::Linear => write!(f, "linear"),
            Trend::Quadratic => write!(f, "quadratic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSharing {
    Shared,
    ClassSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_classes: usize,
    pub trend: Trend,
    /// Include the treatment-by-time interaction term u*tau.
    pub treatment_interaction: bool,
    /// Include u*tau^2 (quadratic trend only).
    pub quadratic_treatment_interaction: bool,
    /// Divisor converting day counts to the internal time unit.
    pub time_scale_days: f64,
    /// Whether the random-effect covariance and residual sd are shared
    /// across classes or class-specific.
    pub variance_sharing: VarianceSharing,
    /// Model ln(value) instead of the raw value.
    pub log_transform: bool,
}

impl ModelSpec {
    pub fn new(n_classes: usize, trend: Trend) -> ModelSpec {
        ModelSpec {
            n_classes,
            trend,
            treatment_interaction: true,
            quadratic_treatment_interaction: false,
            time_scale_days: 365.25,
            variance_sharing: VarianceSharing::Shared,
            log_transform: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be >= 1".into()));
        }
        if !(self.time_scale_days > 0.0) {
            return Err(Error::InvalidArgument(
                "time_scale_days must be positive".into(),
            ));
        }
        if self.quadratic_treatment_interaction && self.trend != Trend::Quadratic {
            return Err(Error::InvalidArgument(
                "quadratic treatment interaction requires a quadratic trend".into(),
            ));
        }
        Ok(())
    }
}

/// One fixed-effect design column. `tau` is scaled time, `u` the
/// treatment indicator 1{time_days >= 0}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignColumn {
    Intercept,
    Time,
    TimeSq,
    Treatment,
    TreatmentTime,
    TreatmentTimeSq,
}

impl DesignColumn {
    fn eval(self, tau: f64, u: f64) -> f64 {
        match self {
            DesignColumn::Intercept => 1.0,
            DesignColumn::Time => tau,
            DesignColumn::TimeSq => tau * tau,
            DesignColumn::Treatment => u,
            DesignColumn::TreatmentTime => u * tau,
            DesignColumn::TreatmentTimeSq => u * tau * tau,
        }
    }
}

impl std::fmt::Display for DesignColumn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DesignColumn::Intercept => "intercept",
            DesignColumn::Time => "time",
            DesignColumn::TimeSq => "time_sq",
            DesignColumn::Treatment => "treatment",
            DesignColumn::TreatmentTime => "treatment_time",
            DesignColumn::TreatmentTimeSq => "treatment_time_sq",
        };
        write!(f, "{s}")
    }
}

/// The active fixed-effect columns plus the time scale needed to evaluate
/// them. Fitted models persist their layout so external cohorts are scored
/// against exactly the columns the fit used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub columns: Vec<DesignColumn>,
    pub time_scale_days: f64,
}

impl DesignLayout {
    /// All columns implied by the spec.
    pub fn full(spec: &ModelSpec) -> DesignLayout {
        let mut columns = vec![DesignColumn::Intercept, DesignColumn::Time];
        if spec.trend == Trend::Quadratic {
            columns.push(DesignColumn::TimeSq);
        }
        columns.push(DesignColumn::Treatment);
        if spec.treatment_interaction {
            columns.push(DesignColumn::TreatmentTime);
        }
        if spec.quadratic_treatment_interaction {
            columns.push(DesignColumn::TreatmentTimeSq);
        }
        DesignLayout {
            columns,
            time_scale_days: spec.time_scale_days,
        }
    }

    /// Collinearity guard: when the treatment indicator is constant over
    /// the cohort, drop the columns it makes redundant. With u identically
    /// one, `treatment` duplicates the intercept and each plain time term
    /// duplicates its interaction twin (the interaction column stays).
    pub fn for_cohort(spec: &ModelSpec, cohort: &Cohort) -> DesignLayout {
        let mut layout = DesignLayout::full(spec);
        let any_pre = cohort
            .subjects
            .iter()
            .any(|s| s.measurements.iter().any(|m| m.time_days < 0));
        let any_post = cohort
            .subjects
            .iter()
            .any(|s| s.measurements.iter().any(|m| m.time_days >= 0));
        if any_pre && any_post {
            return layout;
        }
        if !any_pre {
            layout.columns.retain(|c| *c != DesignColumn::Treatment);
            if layout.columns.contains(&DesignColumn::TreatmentTime) {
                layout.columns.retain(|c| *c != DesignColumn::Time);
            }
            if layout.columns.contains(&DesignColumn::TreatmentTimeSq) {
                layout.columns.retain(|c| *c != DesignColumn::TimeSq);
            }
        } else {
            // No post-treatment data: every treatment column is zero.
            layout.columns.retain(|c| {
                !matches!(
                    c,
                    DesignColumn::Treatment
                        | DesignColumn::TreatmentTime
                        | DesignColumn::TreatmentTimeSq
                )
            });
        }
        layout
    }

    pub fn n_fixed(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, time_days: f64) -> Vec<f64> {
        let tau = time_days / self.time_scale_days;
        let u = if time_days >= 0.0 { 1.0 } else { 0.0 };
        self.columns.iter().map(|c| c.eval(tau, u)).collect()
    }

    pub fn random_row(&self, time_days: f64) -> [f64; 2] {
        [1.0, time_days / self.time_scale_days]
    }
}

/// Fixed- and random-effect design rows for a sequence of measurement
/// times, using every column the spec implies.
pub fn build_design(times_days: &[i64], spec: &ModelSpec) -> (Vec<Vec<f64>>, Vec<[f64; 2]>) {
    let layout = DesignLayout::full(spec);
    let x = times_days.iter().map(|&t| layout.row(t as f64)).collect();
    let z = times_days.iter().map(|&t| layout.random_row(t as f64)).collect();
    (x, z)
}

/// Multinomial-logit class priors with the last class as reference:
/// pi_g = exp(l_g) / sum_h exp(l_h), l_G = 0.
pub fn class_priors(logits: &[f64]) -> Vec<f64> {
    let g = logits.len() + 1;
    let mut full = Vec::with_capacity(g);
    full.extend_from_slice(logits);
    full.push(0.0);
    let max = full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = full.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Full parameter set of a G-class model over k fixed-effect columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// G rows of k class-specific fixed effects.
    pub beta: Vec<Vec<f64>>,
    /// G-1 class-membership intercepts; class G is the reference.
    pub logits: Vec<f64>,
    /// Lower-triangular factors [l11, l21, l22] of B = L L'; one entry when
    /// shared, G entries when class-specific.
    pub chol_b: Vec<[f64; 3]>,
    /// Log residual sd; one entry when shared, G when class-specific.
    pub log_sigma: Vec<f64>,
}

impl Parameters {
    pub fn n_classes(&self) -> usize {
        self.beta.len()
    }

    pub fn chol_b_for(&self, class: usize) -> [f64; 3] {
        if self.chol_b.len() == 1 {
            self.chol_b[0]
        } else {
            self.chol_b[class]
        }
    }

    pub fn log_sigma_for(&self, class: usize) -> f64 {
        if self.log_sigma.len() == 1 {
            self.log_sigma[0]
        } else {
            self.log_sigma[class]
        }
    }

    pub fn priors(&self) -> Vec<f64> {
        class_priors(&self.logits)
    }

    pub fn n_free(&self) -> usize {
        self.beta.iter().map(Vec::len).sum::<usize>()
            + self.logits.len()
            + 3 * self.chol_b.len()
            + self.log_sigma.len()
    }

    /// Flatten in the documented order: beta row-major by class, then
    /// logits, then each Cholesky lower triangle column-major
    /// (l11, l21, l22), then log sigma.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_free());
        for row in &self.beta {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.logits);
        for ch in &self.chol_b {
            out.extend_from_slice(ch);
        }
        out.extend_from_slice(&self.log_sigma);
        out
    }

    pub fn unpack(packed: &[f64], shape: &ParamShape) -> Result<Parameters> {
        if packed.len() != shape.n_free() {
            return Err(Error::DimensionMismatch(format!(
                "packed vector has {} coordinates, expected {}",
                packed.len(),
                shape.n_free()
            )));
        }
        let mut it = packed.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let beta = (0..shape.n_classes).map(|_| take(shape.n_fixed)).collect();
        let logits = take(shape.n_classes - 1);
        let chol_b = (0..shape.n_variance_blocks())
            .map(|_| {
                let v = take(3);
                [v[0], v[1], v[2]]
            })
            .collect();
        let log_sigma = take(shape.n_variance_blocks());
        Ok(Parameters {
            beta,
            logits,
            chol_b,
            log_sigma,
        })
    }

    /// Relabel classes: `perm[new] = old`. Logits are re-expressed against
    /// the new reference class so the priors permute exactly.
    pub fn permuted(&self, perm: &[usize]) -> Parameters {
        let g = self.n_classes();
        assert_eq!(perm.len(), g);
        let old_logit = |idx: usize| if idx + 1 == g { 0.0 } else { self.logits[idx] };
        let reference = old_logit(perm[g - 1]);
        let beta = perm.iter().map(|&o| self.beta[o].clone()).collect();
        let logits = perm[..g - 1]
            .iter()
            .map(|&o| old_logit(o) - reference)
            .collect();
        let chol_b = if self.chol_b.len() == 1 {
            self.chol_b.clone()
        } else {
            perm.iter().map(|&o| self.chol_b[o]).collect()
        };
        let log_sigma = if self.log_sigma.len() == 1 {
            self.log_sigma.clone()
        } else {
            perm.iter().map(|&o| self.log_sigma[o]).collect()
        };
        Parameters {
            beta,
            logits,
            chol_b,
            log_sigma,
        }
    }

    /// Flip the sign of any Cholesky column whose diagonal is negative;
    /// B = L L' is unchanged.
    pub fn canonical_chol_signs(&mut self) {
        for ch in &mut self.chol_b {
            if ch[0] < 0.0 {
                ch[0] = -ch[0];
                ch[1] = -ch[1];
            }
            if ch[2] < 0.0 {
                ch[2] = -ch[2];
            }
        }
    }

    fn check_shape(&self, shape: &ParamShape) -> Result<()> {
        let ok = self.beta.len() == shape.n_classes
            && self.beta.iter().all(|b| b.len() == shape.n_fixed)
            && self.logits.len() == shape.n_classes - 1
            && self.chol_b.len() == shape.n_variance_blocks()
            && self.log_sigma.len() == shape.n_variance_blocks();
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "parameters do not match shape (G={}, k={}, {:?})",
                shape.n_classes, shape.n_fixed, shape.variance_sharing
            )))
        }
    }
}

/// Dimensions of the packed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub n_classes: usize,
    pub n_fixed: usize,
    pub variance_sharing: VarianceSharing,
}

impl ParamShape {
    pub fn of(spec: &ModelSpec, layout: &DesignLayout) -> ParamShape {
        ParamShape {
            n_classes: spec.n_classes,
            n_fixed: layout.n_fixed(),
            variance_sharing: spec.variance_sharing,
        }
    }

    pub fn n_variance_blocks(&self) -> usize {
        match self.variance_sharing {
            VarianceSharing::Shared => 1,
            VarianceSharing::ClassSpecific => self.n_classes,
        }
    }

    pub fn n_free(&self) -> usize {
        self.n_classes * self.n_fixed
            + (self.n_classes - 1)
            + 3 * self.n_variance_blocks()
            + self.n_variance_blocks()
    }

    pub fn beta_offset(&self, class: usize) -> usize {
        class * self.n_fixed
    }

    pub fn logits_offset(&self) -> usize {
        self.n_classes * self.n_fixed
    }

    pub fn chol_offset(&self, block: usize) -> usize {
        self.logits_offset() + (self.n_classes - 1) + 3 * block
    }

    pub fn sigma_offset(&self, block: usize) -> usize {
        self.chol_offset(self.n_variance_blocks() - 1) + 3 + block
    }

    pub fn variance_block(&self, class: usize) -> usize {
        match self.variance_sharing {
            VarianceSharing::Shared => 0,
            VarianceSharing::ClassSpecific => class,
        }
    }
}

/// Cached per-subject design: X (n x k, row-major), Z rows, response, and
/// the precomputed 2x2 Gram matrix of Z.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: SubjectId,
    pub n: usize,
    pub x: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub y: Vec<f64>,
    /// [sum z1*z1, sum z1*z2, sum z2*z2]
    pub ztz: [f64; 3],
}

impl SubjectData {
    pub fn from_subject(subject: &Subject, layout: &DesignLayout, log_transform: bool) -> SubjectData {
        let n = subject.measurements.len();
        let k = layout.n_fixed();
        let mut x = Vec::with_capacity(n * k);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut ztz = [0.0; 3];
        for m in &subject.measurements {
            let t = m.time_days as f64;
            x.extend_from_slice(&layout.row(t));
            let zr = layout.random_row(t);
            ztz[0] += zr[0] * zr[0];
            ztz[1] += zr[0] * zr[1];
            ztz[2] += zr[1] * zr[1];
            z.push(zr);
            y.push(if log_transform { m.value.ln() } else { m.value });
        }
        SubjectData {
            id: subject.id.clone(),
            n,
            x,
            z,
            y,
            ztz,
        }
    }

    pub fn x_row(&self, j: usize, k: usize) -> &[f64] {
        &self.x[j * k..(j + 1) * k]
    }
}

/// All subjects of a cohort prepared for likelihood evaluation.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub k: usize,
    pub subjects: Vec<SubjectData>,
}

impl DesignSet {
    pub fn build(cohort: &Cohort, spec: &ModelSpec, layout: &DesignLayout) -> DesignSet {
        DesignSet {
            k: layout.n_fixed(),
            subjects: cohort
                .subjects
                .iter()
                .map(|s| SubjectData::from_subject(s, layout, spec.log_transform))
                .collect(),
        }
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.n).sum()
    }

    /// Rescale all responses by 1/scale (estimation runs on standardized
    /// values).
    pub fn scaled_responses(&self, scale: f64) -> DesignSet {
        let mut out = self.clone();
        for s in &mut out.subjects {
            for v in &mut s.y {
                *v /= scale;
            }
        }
        out
    }
}

/// Cholesky factor of a symmetric positive-definite 2x2 matrix.
struct Chol2 {
    c11: f64,
    c21: f64,
    c22: f64,
}

fn chol2(m11: f64, m21: f64, m22: f64) -> Option<Chol2> {
    if !(m11 > 0.0) || !m11.is_finite() {
        return None;
    }
    let c11 = m11.sqrt();
    let c21 = m21 / c11;
    let d = m22 - c21 * c21;
    if !(d > 0.0) || !d.is_finite() {
        return None;
    }
    Some(Chol2 {
        c11,
        c21,
        c22: d.sqrt(),
    })
}

impl Chol2 {
    fn solve(&self, b: [f64; 2]) -> [f64; 2] {
        let w0 = b[0] / self.c11;
        let w1 = (b[1] - self.c21 * w0) / self.c22;
        let x1 = w1 / self.c22;
        let x0 = (w0 - self.c21 * x1) / self.c11;
        [x0, x1]
    }

    fn logdet(&self) -> f64 {
        2.0 * (self.c11.ln() + self.c22.ln())
    }

    fn det(&self) -> f64 {
        (self.c11 * self.c22).powi(2)
    }
}

/// Per-class gradient contributions for one subject.
#[derive(Debug, Clone)]
pub(crate) struct ClassGrad {
    pub beta: Vec<f64>,
    pub chol: [f64; 3],
    pub log_sigma: f64,
}

/// log N(y; X beta, Z B Z' + sigma^2 I) for one subject and one class.
/// `with_grad` also returns the derivative with respect to beta, the
/// Cholesky entries of B, and log sigma.
pub(crate) fn class_loglik(
    sd: &SubjectData,
    k: usize,
    beta: &[f64],
    chol_b: [f64; 3],
    log_sigma: f64,
    with_grad: bool,
) -> Option<(f64, Option<ClassGrad>)> {
    let s2 = (2.0 * log_sigma).exp();
    if !s2.is_finite() || s2 <= 0.0 {
        return None;
    }
    let n = sd.n;
    let [la, lb, lc] = chol_b;
    let [p, q, s] = sd.ztz;

    // Residuals and Z'r.
    let mut rtr = 0.0;
    let mut ztr = [0.0; 2];
    let mut resid = Vec::with_capacity(n);
    for j in 0..n {
        let xr = sd.x_row(j, k);
        let mut mu = 0.0;
        for (xi, bi) in xr.iter().zip(beta) {
            mu += xi * bi;
        }
        let r = sd.y[j] - mu;
        rtr += r * r;
        ztr[0] += sd.z[j][0] * r;
        ztr[1] += sd.z[j][1] * r;
        resid.push(r);
    }

    // S = Z'Z L, A'A = L' S, M = I + A'A / s2.
    let s11 = p * la + q * lb;
    let s12 = q * lc;
    let s21 = q * la + s * lb;
    let s22 = s * lc;
    let ata11 = la * s11 + lb * s21;
    let ata21 = lc * s21;
    let ata22 = lc * s22;
    let m11 = 1.0 + ata11 / s2;
    let m21 = ata21 / s2;
    let m22 = 1.0 + ata22 / s2;
    let mchol = chol2(m11, m21, m22)?;

    // u2 = L' Z'r, t = M^{-1} u2, quadratic form.
    let u2 = [la * ztr[0] + lb * ztr[1], lc * ztr[1]];
    let t = mchol.solve(u2);
    let quad = (rtr - (u2[0] * t[0] + u2[1] * t[1])) / s2;
    let logdet_v = 2.0 * n as f64 * log_sigma + mchol.logdet();
    let ll = -0.5 * (n as f64 * LN_2PI + logdet_v + quad);
    if !ll.is_finite() {
        return None;
    }
    if !with_grad {
        return Some((ll, None));
    }

    // v = V^{-1} r via L t, then X'v, Z'v, |v|^2.
    let lt = [la * t[0], lb * t[0] + lc * t[1]];
    let mut grad_beta = vec![0.0; k];
    let mut h = [0.0; 2];
    let mut vtv = 0.0;
    for j in 0..n {
        let v = (resid[j] - (sd.z[j][0] * lt[0] + sd.z[j][1] * lt[1]) / s2) / s2;
        vtv += v * v;
        h[0] += sd.z[j][0] * v;
        h[1] += sd.z[j][1] * v;
        let xr = sd.x_row(j, k);
        for (gi, xi) in grad_beta.iter_mut().zip(xr) {
            *gi += xi * v;
        }
    }

    // P = Z' V^{-1} Z = (Z'Z - S M^{-1} S' / s2) / s2.
    let g1 = mchol.solve([s11, s12]);
    let g2 = mchol.solve([s21, s22]);
    let sms11 = s11 * g1[0] + s12 * g1[1];
    let sms21 = s21 * g1[0] + s22 * g1[1];
    let sms22 = s21 * g2[0] + s22 * g2[1];
    let p11 = (p - sms11 / s2) / s2;
    let p21 = (q - sms21 / s2) / s2;
    let p22 = (s - sms22 / s2) / s2;

    // d ll / d L_ab = -(P L)_ab + h_a (L'h)_b on the lower triangle.
    let lth = [la * h[0] + lb * h[1], lc * h[1]];
    let pl11 = p11 * la + p21 * lb;
    let pl21 = p21 * la + p22 * lb;
    let pl22 = p22 * lc;
    let grad_chol = [
        -pl11 + h[0] * lth[0],
        -pl21 + h[1] * lth[0],
        -pl22 + h[1] * lth[1],
    ];

    // tr V^{-1} = (n - 2 + tr M^{-1}) / s2.
    let tr_minv = (m11 + m22) / mchol.det();
    let tr_vinv = (n as f64 - 2.0 + tr_minv) / s2;
    let grad_log_sigma = s2 * (vtv - tr_vinv);

    Some((
        ll,
        Some(ClassGrad {
            beta: grad_beta,
            chol: grad_chol,
            log_sigma: grad_log_sigma,
        }),
    ))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Marginal log-density of one subject under a single class.
///
/// `class` only labels the error when the covariance degenerates.
pub fn subject_class_loglik(
    subject: &Subject,
    beta: &[f64],
    chol_b: [f64; 3],
    sigma: f64,
    spec: &ModelSpec,
    class: usize,
) -> Result<f64> {
    let layout = DesignLayout::full(spec);
    let sd = SubjectData::from_subject(subject, &layout, spec.log_transform);
    if beta.len() != layout.n_fixed() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} coordinates, design has {} columns",
            beta.len(),
            layout.n_fixed()
        )));
    }
    class_loglik(&sd, layout.n_fixed(), beta, chol_b, sigma.ln(), false)
        .map(|(ll, _)| ll)
        .ok_or(Error::SingularCovariance { class })
}

/// All G class log-densities for one prepared subject.
pub(crate) fn class_logliks(
    sd: &SubjectData,
    k: usize,
    params: &Parameters,
) -> Result<Vec<f64>> {
    (0..params.n_classes())
        .map(|g| {
            class_loglik(
                sd,
                k,
                &params.beta[g],
                params.chol_b_for(g),
                params.log_sigma_for(g),
                false,
            )
            .map(|(ll, _)| ll)
            .ok_or(Error::SingularCovariance { class: g + 1 })
        })
        .collect()
}

/// Observed-data mixture log-likelihood over a prepared design set.
pub fn mixture_loglik_set(set: &DesignSet, params: &Parameters, shape: &ParamShape) -> Result<f64> {
    params.check_shape(shape)?;
    let log_pi: Vec<f64> = params.priors().iter().map(|p| p.ln()).collect();
    let terms = crate::estimator::ordered_chunked_map(&set.subjects, |sd| {
        let lls = class_logliks(sd, set.k, params)?;
        let weighted: Vec<f64> = lls.iter().zip(&log_pi).map(|(l, lp)| l + lp).collect();
        Ok(log_sum_exp(&weighted))
    })?;
    Ok(terms.iter().sum())
}

/// Gradient of [`mixture_loglik_set`] with respect to the packed
/// parameter coordinates. Returns (log-likelihood, gradient).
pub fn mixture_value_grad_set(
    set: &DesignSet,
    params: &Parameters,
    shape: &ParamShape,
) -> Result<(f64, Vec<f64>)> {
    params.check_shape(shape)?;
    let g = shape.n_classes;
    let priors = params.priors();
    let log_pi: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    let p_free = shape.n_free();

    let per_subject = crate::estimator::ordered_chunked_map(&set.subjects, |sd| {
        let mut lls = Vec::with_capacity(g);
        let mut grads = Vec::with_capacity(g);
        for cls in 0..g {
            let (ll, grad) = class_loglik(
                sd,
                set.k,
                &params.beta[cls],
                params.chol_b_for(cls),
                params.log_sigma_for(cls),
                true,
            )
            .ok_or(Error::SingularCovariance { class: cls + 1 })?;
            lls.push(ll + log_pi[cls]);
            grads.push(grad.expect("gradient requested"));
        }
        let f = log_sum_exp(&lls);
        let mut grad = vec![0.0; p_free];
        for cls in 0..g {
            let w = (lls[cls] - f).exp();
            let boff = shape.beta_offset(cls);
            for (j, gb) in grads[cls].beta.iter().enumerate() {
                grad[boff + j] += w * gb;
            }
            let block = shape.variance_block(cls);
            let coff = shape.chol_offset(block);
            for j in 0..3 {
                grad[coff + j] += w * grads[cls].chol[j];
            }
            grad[shape.sigma_offset(block)] += w * grads[cls].log_sigma;
            if cls + 1 < g {
                grad[shape.logits_offset() + cls] += w - priors[cls];
            }
        }
        Ok((f, grad))
    })?;

    let mut total = 0.0;
    let mut grad = vec![0.0; p_free];
    for (f, gvec) in per_subject {
        total += f;
        for (acc, gi) in grad.iter_mut().zip(&gvec) {
            *acc += gi;
        }
    }
    Ok((total, grad))
}

/// Mixture log-likelihood of a cohort under the full design layout.
pub fn mixture_loglik(params: &Parameters, cohort: &Cohort, spec: &ModelSpec) -> Result<f64> {
    spec.validate()?;
    let layout = DesignLayout::full(spec);
    let set = DesignSet::build(cohort, spec, &layout);
    mixture_loglik_set(&set, params, &ParamShape::of(spec, &layout))
}

/// Gradient of [`mixture_loglik`] in packed-coordinate order.
pub fn mixture_grad(params: &Parameters, cohort: &Cohort, spec: &ModelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let layout = DesignLayout::full(spec);
    let set = DesignSet::build(cohort, spec, &layout);
    mixture_value_grad_set(&set, params, &ParamShape::of(spec, &layout)).map(|(_, g)| g)
}

/// Conditional expectation of the random effects for one subject under one
/// class: E[b | y, class] = B Z' V^{-1} (y - X beta).
pub fn blup_random_effects(
    sd: &SubjectData,
    k: usize,
    beta: &[f64],
    chol_b: [f64; 3],
    log_sigma: f64,
) -> Result<[f64; 2]> {
    let s2 = (2.0 * log_sigma).exp();
    if !s2.is_finite() || s2 <= 0.0 {
        return Err(Error::SingularCovariance { class: 0 });
    }
    let [la, lb, lc] = chol_b;
    let [p, q, s] = sd.ztz;
    let mut ztr = [0.0; 2];
    for j in 0..sd.n {
        let xr = sd.x_row(j, k);
        let mut mu = 0.0;
        for (xi, bi) in xr.iter().zip(beta) {
            mu += xi * bi;
        }
        let r = sd.y[j] - mu;
        ztr[0] += sd.z[j][0] * r;
        ztr[1] += sd.z[j][1] * r;
    }
    let s11 = p * la + q * lb;
    let s21 = q * la + s * lb;
    let s22 = s * lc;
    let m11 = 1.0 + (la * s11 + lb * s21) / s2;
    let m21 = lc * s21 / s2;
    let m22 = 1.0 + lc * s22 / s2;
    let mchol = chol2(m11, m21, m22).ok_or(Error::SingularCovariance { class: 0 })?;
    let u2 = [la * ztr[0] + lb * ztr[1], lc * ztr[1]];
    let t = mchol.solve(u2);
    // Z' V^{-1} r = (Z'r - Z'Z L t / s2) / s2.
    let zzlt = [s11 * t[0] + q * lc * t[1], s21 * t[0] + s22 * t[1]];
    let h = [(ztr[0] - zzlt[0] / s2) / s2, (ztr[1] - zzlt[1] / s2) / s2];
    // b = L L' h.
    let lth = [la * h[0] + lb * h[1], lc * h[1]];
    Ok([la * lth[0], lb * lth[0] + lc * lth[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Measurement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn subject(times: &[i64], values: &[f64]) -> Subject {
        Subject {
            id: "T".to_string(),
            measurements: times
                .iter()
                .zip(values)
                .map(|(&t, &v)| Measurement {
                    time_days: t,
                    value: v,
                })
                .collect(),
            event: None,
        }
    }

    #[test]
    fn design_rows_match_indicator_definition() {
        let spec = ModelSpec::new(1, Trend::Quadratic);
        let (x, z) = build_design(&[-182, 0, 365], &spec);
        // Pre-treatment: u = 0.
        let tau = -182.0 / 365.25;
        assert!((x[0][0] - 1.0).abs() < 1e-15);
        assert!((x[0][1] - tau).abs() < 1e-12);
        assert!((x[0][2] - tau * tau).abs() < 1e-12);
        assert_eq!(&x[0][3..], &[0.0, 0.0]);
        assert!((x[0][1] + 0.49829).abs() < 1e-4);
        assert!((x[0][2] - 0.24829).abs() < 1e-4);
        // Treatment start.
        assert_eq!(x[1], vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(z[1], [1.0, 0.0]);
        // One scale unit after start (365/365.25 for integer days).
        let tau1 = 365.0 / 365.25;
        assert!((x[2][1] - tau1).abs() < 1e-12);
        assert!((x[2][3] - 1.0).abs() < 1e-15);
        assert!((x[2][4] - tau1).abs() < 1e-12);
        assert!((z[2][1] - tau1).abs() < 1e-12);

        // Linear trend drops the tau^2 column.
        let lin = ModelSpec::new(1, Trend::Linear);
        let (xl, _) = build_design(&[365], &lin);
        assert_eq!(xl[0].len(), 4);
    }

    #[test]
    fn exact_unit_design_row() {
        // With scale 100 the day grid hits tau = 1 exactly.
        let mut spec = ModelSpec::new(1, Trend::Quadratic);
        spec.time_scale_days = 100.0;
        let (x, z) = build_design(&[100], &spec);
        assert_eq!(x[0], vec![1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(z[0], [1.0, 1.0]);
    }

    #[test]
    fn priors_symmetry_and_degenerate() {
        let p = class_priors(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(class_priors(&[]), vec![1.0]);
    }

    #[test]
    fn priors_match_direct_normalization() {
        // Adding a constant to every logit (including the implicit
        // reference) leaves the distribution unchanged; equivalently
        // priors((1,1,1)) equals brute-force normalization of (e,e,e,1).
        let p = class_priors(&[1.0, 1.0, 1.0]);
        let e = std::f64::consts::E;
        let raw = [e, e, e, 1.0];
        let total: f64 = raw.iter().sum();
        for (a, b) in p.iter().zip(raw.iter().map(|v| v / total)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_point_unit_height_density() {
        // n = 1, B = 0, sigma^2 = 1/(2 pi), y on the mean: log density 0.
        let spec = ModelSpec::new(1, Trend::Quadratic);
        let s = subject(&[0], &[100.0]);
        let beta = [100.0, 0.0, 0.0, 0.0, 0.0];
        let sigma = (1.0 / (2.0 * std::f64::consts::PI)).sqrt();
        let ll = subject_class_loglik(&s, &beta, [0.0; 3], sigma, &spec, 1).unwrap();
        assert!(ll.abs() < 1e-12, "{ll}");
    }

    #[test]
    fn two_point_determinant_by_hand() {
        // Z = [[1,0],[1,1]], B = I, sigma^2 = 1: V = [[2,1],[1,3]], det 5.
        let mut spec = ModelSpec::new(1, Trend::Quadratic);
        spec.time_scale_days = 100.0;
        let s = subject(&[0, 100], &[50.0, 50.0]);
        let beta = [50.0, 0.0, 0.0, 0.0, 0.0];
        let ll = subject_class_loglik(&s, &beta, [1.0, 0.0, 1.0], 1.0, &spec, 1).unwrap();
        let expected = -0.5 * (2.0 * LN_2PI + 5.0f64.ln());
        assert!((ll - expected).abs() < 1e-12, "{ll} vs {expected}");
    }

    #[test]
    fn singular_sigma_is_an_error_with_class_index() {
        let spec = ModelSpec::new(1, Trend::Linear);
        let s = subject(&[0, 10, 20], &[1.0, 2.0, 3.0]);
        let err = subject_class_loglik(&s, &[0.0; 4], [0.0; 3], 0.0, &spec, 3).unwrap_err();
        match err {
            Error::SingularCovariance { class } => assert_eq!(class, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn toy_cohort(seed: u64, n_subjects: usize) -> Cohort {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let subjects = (0..n_subjects)
            .map(|i| {
                let n = rng.gen_range(3..8);
                let mut times: Vec<i64> = Vec::new();
                while times.len() < n {
                    let t = rng.gen_range(-700..2000);
                    if !times.contains(&t) {
                        times.push(t);
                    }
                }
                times.sort_unstable();
                // At least two post-treatment times.
                times[n - 1] = times[n - 1].abs().max(1);
                times[n - 2] = (times[n - 2].abs() + 1).min(times[n - 1] - 1).max(0);
                times.sort_unstable();
                times.dedup();
                let measurements = times
                    .iter()
                    .map(|&t| Measurement {
                        time_days: t,
                        value: rng.gen_range(0.5..4.0),
                    })
                    .collect();
                Subject {
                    id: format!("S{i}"),
                    measurements,
                    event: None,
                }
            })
            .collect();
        Cohort {
            subjects,
            provenance: Default::default(),
        }
    }

    fn random_params(rng: &mut ChaCha12Rng, shape: &ParamShape) -> Parameters {
        let beta = (0..shape.n_classes)
            .map(|_| (0..shape.n_fixed).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let logits = (0..shape.n_classes - 1)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let chol_b = (0..shape.n_variance_blocks())
            .map(|_| {
                [
                    rng.gen_range(0.2..1.2),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.2..1.2),
                ]
            })
            .collect();
        let log_sigma = (0..shape.n_variance_blocks())
            .map(|_| rng.gen_range(-0.8..0.5))
            .collect();
        Parameters {
            beta,
            logits,
            chol_b,
            log_sigma,
        }
    }

    #[test]
    fn pack_unpack_round_trip_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &sharing in &[VarianceSharing::Shared, VarianceSharing::ClassSpecific] {
            for g in 1..4 {
                let shape = ParamShape {
                    n_classes: g,
                    n_fixed: 5,
                    variance_sharing: sharing,
                };
                let params = random_params(&mut rng, &shape);
                let packed = params.pack();
                assert_eq!(packed.len(), shape.n_free());
                let back = Parameters::unpack(&packed, &shape).unwrap();
                assert_eq!(back, params);
                assert_eq!(back.pack(), packed);
            }
        }
    }

    #[test]
    fn single_class_mixture_equals_class_loglik_sum() {
        let spec = ModelSpec::new(1, Trend::Quadratic);
        let cohort = toy_cohort(3, 5);
        let layout = DesignLayout::full(&spec);
        let shape = ParamShape::of(&spec, &layout);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = random_params(&mut rng, &shape);
        let mix = mixture_loglik(&params, &cohort, &spec).unwrap();
        let direct: f64 = cohort
            .subjects
            .iter()
            .map(|s| {
                subject_class_loglik(
                    s,
                    &params.beta[0],
                    params.chol_b[0],
                    params.log_sigma[0].exp(),
                    &spec,
                    1,
                )
                .unwrap()
            })
            .sum();
        assert!((mix - direct).abs() < 1e-10);
    }

    #[test]
    fn identical_classes_collapse_to_single_class_value() {
        let spec1 = ModelSpec::new(1, Trend::Quadratic);
        let mut spec2 = ModelSpec::new(2, Trend::Quadratic);
        spec2.variance_sharing = VarianceSharing::Shared;
        let cohort = toy_cohort(5, 6);
        let layout = DesignLayout::full(&spec1);
        let shape1 = ParamShape::of(&spec1, &layout);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let p1 = random_params(&mut rng, &shape1);
        let p2 = Parameters {
            beta: vec![p1.beta[0].clone(), p1.beta[0].clone()],
            logits: vec![0.7],
            chol_b: p1.chol_b.clone(),
            log_sigma: p1.log_sigma.clone(),
        };
        let v1 = mixture_loglik(&p1, &cohort, &spec1).unwrap();
        let v2 = mixture_loglik(&p2, &cohort, &spec2).unwrap();
        assert!((v1 - v2).abs() < 1e-10, "{v1} vs {v2}");
    }

    #[test]
    fn label_permutation_leaves_loglik_unchanged() {
        let mut spec = ModelSpec::new(3, Trend::Quadratic);
        spec.variance_sharing = VarianceSharing::ClassSpecific;
        let cohort = toy_cohort(9, 6);
        let layout = DesignLayout::full(&spec);
        let shape = ParamShape::of(&spec, &layout);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let params = random_params(&mut rng, &shape);
        let base = mixture_loglik(&params, &cohort, &spec).unwrap();
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
            let permuted = params.permuted(&perm);
            let v = mixture_loglik(&permuted, &cohort, &spec).unwrap();
            assert!((v - base).abs() < 1e-10, "perm {perm:?}: {v} vs {base}");
        }
    }

    #[test]
    fn loglik_finite_over_reported_value_range() {
        // Values spanning the full recorded range must not overflow the
        // mixture evaluation anywhere in a broad parameter box.
        let spec = {
            let mut s = ModelSpec::new(2, Trend::Quadratic);
            s.variance_sharing = VarianceSharing::ClassSpecific;
            s
        };
        let mut cohort = toy_cohort(21, 4);
        let extremes = [0.001, 1.0, 433.5, 2000.0, 4335.0];
        for (i, s) in cohort.subjects.iter_mut().enumerate() {
            for (j, m) in s.measurements.iter_mut().enumerate() {
                m.value = extremes[(i + j) % extremes.len()];
            }
        }
        let layout = DesignLayout::full(&spec);
        let shape = ParamShape::of(&spec, &layout);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..40 {
            let mut params = random_params(&mut rng, &shape);
            for row in &mut params.beta {
                for b in row.iter_mut() {
                    *b = rng.gen_range(-4335.0..4335.0);
                }
            }
            for ls in &mut params.log_sigma {
                *ls = rng.gen_range(-5.0..8.0);
            }
            let v = mixture_loglik(&params, &cohort, &spec).unwrap();
            assert!(v.is_finite(), "non-finite loglik");
        }
    }

    #[test]
    fn collinearity_guard_drops_redundant_columns() {
        let spec = ModelSpec::new(2, Trend::Quadratic);
        let mut cohort = toy_cohort(31, 4);
        for s in &mut cohort.subjects {
            for m in &mut s.measurements {
                m.time_days = m.time_days.abs();
            }
            s.measurements.sort_by_key(|m| m.time_days);
            s.measurements.dedup_by_key(|m| m.time_days);
        }
        let layout = DesignLayout::for_cohort(&spec, &cohort);
        assert_eq!(
            layout.columns,
            vec![
                DesignColumn::Intercept,
                DesignColumn::TimeSq,
                DesignColumn::TreatmentTime
            ]
        );
        // Mixed cohort keeps everything.
        let full = DesignLayout::for_cohort(&spec, &toy_cohort(31, 4));
        assert_eq!(full.columns.len(), 5);
    }
}
