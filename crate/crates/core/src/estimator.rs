//! Maximum-likelihood estimation of the latent-class mixed model:
//! multi-start quasi-Newton ascent on the packed parameter vector,
//! information criteria, canonical class ordering, and model-selection
//! grids.
//!
//! Estimation runs on standardized responses (y divided by the cohort
//! standard deviation) so tolerances and the degenerate-parameter bound
//! apply to comparable coordinate scales; reported parameters are mapped
//! back to the raw scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Cohort;
use crate::model::{
    class_logliks, log_sum_exp, mixture_loglik_set, mixture_value_grad_set, DesignLayout,
    DesignSet, ModelSpec, ParamShape, Parameters, Trend, VarianceSharing,
};
use crate::optimize::{self, BfgsOptions, StopReason};

/// Coordinate bound (standardized scale) past which a start is declared
/// degenerate.
const COORD_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub rel_ll_tol: f64,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 10,
            seed: 1,
            max_iterations: 500,
            rel_ll_tol: 1e-8,
            grad_tol: 1e-4,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::InvalidArgument("n_starts must be >= 1".into()));
        }
        if !(self.rel_ll_tol > 0.0) || !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    /// Final log-likelihood on the raw scale; None when the start never
    /// produced a feasible evaluation.
    pub loglik: Option<f64>,
    pub converged: bool,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub tool_version: String,
    pub seed: u64,
    pub input_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub layout: DesignLayout,
    pub params: Parameters,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub converged: bool,
    pub starts_summary: Vec<StartSummary>,
    /// 1-based indices of classes to which no training subject was
    /// assigned (a warning, not an error).
    pub empty_classes: Vec<usize>,
    pub provenance: Option<ModelProvenance>,
}

impl FittedModel {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn shape(&self) -> ParamShape {
        ParamShape::of(&self.spec, &self.layout)
    }

    /// Class-specific marginal mean at time 0 on the treated side; the
    /// canonical ordering key.
    pub fn mean_at_treatment_start(&self, class: usize) -> f64 {
        let row = self.layout.row(0.0);
        row.iter()
            .zip(&self.params.beta[class])
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<FittedModel> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("model.json parse failure: {e}")))
    }
}

/// Deterministic ordered parallel map: output order always matches input
/// order, independent of the worker count.
pub fn ordered_chunked_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    items.par_iter().with_min_len(8).map(f).collect()
}

/// Seed for an indexed deterministic substream (splitmix64 finalizer).
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn information_criteria(loglik: f64, n_params: usize, n_subjects: usize) -> (f64, f64) {
    let p = n_params as f64;
    let aic = -2.0 * loglik + 2.0 * p;
    let bic = -2.0 * loglik + p * (n_subjects as f64).ln();
    (aic, bic)
}

/// Maximize the mixture likelihood with `options.n_starts` seeded starts
/// and return the best fit, canonically ordered.
pub fn fit(cohort: &Cohort, spec: &ModelSpec, options: &FitOptions) -> Result<FittedModel> {
    spec.validate()?;
    options.validate()?;
    if cohort.subjects.is_empty() {
        return Err(Error::InvalidArgument("cohort is empty".into()));
    }

    let layout = DesignLayout::for_cohort(spec, cohort);
    let set = DesignSet::build(cohort, spec, &layout);
    let scale = response_scale(&set);
    let set_std = set.scaled_responses(scale);
    let shape = ParamShape::of(spec, &layout);
    let n_obs = set.n_observations();

    // Single-class baseline the starts grow from.
    let baseline = fit_single_class(&set_std, &layout, spec, options)?;

    let bfgs_opts = BfgsOptions {
        max_iterations: options.max_iterations,
        rel_f_tol: options.rel_ll_tol,
        grad_tol: options.grad_tol,
        coord_bound: Some(COORD_BOUND),
    };
    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let params = Parameters::unpack(x, &shape).ok()?;
        mixture_value_grad_set(&set_std, &params, &shape).ok()
    };

    let starts: Vec<(usize, optimize::BfgsResult)> = (0..options.n_starts)
        .into_par_iter()
        .map(|idx| {
            let x0 = initial_point(&baseline, &shape, options.seed, idx);
            (idx, optimize::maximize(&objective, &x0, &bfgs_opts))
        })
        .collect();

    let mut summaries = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, &optimize::BfgsResult)> = None;
    for (idx, res) in &starts {
        let feasible = res.reason != StopReason::InfeasibleStart && res.f.is_finite();
        summaries.push(StartSummary {
            start: idx + 1,
            loglik: feasible.then(|| res.f - n_obs as f64 * scale.ln()),
            converged: res.converged,
            note: format!("{:?}", res.reason),
        });
        if feasible {
            let better = match best {
                None => true,
                Some((_, b)) => res.f > b.f,
            };
            if better {
                best = Some((*idx, res));
            }
        }
    }
    let Some((_, winner)) = best else {
        return Err(Error::EstimationFailed {
            n_starts: options.n_starts,
            diagnostics: summaries
                .iter()
                .map(|s| format!("start {}: {}", s.start, s.note))
                .collect(),
        });
    };

    let mut params = Parameters::unpack(&winner.x, &shape)?;
    unstandardize(&mut params, scale);
    params.canonical_chol_signs();

    // Exact raw-scale log-likelihood at the optimum.
    let loglik = mixture_loglik_set(&set, &params, &shape)?;
    let n_params = shape.n_free();
    let (aic, bic) = information_criteria(loglik, n_params, cohort.n_subjects());

    let mut model = FittedModel {
        spec: spec.clone(),
        layout,
        params,
        loglik,
        n_params,
        aic,
        bic,
        n_subjects: cohort.n_subjects(),
        n_observations: n_obs,
        converged: winner.converged,
        starts_summary: summaries,
        empty_classes: Vec::new(),
        provenance: None,
    };
    model = canonical_order(model);
    model.empty_classes = empty_classes(&set, &model);
    Ok(model)
}

fn response_scale(set: &DesignSet) -> f64 {
    let n: usize = set.subjects.iter().map(|s| s.n).sum();
    if n == 0 {
        return 1.0;
    }
    let mean: f64 = set.subjects.iter().flat_map(|s| s.y.iter()).sum::<f64>() / n as f64;
    let var: f64 = set
        .subjects
        .iter()
        .flat_map(|s| s.y.iter().map(|v| (v - mean).powi(2)))
        .sum::<f64>()
        / n as f64;
    let sd = var.sqrt();
    if sd.is_finite() && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

fn unstandardize(params: &mut Parameters, scale: f64) {
    for row in &mut params.beta {
        for b in row.iter_mut() {
            *b *= scale;
        }
    }
    for ch in &mut params.chol_b {
        for c in ch.iter_mut() {
            *c *= scale;
        }
    }
    for ls in &mut params.log_sigma {
        *ls += scale.ln();
    }
}

/// One-class fit on the standardized responses; the germ of every start.
fn fit_single_class(
    set_std: &DesignSet,
    layout: &DesignLayout,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<Parameters> {
    let shape1 = ParamShape {
        n_classes: 1,
        n_fixed: layout.n_fixed(),
        variance_sharing: VarianceSharing::Shared,
    };
    let n: usize = set_std.subjects.iter().map(|s| s.n).sum();
    let mean: f64 = set_std.subjects.iter().flat_map(|s| s.y.iter()).sum::<f64>() / n as f64;
    let mut beta0 = vec![0.0; shape1.n_fixed];
    beta0[0] = mean;
    let init = Parameters {
        beta: vec![beta0],
        logits: vec![],
        chol_b: vec![[0.6, 0.0, 0.2]],
        log_sigma: vec![0.6f64.ln()],
    };
    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let params = Parameters::unpack(x, &shape1).ok()?;
        mixture_value_grad_set(set_std, &params, &shape1).ok()
    };
    let res = optimize::maximize(
        &objective,
        &init.pack(),
        &BfgsOptions {
            max_iterations: options.max_iterations,
            rel_f_tol: options.rel_ll_tol,
            grad_tol: options.grad_tol,
            coord_bound: Some(COORD_BOUND),
        },
    );
    if res.reason == StopReason::InfeasibleStart || !res.f.is_finite() {
        return Err(Error::EstimationFailed {
            n_starts: 1,
            diagnostics: vec!["single-class baseline fit failed".into()],
        });
    }
    Parameters::unpack(&res.x, &shape1)
}

/// Start `idx`: baseline beta replicated per class and perturbed by
/// N(0, s_j^2) with s_j = max(0.1, 0.1 |beta_j|); variance parameters
/// copied; logits zero for the first start, uniform in [-1, 1] after.
fn initial_point(baseline: &Parameters, shape: &ParamShape, seed: u64, idx: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(substream_seed(seed, idx as u64));
    let g = shape.n_classes;
    let base_beta = &baseline.beta[0];
    let beta = (0..g)
        .map(|_| {
            base_beta
                .iter()
                .map(|b| {
                    let s = (0.1 * b.abs()).max(0.1);
                    let eps: f64 = rng.sample(StandardNormal);
                    b + s * eps
                })
                .collect()
        })
        .collect();
    let logits = (0..g - 1)
        .map(|_| {
            if idx == 0 {
                0.0
            } else {
                rng.gen_range(-1.0..=1.0)
            }
        })
        .collect();
    let blocks = shape.n_variance_blocks();
    let params = Parameters {
        beta,
        logits,
        chol_b: vec![baseline.chol_b[0]; blocks],
        log_sigma: vec![baseline.log_sigma[0]; blocks],
    };
    params.pack()
}

/// Relabel classes in ascending order of the class mean at treatment
/// start (ties broken by ascending prior); idempotent, log-likelihood
/// preserving.
pub fn canonical_order(model: FittedModel) -> FittedModel {
    let g = model.n_classes();
    let priors = model.params.priors();
    let mut order: Vec<usize> = (0..g).collect();
    let keys: Vec<f64> = (0..g).map(|c| model.mean_at_treatment_start(c)).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .partial_cmp(&keys[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                priors[a]
                    .partial_cmp(&priors[b])
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return model;
    }
    let mut out = model;
    out.params = out.params.permuted(&order);
    let inverse: Vec<usize> = {
        let mut inv = vec![0; g];
        for (new, &old) in order.iter().enumerate() {
            inv[old] = new;
        }
        inv
    };
    out.empty_classes = out
        .empty_classes
        .iter()
        .map(|c| inverse[c - 1] + 1)
        .collect();
    out.empty_classes.sort_unstable();
    out
}

/// Hard class assignments (0-based) by maximum posterior; ties to the
/// lowest index.
pub(crate) fn hard_assignments(set: &DesignSet, params: &Parameters) -> Result<Vec<usize>> {
    let log_pi: Vec<f64> = params.priors().iter().map(|p| p.ln()).collect();
    ordered_chunked_map(&set.subjects, |sd| {
        let lls = class_logliks(sd, set.k, params)?;
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (cls, (ll, lp)) in lls.iter().zip(&log_pi).enumerate() {
            let v = ll + lp;
            if v > best_v {
                best_v = v;
                best = cls;
            }
        }
        Ok(best)
    })
}

fn empty_classes(set: &DesignSet, model: &FittedModel) -> Vec<usize> {
    match hard_assignments(set, &model.params) {
        Ok(assignments) => {
            let mut counts = vec![0usize; model.n_classes()];
            for a in assignments {
                counts[a] += 1;
            }
            counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == 0)
                .map(|(i, _)| i + 1)
                .collect()
        }
        Err(_) => Vec::new(),
    }
}

/// Subject log-posterior numerators, exposed for the selection grid.
pub(crate) fn assigned_counts(set: &DesignSet, params: &Parameters) -> Result<Vec<usize>> {
    let assignments = hard_assignments(set, params)?;
    let mut counts = vec![0usize; params.n_classes()];
    for a in assignments {
        counts[a] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub trend: Trend,
    pub n_classes: usize,
    pub loglik: Option<f64>,
    pub n_params: usize,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub class_counts: Vec<usize>,
    pub class_percent: Vec<f64>,
    /// 1-based classes holding fewer than 2% of subjects.
    pub tiny_classes: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTable {
    pub n_subjects: usize,
    pub rows: Vec<SelectionRow>,
}

impl SelectionTable {
    /// Row with the lowest BIC among converged fits.
    pub fn best_by_bic(&self) -> Option<&SelectionRow> {
        self.rows
            .iter()
            .filter(|r| r.bic.is_some())
            .min_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap())
    }

    pub fn to_tsv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "trend\tn_classes\tloglik\tn_params\taic\tbic\tconverged\tclass_counts\tclass_percent\ttiny_classes\tnote"
        );
        for r in &self.rows {
            let fmt_opt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.2}"),
                None => "n/a".to_string(),
            };
            let counts = r
                .class_counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let pct = r
                .class_percent
                .iter()
                .map(|p| format!("{p:.1}"))
                .collect::<Vec<_>>()
                .join(",");
            let tiny = if r.tiny_classes.is_empty() {
                "-".to_string()
            } else {
                r.tiny_classes
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.trend,
                r.n_classes,
                fmt_opt(r.loglik),
                r.n_params,
                fmt_opt(r.aic),
                fmt_opt(r.bic),
                r.converged,
                counts,
                pct,
                tiny,
                r.error.as_deref().unwrap_or("-"),
            );
        }
        out
    }
}

/// Fit every (trend, class-count) cell and report the grid; cells that
/// fail to estimate are reported, never fatal.
pub fn select_models(
    cohort: &Cohort,
    class_range: &[usize],
    trends: &[Trend],
    base: &ModelSpec,
    options: &FitOptions,
) -> Result<SelectionTable> {
    if class_range.is_empty() {
        return Err(Error::InvalidArgument("class range is empty".into()));
    }
    let n = cohort.n_subjects();
    let mut rows = Vec::new();
    for &trend in trends {
        for &g in class_range {
            let mut spec = base.clone();
            spec.trend = trend;
            spec.n_classes = g;
            if trend != Trend::Quadratic {
                spec.quadratic_treatment_interaction = false;
            }
            let row = match fit(cohort, &spec, options) {
                Ok(model) => {
                    let layout = model.layout.clone();
                    let set = DesignSet::build(cohort, &spec, &layout);
                    let counts = assigned_counts(&set, &model.params).unwrap_or_default();
                    let percent: Vec<f64> = counts
                        .iter()
                        .map(|&c| 100.0 * c as f64 / n as f64)
                        .collect();
                    let tiny = percent
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p < 2.0)
                        .map(|(i, _)| i + 1)
                        .collect();
                    SelectionRow {
                        trend,
                        n_classes: g,
                        loglik: Some(model.loglik),
                        n_params: model.n_params,
                        aic: Some(model.aic),
                        bic: Some(model.bic),
                        converged: model.converged,
                        class_counts: counts,
                        class_percent: percent,
                        tiny_classes: tiny,
                        error: None,
                    }
                }
                Err(e) => SelectionRow {
                    trend,
                    n_classes: g,
                    loglik: None,
                    n_params: 0,
                    aic: None,
                    bic: None,
                    converged: false,
                    class_counts: vec![],
                    class_percent: vec![],
                    tiny_classes: vec![],
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    Ok(SelectionTable {
        n_subjects: n,
        rows,
    })
}

/// Per-subject mixture log-density under a fitted model (used by the
/// selection grid and diagnostics).
pub fn subject_mixture_loglik(set: &DesignSet, params: &Parameters) -> Result<Vec<f64>> {
    let log_pi: Vec<f64> = params.priors().iter().map(|p| p.ln()).collect();
    ordered_chunked_map(&set.subjects, |sd| {
        let lls = class_logliks(sd, set.k, params)?;
        let weighted: Vec<f64> = lls.iter().zip(&log_pi).map(|(l, lp)| l + lp).collect();
        Ok(log_sum_exp(&weighted))
    })
}
