//! Cox proportional-hazards regression and Harrell's concordance index.
//!
//! The partial likelihood uses Efron's approximation for tied event times and
//! is maximised by Newton iteration with step halving. Covariates are centred
//! internally, which leaves coefficients and likelihood unchanged.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::biomarkers::{Biomarker, PatientBiomarkerRow};
use crate::error::{Error, Result};

/// Significance level reported alongside p-values. Never used for branching.
pub const SIGNIFICANCE: f64 = 0.05;

/// Standardised coefficient magnitude beyond which the likelihood is treated
/// as monotone (a hazard ratio above e^20 per standard deviation).
const MONOTONE_LIMIT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub time_days: f64,
    pub event: bool,
    pub age: f64,
    pub gender: f64,
    pub smoker: f64,
    pub fvc: Option<f64>,
    pub dlco: Option<f64>,
    pub biomarker: Option<f64>,
}

impl SurvivalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_days > 0.0 && self.time_days.is_finite()) {
            return Err(Error::Data(format!(
                "patient {}: time must be positive, got {}",
                self.patient_id, self.time_days
            )));
        }
        let present = [Some(self.age), Some(self.gender), Some(self.smoker), self.fvc, self.dlco, self.biomarker];
        if present.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("patient {}: non-finite covariate", self.patient_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Covariate {
    Age,
    Gender,
    Smoker,
    Fvc,
    Dlco,
    Biomarker,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::Gender => "gender",
            Covariate::Smoker => "smoker",
            Covariate::Fvc => "fvc",
            Covariate::Dlco => "dlco",
            Covariate::Biomarker => "biomarker",
        }
    }

    pub fn value(self, r: &SurvivalRecord) -> Option<f64> {
        match self {
            Covariate::Age => Some(r.age),
            Covariate::Gender => Some(r.gender),
            Covariate::Smoker => Some(r.smoker),
            Covariate::Fvc => r.fvc,
            Covariate::Dlco => r.dlco,
            Covariate::Biomarker => r.biomarker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub std_err: Vec<f64>,
    pub p_values: Vec<f64>,
    pub concordance: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the score at the returned coefficients.
    pub gradient_norm: f64,
    pub n: usize,
    pub n_events: usize,
    /// Records dropped for a missing covariate.
    pub n_dropped: usize,
}

impl CoxFit {
    /// `Σ_j β_j x_j` for one covariate row.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).fold(0.0, |acc, (b, v)| acc + b * v)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Harrell's C. A pair is comparable when the shorter time ends in an event;
/// it scores 1 when that subject has the higher risk, 0.5 on tied risk.
pub fn concordance_index(risk: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risk.len() != times.len() || risk.len() != events.len() {
        return Err(Error::Shape(format!(
            "concordance inputs differ in length: {} risks, {} times, {} events",
            risk.len(),
            times.len(),
            events.len()
        )));
    }
    let mut mass = 0.0;
    let mut pairs = 0.0;
    for i in 0..risk.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risk.len() {
            if times[i] < times[j] {
                pairs += 1.0;
                if risk[i] > risk[j] {
                    mass += 1.0;
                } else if risk[i] == risk[j] {
                    mass += 0.5;
                }
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::Undefined("no comparable pairs".into()));
    }
    Ok(mass / pairs)
}

struct Evaluation {
    ll: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

/// Efron log partial likelihood, score and observed information.
/// `order` lists subjects by descending time.
fn evaluate(x: &DMatrix<f64>, times: &[f64], events: &[bool], order: &[usize], beta: &DVector<f64>) -> Evaluation {
    let p = x.ncols();
    let eta = x * beta;
    let shift = eta.max();
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);

    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        while end < order.len() && times[order[end]] == t {
            end += 1;
        }
        let mut d = 0usize;
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        let mut d2 = DMatrix::zeros(p, p);
        for &i in &order[k..end] {
            let xi = x.row(i).transpose();
            let xx = &xi * xi.transpose();
            s0 += w[i];
            s1 += w[i] * &xi;
            s2 += w[i] * &xx;
            if events[i] {
                d += 1;
                d0 += w[i];
                d1 += w[i] * &xi;
                d2 += w[i] * &xx;
                ll += eta[i] - shift;
                grad += &xi;
            }
        }
        for l in 0..d {
            let f = l as f64 / d as f64;
            let den = s0 - f * d0;
            let a = (&s1 - f * &d1) / den;
            ll -= den.ln();
            grad -= &a;
            info += (&s2 - f * &d2) / den - &a * a.transpose();
        }
        k = end;
    }
    Evaluation { ll, grad, info }
}

/// Fits a Cox model on an explicit design matrix (rows are subjects).
pub fn cox_fit_matrix(
    x: &DMatrix<f64>,
    times: &[f64],
    events: &[bool],
    names: &[String],
    opts: &CoxOptions,
) -> Result<CoxFit> {
    let (n, p) = x.shape();
    if times.len() != n || events.len() != n || names.len() != p {
        return Err(Error::Shape(format!(
            "design is {n}×{p} but got {} times, {} events, {} names",
            times.len(),
            events.len(),
            names.len()
        )));
    }
    if p == 0 {
        return Err(Error::Argument("no covariates".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Data(format!("survival time must be positive, got {t}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite covariate value".into()));
    }
    let n_events = events.iter().filter(|e| **e).count();
    if n_events < 2 {
        return Err(Error::Data(format!("need at least 2 events, got {n_events}")));
    }

    let means: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let mut xc = x.clone();
    for j in 0..p {
        xc.column_mut(j).add_scalar_mut(-means[j]);
    }
    let sds: Vec<f64> = (0..p).map(|j| (xc.column(j).norm_squared() / n as f64).sqrt()).collect();
    for (j, sd) in sds.iter().enumerate() {
        if *sd == 0.0 || x.column(j).iter().all(|v| *v == x[(0, j)]) {
            return Err(Error::Data(format!("covariate `{}` is constant across all records", names[j])));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let monotone = |beta: &DVector<f64>| -> Option<usize> {
        (0..p)
            .filter(|&j| (beta[j] * sds[j]).abs() > MONOTONE_LIMIT)
            .max_by(|&a, &b| (beta[a] * sds[a]).abs().total_cmp(&(beta[b] * sds[b]).abs()))
    };
    let monotone_error = |j: usize| {
        Error::NonConvergence(format!(
            "monotone likelihood: coefficient for `{}` diverges (perfect separation)",
            names[j]
        ))
    };

    let mut beta = DVector::zeros(p);
    let mut ev = evaluate(&xc, times, events, &order, &beta);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        if ev.grad.amax() < opts.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        let Some(chol) = ev.info.clone().cholesky() else {
            return Err(match monotone(&beta) {
                Some(j) => monotone_error(j),
                None => Error::Numerical("singular information matrix".into()),
            });
        };
        let step = chol.solve(&ev.grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let candidate = &beta + scale * &step;
            let next = evaluate(&xc, times, events, &order, &candidate);
            if next.ll.is_finite() && next.ll >= ev.ll {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((b, next)) = accepted else {
            // no ascent possible: we are at the optimum up to rounding
            break;
        };
        beta = b;
        ev = next;
        if let Some(j) = monotone(&beta) {
            return Err(monotone_error(j));
        }
    }

    let Some(chol) = ev.info.clone().cholesky() else {
        return Err(Error::Numerical("singular information matrix at the solution".into()));
    };
    let cov = chol.inverse();
    let normal = Normal::standard();
    let std_err: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let p_values: Vec<f64> = (0..p)
        .map(|j| 2.0 * normal.cdf(-(beta[j] / std_err[j]).abs()))
        .collect();

    let mut fit = CoxFit {
        names: names.to_vec(),
        beta: beta.iter().copied().collect(),
        std_err,
        p_values,
        concordance: f64::NAN,
        log_likelihood: ev.ll,
        iterations,
        converged,
        gradient_norm: ev.grad.amax(),
        n,
        n_events,
        n_dropped: 0,
    };
    // the likelihood above was computed on shifted predictors; report it on
    // the raw scale so it is comparable across parameterisations
    fit.log_likelihood = log_partial_likelihood(x, times, events, &fit.beta);
    let risk: Vec<f64> = (0..n)
        .map(|i| fit.linear_predictor(&x.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    fit.concordance = concordance_index(&risk, times, events)?;
    Ok(fit)
}

/// Efron log partial likelihood at `beta` on the uncentred design.
pub fn log_partial_likelihood(x: &DMatrix<f64>, times: &[f64], events: &[bool], beta: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let b = DVector::from_column_slice(beta);
    // shifting every predictor by a constant leaves the value unchanged, so
    // centring keeps the exponentials in range
    let mut xc = x.clone();
    for j in 0..x.ncols() {
        let m = x.column(j).mean();
        xc.column_mut(j).add_scalar_mut(-m);
    }
    evaluate(&xc, times, events, &order, &b).ll
}

/// Design matrix for the records with every requested covariate present.
/// Returns the matrix, times, events and the number of dropped records.
pub fn design(records: &[SurvivalRecord], covariates: &[Covariate]) -> (DMatrix<f64>, Vec<f64>, Vec<bool>, usize) {
    let kept: Vec<(&SurvivalRecord, Vec<f64>)> = records
        .iter()
        .filter_map(|r| {
            let row: Option<Vec<f64>> = covariates.iter().map(|c| c.value(r)).collect();
            row.map(|row| (r, row))
        })
        .collect();
    let x = DMatrix::from_fn(kept.len(), covariates.len(), |i, j| kept[i].1[j]);
    let times = kept.iter().map(|(r, _)| r.time_days).collect();
    let events = kept.iter().map(|(r, _)| r.event).collect();
    (x, times, events, records.len() - kept.len())
}

/// Cox fit on survival records; records missing any requested covariate are
/// dropped and counted in `n_dropped`.
pub fn cox_fit(records: &[SurvivalRecord], covariates: &[Covariate], opts: &CoxOptions) -> Result<CoxFit> {
    for r in records {
        r.validate()?;
    }
    let (x, times, events, dropped) = design(records, covariates);
    let names: Vec<String> = covariates.iter().map(|c| c.name().to_string()).collect();
    let mut fit = cox_fit_matrix(&x, &times, &events, &names, opts)?;
    fit.n_dropped = dropped;
    Ok(fit)
}

/// Exponential survival times with hazard `base_rate·exp(η)` and independent
/// exponential censoring at `censor_rate`.
pub fn simulate_survival(eta: &[f64], base_rate: f64, censor_rate: f64, rng: &mut impl Rng) -> Vec<(f64, bool)> {
    eta.iter()
        .map(|e| {
            let t = Exp::new(base_rate * e.exp()).expect("positive rate").sample(rng);
            if censor_rate > 0.0 {
                let c = Exp::new(censor_rate).expect("positive rate").sample(rng);
                if c < t {
                    return (c, false);
                }
            }
            (t, true)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordRow {
    patient_id: String,
    time_days: f64,
    event: u8,
    age: f64,
    gender: f64,
    smoker: f64,
    fvc: Option<f64>,
    dlco: Option<f64>,
    biomarker: Option<f64>,
}

pub const RECORD_HEADER: [&str; 9] = [
    "patient_id",
    "time_days",
    "event",
    "age",
    "gender",
    "smoker",
    "fvc",
    "dlco",
    "biomarker",
];

pub fn read_records(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: RecordRow = row.map_err(|e| Error::csv(path, e))?;
        if r.event > 1 {
            return Err(Error::Data(format!("patient {}: event must be 0 or 1", r.patient_id)));
        }
        let rec = SurvivalRecord {
            patient_id: r.patient_id,
            time_days: r.time_days,
            event: r.event == 1,
            age: r.age,
            gender: r.gender,
            smoker: r.smoker,
            fvc: r.fvc,
            dlco: r.dlco,
            biomarker: r.biomarker,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    if records.is_empty() {
        w.write_record(RECORD_HEADER).map_err(|e| Error::csv(path, e))?;
    }
    for r in records {
        w.serialize(RecordRow {
            patient_id: r.patient_id.clone(),
            time_days: r.time_days,
            event: r.event as u8,
            age: r.age,
            gender: r.gender,
            smoker: r.smoker,
            fvc: r.fvc,
            dlco: r.dlco,
            biomarker: r.biomarker,
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The three model families: biomarker alone, and biomarker adjusted for
/// age, gender, smoking and one lung-function measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Univariable,
    Dlco,
    Fvc,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Univariable, Model::Dlco, Model::Fvc];

    pub fn name(self) -> &'static str {
        match self {
            Model::Univariable => "univariable",
            Model::Dlco => "dlco",
            Model::Fvc => "fvc",
        }
    }

    pub fn covariates(self) -> Vec<Covariate> {
        use Covariate::*;
        match self {
            Model::Univariable => vec![Biomarker],
            Model::Dlco => vec![Age, Gender, Smoker, Dlco, Biomarker],
            Model::Fvc => vec![Age, Gender, Smoker, Fvc, Biomarker],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCell {
    pub model: Model,
    pub fit: std::result::Result<CoxFit, String>,
}

impl ModelCell {
    /// Concordance and the biomarker's Wald p, when the fit succeeded.
    pub fn summary(&self) -> Option<(f64, f64, usize)> {
        let fit = self.fit.as_ref().ok()?;
        let j = fit.index_of(Covariate::Biomarker.name())?;
        Some((fit.concordance, fit.p_values[j], fit.n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub biomarker: String,
    pub method: String,
    pub cells: Vec<ModelCell>,
}

/// One table row per (biomarker, method) present in `biomarkers` for the
/// chosen aggregation, each fitted under all three models. Patients without a
/// biomarker value for a row are dropped from that row's fits.
pub fn survival_table(
    clinical: &[SurvivalRecord],
    biomarkers: &[PatientBiomarkerRow],
    aggregation: &str,
    opts: &CoxOptions,
) -> Vec<TableRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in biomarkers {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut rows = Vec::new();
    for b in Biomarker::ALL {
        for method in &methods {
            let values: HashMap<&str, f64> = biomarkers
                .iter()
                .filter(|r| r.biomarker == b.name() && r.method == *method && r.aggregation == aggregation)
                .map(|r| (r.patient_id.as_str(), r.value))
                .collect();
            if values.is_empty() {
                continue;
            }
            let records: Vec<SurvivalRecord> = clinical
                .iter()
                .map(|c| SurvivalRecord {
                    biomarker: values.get(c.patient_id.as_str()).copied(),
                    ..c.clone()
                })
                .collect();
            let cells = Model::ALL
                .into_iter()
                .map(|model| ModelCell {
                    model,
                    fit: cox_fit(&records, &model.covariates(), opts).map_err(|e| e.to_string()),
                })
                .collect();
            rows.push(TableRow {
                biomarker: b.name().to_string(),
                method: method.to_string(),
                cells,
            });
        }
    }
    rows
}

pub const TABLE_HEADER: [&str; 11] = [
    "biomarker",
    "method",
    "univariable_n",
    "univariable_c_index",
    "univariable_p_value",
    "dlco_n",
    "dlco_c_index",
    "dlco_p_value",
    "fvc_n",
    "fvc_c_index",
    "fvc_p_value",
];

pub const COEFFICIENT_HEADER: [&str; 12] = [
    "biomarker",
    "method",
    "model",
    "covariate",
    "beta",
    "std_err",
    "p_value",
    "significant",
    "is_biomarker",
    "n",
    "n_dropped",
    "status",
];

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Wide table (one row per biomarker and method, C index and biomarker p per
/// model) and a long table of every coefficient.
pub fn write_table(table_path: &Path, coef_path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(table_path).map_err(|e| Error::csv(table_path, e))?;
    w.write_record(TABLE_HEADER).map_err(|e| Error::csv(table_path, e))?;
    for r in rows {
        let mut rec = vec![r.biomarker.clone(), r.method.clone()];
        for c in &r.cells {
            let s = c.summary();
            rec.push(s.map(|s| s.2.to_string()).unwrap_or_default());
            rec.push(cell(s.map(|s| s.0)));
            rec.push(cell(s.map(|s| s.1)));
        }
        w.write_record(&rec).map_err(|e| Error::csv(table_path, e))?;
    }
    w.flush().map_err(|e| Error::io(table_path, e))?;

    let mut w = csv::Writer::from_path(coef_path).map_err(|e| Error::csv(coef_path, e))?;
    w.write_record(COEFFICIENT_HEADER).map_err(|e| Error::csv(coef_path, e))?;
    for r in rows {
        for c in &r.cells {
            match &c.fit {
                Ok(fit) => {
                    for j in 0..fit.names.len() {
                        let status = if fit.converged { "converged" } else { "max_iterations" };
                        w.write_record([
                            r.biomarker.clone(),
                            r.method.clone(),
                            c.model.name().to_string(),
                            fit.names[j].clone(),
                            format!("{}", fit.beta[j]),
                            format!("{}", fit.std_err[j]),
                            format!("{}", fit.p_values[j]),
                            (fit.p_values[j] < SIGNIFICANCE).to_string(),
                            (fit.names[j] == Covariate::Biomarker.name()).to_string(),
                            fit.n.to_string(),
                            fit.n_dropped.to_string(),
                            status.to_string(),
                        ])
                        .map_err(|e| Error::csv(coef_path, e))?;
                    }
                }
                Err(msg) => {
                    let status = format!("error: {msg}");
                    let mut rec = vec![r.biomarker.clone(), r.method.clone(), c.model.name().to_string()];
                    rec.extend(std::iter::repeat_n(String::new(), 8));
                    rec.push(status);
                    w.write_record(&rec).map_err(|e| Error::csv(coef_path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(coef_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_and_reversed_predictors() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        let e = [true; 5];
        let risk = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(concordance_index(&risk, &t, &e).unwrap(), 1.0);
        let neg: Vec<f64> = risk.iter().map(|r| -r).collect();
        assert_eq!(concordance_index(&neg, &t, &e).unwrap(), 0.0);
        assert_eq!(concordance_index(&[1.0; 5], &t, &e).unwrap(), 0.5);
    }

    #[test]
    fn all_censored_is_undefined() {
        let r = concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]);
        assert!(matches!(r, Err(Error::Undefined(_))));
        assert!(matches!(concordance_index(&[1.0], &[1.0, 2.0], &[true, true]), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_covariate_is_rejected() {
        let x = DMatrix::from_element(6, 1, 3.0);
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = cox_fit_matrix(&x, &t, &[true; 6], &names(&["x"]), &CoxOptions::default());
        assert!(matches!(r, Err(Error::Data(m)) if m.contains("`x`")));
    }

    #[test]
    fn too_few_events_rejected() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let r = cox_fit_matrix(&x, &[1.0, 2.0, 3.0, 4.0], &[true, false, false, false], &names(&["x"]), &CoxOptions::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn perfect_separation_names_covariate() {
        // higher x always dies first
        let n = 12;
        let xs: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let noise: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
        let mut data = xs.clone();
        data.extend(&noise);
        let x = DMatrix::from_column_slice(n, 2, &data);
        let t: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let r = cox_fit_matrix(&x, &t, &vec![true; n], &names(&["sep", "noise"]), &CoxOptions::default());
        assert!(matches!(&r, Err(Error::NonConvergence(m)) if m.contains("`sep`")), "{r:?}");
    }

    #[test]
    fn missing_covariates_are_dropped_and_counted() {
        let recs: Vec<SurvivalRecord> = (0..30)
            .map(|i| SurvivalRecord {
                patient_id: format!("P{i}"),
                time_days: 100.0 + ((i * 37) % 29) as f64 * 10.0,
                event: i % 4 != 0,
                age: 60.0 + (i % 7) as f64,
                gender: (i % 2) as f64,
                smoker: ((i / 2) % 2) as f64,
                fvc: if i % 10 == 3 { None } else { Some(70.0 + ((i * 13) % 11) as f64) },
                dlco: None,
                biomarker: Some(((i * 17) % 23) as f64 / 10.0),
            })
            .collect();
        let fit = cox_fit(&recs, &Model::Fvc.covariates(), &CoxOptions::default()).unwrap();
        assert_eq!(fit.n_dropped, 3);
        assert_eq!(fit.n, 27);
        assert!(fit.converged && fit.gradient_norm < 1e-8);
        let err = cox_fit(&recs, &Model::Dlco.covariates(), &CoxOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let recs = vec![
            SurvivalRecord {
                patient_id: "A".into(),
                time_days: 365.0,
                event: true,
                age: 70.5,
                gender: 1.0,
                smoker: 0.0,
                fvc: Some(80.0),
                dlco: None,
                biomarker: Some(0.12),
            },
            SurvivalRecord {
                patient_id: "B".into(),
                time_days: 12.0,
                event: false,
                age: 61.0,
                gender: 0.0,
                smoker: 1.0,
                fvc: None,
                dlco: Some(40.0),
                biomarker: None,
            },
        ];
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }
}
