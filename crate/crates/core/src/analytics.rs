//! Statistics: OLS with significance tests, type contrasts, t tests, binned
//! curves and a two-component PCA.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TargetType, TaskRecord};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("need more observations than parameters (n = {n}, p = {p})")]
    TooFewObservations { n: usize, p: usize },
    #[error("design matrix is rank deficient; column(s) {} depend on earlier columns", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T, E = AnalyticsError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let tail = 0.5 * reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p value of a t statistic.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// Upper-tail probability of an F(d1, d2) statistic.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// OLS
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residual_variance: f64,
    pub f_statistic: f64,
    /// (p − 1, n − p).
    pub f_dof: (usize, usize),
    pub f_p_value: f64,
    pub r2: f64,
    pub n: usize,
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Fitted values for the rows of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (x * DVector::from_column_slice(&self.coefficients)).iter().copied().collect()
    }

    pub fn to_text(&self, title: &str) -> String {
        let mut s = format!("{title}\n");
        let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>9} {:>10}", "term", "coef", "std err", "t", "p");
        for i in 0..self.names.len() {
            let _ = writeln!(
                s,
                "{:<16} {:>10.4} {:>10.4} {:>9.2} {:>10}",
                self.names[i],
                self.coefficients[i],
                self.std_errors[i],
                self.t_values[i],
                format_p(self.p_values[i])
            );
        }
        let _ = writeln!(
            s,
            "n = {}, R² = {:.4}, F({}, {}) = {:.2}, p {}",
            self.n,
            self.r2,
            self.f_dof.0,
            self.f_dof.1,
            self.f_statistic,
            format_p(self.f_p_value)
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,coef,std_err,t,p\n");
        for i in 0..self.names.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.names[i], self.coefficients[i], self.std_errors[i], self.t_values[i], self.p_values[i]
            );
        }
        s
    }
}

pub fn format_p(p: f64) -> String {
    if p < 1e-3 {
        "<.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Ordinary least squares. `x` carries its own intercept column if one is
/// wanted; `names` labels the columns.
pub fn ols(x: &DMatrix<f64>, y: &[f64], names: &[&str]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(AnalyticsError::LengthMismatch(n, y.len()));
    }
    if names.len() != p {
        return Err(AnalyticsError::LengthMismatch(p, names.len()));
    }
    if n <= p {
        return Err(AnalyticsError::TooFewObservations { n, p });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let col_scale: Vec<f64> = (0..p).map(|j| x.column(j).norm()).collect();
    let dependent: Vec<String> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= 1e-10 * col_scale[j].max(diag_max * 1e-3).max(f64::MIN_POSITIVE))
        .map(|j| names[j].to_string())
        .collect();
    if !dependent.is_empty() {
        return Err(AnalyticsError::RankDeficient(dependent));
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| AnalyticsError::RankDeficient(names.iter().map(|s| s.to_string()).collect()))?;
    let fitted = x * &beta;
    let ss_res: f64 = (&yv - &fitted).iter().map(|e| e * e).sum();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let dof = (n - p) as f64;
    let sigma2 = ss_res / dof;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .expect("non-singular R");
    let cov_diag: Vec<f64> = (0..p).map(|j| r_inv.row(j).iter().map(|v| v * v).sum::<f64>() * sigma2).collect();
    let std_errors: Vec<f64> = cov_diag.iter().map(|v| v.sqrt()).collect();
    let t_values: Vec<f64> = beta.iter().zip(&std_errors).map(|(b, s)| b / s).collect();
    let p_values = t_values.iter().map(|&t| t_two_sided_p(t, dof)).collect();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    let (f_statistic, f_p_value) = if p > 1 {
        let f = (r2 / (p - 1) as f64) / ((1.0 - r2) / dof);
        (f.max(0.0), f_sf(f, (p - 1) as f64, dof))
    } else {
        (0.0, 1.0)
    };
    Ok(OlsFit {
        names: names.iter().map(|s| s.to_string()).collect(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        t_values,
        p_values,
        residual_variance: sigma2,
        f_statistic,
        f_dof: (p - 1, n - p),
        f_p_value,
        r2,
        n,
    })
}

/// Design matrix with a leading intercept column followed by `columns`.
pub fn design_with_intercept(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let n = columns.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

/// Predictors of the layout regression.
pub const LAYOUT_FEATURES: [&str; 3] = ["y", "area", "n_candidates"];

/// Search seconds regressed on target y, area and candidate count, with
/// target-type dummies (image reference) as controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutRegression {
    /// Predictors z-scored with the population standard deviation.
    pub standardized: OlsFit,
    /// Predictors in pixels, square pixels and counts.
    pub raw: OlsFit,
}

impl LayoutRegression {
    pub fn to_text(&self) -> String {
        format!(
            "{}\n{}",
            self.standardized.to_text("standardized predictors"),
            self.raw.to_text("raw predictors")
        )
    }
}

fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(AnalyticsError::Degenerate("constant predictor".into()));
    }
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

pub fn layout_regression(records: &[TaskRecord]) -> Result<LayoutRegression> {
    let raw_cols: Vec<Vec<f64>> = vec![
        records.iter().map(|r| r.bbox.y).collect(),
        records.iter().map(|r| r.bbox.area()).collect(),
        records.iter().map(|r| f64::from(r.n_candidates)).collect(),
    ];
    let present: Vec<TargetType> = TargetType::ALL[1..]
        .iter()
        .copied()
        .filter(|t| records.iter().any(|r| r.target_type == *t))
        .collect();
    let dummies: Vec<Vec<f64>> = present
        .iter()
        .map(|t| records.iter().map(|r| f64::from(u8::from(r.target_type == *t))).collect())
        .collect();
    let mut names = vec!["intercept"];
    names.extend(LAYOUT_FEATURES);
    names.extend(present.iter().map(|t| t.as_str()));
    let y: Vec<f64> = records.iter().map(|r| r.search_time_s).collect();
    let fit = |cols: Vec<Vec<f64>>| {
        let all: Vec<Vec<f64>> = cols.into_iter().chain(dummies.iter().cloned()).collect();
        ols(&design_with_intercept(&all), &y, &names)
    };
    let z_cols = raw_cols.iter().map(|c| zscore(c)).collect::<Result<Vec<_>>>()?;
    Ok(LayoutRegression {
        standardized: fit(z_cols)?,
        raw: fit(raw_cols)?,
    })
}

// ---------------------------------------------------------------------------
// Group contrasts and t tests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeContrast {
    /// Per type in id order; `None` when the type is absent.
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Mean difference vs image from the dummy regression, `None` when absent.
    pub differences: Vec<Option<f64>>,
    pub fit: OlsFit,
}

impl TypeContrast {
    pub fn to_text(&self) -> String {
        let mut s = String::from("type           n      mean   diff vs image   std err      t        p\n");
        for t in TargetType::ALL {
            let Some(mean) = self.means[t.id()] else { continue };
            if t == TargetType::Image {
                let _ = writeln!(s, "{:<12} {:>5} {:>9.4}   (reference)", t.as_str(), self.counts[t.id()], mean);
                continue;
            }
            let i = self.fit.index(t.as_str()).expect("dummy present");
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>9.4} {:>15.4} {:>9.4} {:>6.2} {:>8}",
                t.as_str(),
                self.counts[t.id()],
                mean,
                self.fit.coefficients[i],
                self.fit.std_errors[i],
                self.fit.t_values[i],
                format_p(self.fit.p_values[i])
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("type,n,mean,diff_vs_image,std_err,t,p\n");
        for t in TargetType::ALL {
            let Some(mean) = self.means[t.id()] else { continue };
            match self.fit.index(t.as_str()) {
                Some(i) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        t.as_str(),
                        self.counts[t.id()],
                        mean,
                        self.fit.coefficients[i],
                        self.fit.std_errors[i],
                        self.fit.t_values[i],
                        self.fit.p_values[i]
                    );
                }
                None => {
                    let _ = writeln!(s, "{},{},{},0,,,", t.as_str(), self.counts[t.id()], mean);
                }
            }
        }
        s
    }
}

/// Mean time per type and an OLS on type dummies with image as reference.
pub fn type_contrast(times: &[f64], types: &[TargetType]) -> Result<TypeContrast> {
    if times.len() != types.len() {
        return Err(AnalyticsError::LengthMismatch(times.len(), types.len()));
    }
    let mut sums = [0.0; TargetType::COUNT];
    let mut counts = vec![0usize; TargetType::COUNT];
    for (&t, &k) in times.iter().zip(types) {
        sums[k.id()] += t;
        counts[k.id()] += 1;
    }
    if counts[TargetType::Image.id()] == 0 {
        return Err(AnalyticsError::Degenerate("image reference type absent".into()));
    }
    let present: Vec<TargetType> = TargetType::ALL
        .into_iter()
        .filter(|t| *t != TargetType::Image && counts[t.id()] > 0)
        .collect();
    if present.is_empty() {
        return Err(AnalyticsError::Degenerate("need at least 2 types".into()));
    }
    let columns: Vec<Vec<f64>> = present
        .iter()
        .map(|p| types.iter().map(|t| f64::from(u8::from(t == p))).collect())
        .collect();
    let mut names = vec!["intercept"];
    names.extend(present.iter().map(|t| t.as_str()));
    let fit = ols(&design_with_intercept(&columns), times, &names)?;
    let means = (0..TargetType::COUNT)
        .map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64))
        .collect();
    let differences = TargetType::ALL
        .iter()
        .map(|t| match fit.index(t.as_str()) {
            Some(i) => Some(fit.coefficients[i]),
            None if *t == TargetType::Image => Some(0.0),
            None => None,
        })
        .collect();
    Ok(TypeContrast {
        means,
        counts,
        differences,
        fit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_dev(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m).powi(2)).sum()
}

/// Pooled-variance two-sample t test, dof n₁ + n₂ − 2.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalyticsError::Degenerate("each group needs at least 2 values".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let dof = (a.len() + b.len() - 2) as f64;
    let pooled = (sum_sq_dev(a, ma) + sum_sq_dev(b, mb)) / dof;
    let se = (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let diff = ma - mb;
    let t = if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        return Err(AnalyticsError::Degenerate("both groups have zero variance".into()));
    } else {
        diff / se
    };
    Ok(TTestResult {
        t,
        dof,
        p: t_two_sided_p(t, dof),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Paired t test on `a − b`, dof n − 1.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(AnalyticsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(AnalyticsError::Degenerate("need at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let n = d.len() as f64;
    let sd = (sum_sq_dev(&d, md) / (n - 1.0)).sqrt();
    let dof = n - 1.0;
    let t = if md == 0.0 && sd == 0.0 {
        0.0
    } else if sd == 0.0 {
        return Err(AnalyticsError::Degenerate("paired differences have zero variance".into()));
    } else {
        md / (sd / n.sqrt())
    };
    Ok(TTestResult {
        t,
        dof,
        p: t_two_sided_p(t, dof),
        mean_a: mean(a),
        mean_b: mean(b),
    })
}

// ---------------------------------------------------------------------------
// Binned curves
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedStats {
    pub edges: Vec<f64>,
    /// `None` for empty bins.
    pub means: Vec<Option<f64>>,
    pub std_errors: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl BinnedStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,mean,std_err\n");
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for i in 0..self.counts.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.counts[i],
                fmt(self.means[i]),
                fmt(self.std_errors[i])
            );
        }
        s
    }
}

/// Means of `values` over uniform-width bins of `feature`. The standard
/// error is the population std over √count.
pub fn binned_stats(values: &[f64], feature: &[f64], n_bins: usize) -> Result<BinnedStats> {
    if values.len() != feature.len() {
        return Err(AnalyticsError::LengthMismatch(values.len(), feature.len()));
    }
    if n_bins == 0 {
        return Err(AnalyticsError::Degenerate("n_bins must be at least 1".into()));
    }
    let lo = feature.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = feature.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(AnalyticsError::Degenerate("feature is constant".into()));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (&v, &f) in values.iter().zip(feature) {
        let bin = (((f - lo) / width).floor() as usize).min(n_bins - 1);
        groups[bin].push(v);
    }
    let means: Vec<Option<f64>> = groups.iter().map(|g| (!g.is_empty()).then(|| mean(g))).collect();
    let std_errors = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| m.map(|m| (sum_sq_dev(g, m) / g.len() as f64).sqrt() / (g.len() as f64).sqrt()))
        .collect();
    Ok(BinnedStats {
        edges,
        means,
        std_errors,
        counts: groups.iter().map(Vec::len).collect(),
    })
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    /// One 2-D point per input row.
    pub projection: Vec<[f64; 2]>,
    /// Eigenvalues of the covariance, descending.
    pub eigenvalues: [f64; 2],
    pub explained_ratio: [f64; 2],
}

/// Projects centered rows onto the top two covariance eigenvectors.
pub fn pca2(rows: &DMatrix<f64>) -> Result<Pca2> {
    let (n, d) = rows.shape();
    if n < 2 {
        return Err(AnalyticsError::Degenerate("pca2 needs at least 2 rows".into()));
    }
    let mean = rows.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = |k: usize| order.get(k).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let eigenvalues = [top(0), top(1)];
    let explained_ratio = if total > 0.0 {
        [eigenvalues[0] / total, eigenvalues[1] / total]
    } else {
        [0.0, 0.0]
    };
    let projection = (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, slot) in p.iter_mut().enumerate() {
                if let Some(&col) = order.get(k) {
                    let v = eig.eigenvectors.column(col);
                    // Sign convention: largest-magnitude loading positive.
                    let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                    let s = if pivot < 0.0 { -1.0 } else { 1.0 };
                    *slot = s * centered.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            p
        })
        .collect();
    Ok(Pca2 {
        projection,
        eigenvalues,
        explained_ratio,
    })
}
