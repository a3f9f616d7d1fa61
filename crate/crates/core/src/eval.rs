//! Error metrics, intersectional RMSE, mean/dispersion variability and
//! cross-country transfer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::gbrt::{GbrtError, WealthModel};
use crate::ingest::Settlement;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("true values are constant")]
    ConstantTruth,
    #[error("input is constant")]
    ConstantInput,
    #[error("fewer than 3 distinct points for a quadratic fit")]
    TooFewForFit,
    #[error("model column manifests differ")]
    ColumnMismatch,
    #[error(transparent)]
    Model(#[from] GbrtError),
}

fn check_len(a: &[f64], b: &[f64], need: usize) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < need {
        return Err(EvalError::TooFew { need, got: a.len() });
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation (divisor n).
pub fn pop_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, EvalError> {
    check_len(y_true, y_pred, 1)?;
    Ok((y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y_true.len() as f64).sqrt())
}

/// RMSE over the population standard deviation of `y_true`.
pub fn nrmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, EvalError> {
    check_len(y_true, y_pred, 2)?;
    let sd = pop_std(y_true);
    if sd <= 1e-12 * mean(y_true).abs().max(1.0) {
        return Err(EvalError::ConstantTruth);
    }
    Ok(rmse(y_true, y_pred)? / sd)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_len(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub eps_mu: f64,
    pub eps_sigma: f64,
    pub rmse_mu: f64,
    pub rmse_sigma: f64,
    pub n_test: usize,
}

/// Where the NRMSE denominator comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalizer {
    /// Standard deviation of the evaluated truth.
    #[default]
    EvalSet,
    /// Fixed standard deviations for μ and σ.
    Fixed { sd_mu: f64, sd_sigma: f64 },
}

pub fn evaluate(truth: &[[f64; 2]], pred: &[[f64; 2]]) -> Result<EvalMetrics, EvalError> {
    evaluate_with(truth, pred, Normalizer::EvalSet)
}

pub fn evaluate_with(truth: &[[f64; 2]], pred: &[[f64; 2]], norm: Normalizer) -> Result<EvalMetrics, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch(truth.len(), pred.len()));
    }
    let col = |v: &[[f64; 2]], t: usize| -> Vec<f64> { v.iter().map(|r| r[t]).collect() };
    let (tm, ts, pm, ps) = (col(truth, 0), col(truth, 1), col(pred, 0), col(pred, 1));
    let rmse_mu = rmse(&tm, &pm)?;
    let rmse_sigma = rmse(&ts, &ps)?;
    let (eps_mu, eps_sigma) = match norm {
        Normalizer::EvalSet => (nrmse(&tm, &pm)?, nrmse(&ts, &ps)?),
        Normalizer::Fixed { sd_mu, sd_sigma } => (rmse_mu / sd_mu, rmse_sigma / sd_sigma),
    };
    Ok(EvalMetrics {
        eps_mu,
        eps_sigma,
        rmse_mu,
        rmse_sigma,
        n_test: truth.len(),
    })
}

/// Element-wise mean of per-run metrics; `n_test` is the rounded mean.
pub fn mean_metrics(runs: &[EvalMetrics]) -> Option<EvalMetrics> {
    if runs.is_empty() {
        return None;
    }
    let k = runs.len() as f64;
    let avg = |f: fn(&EvalMetrics) -> f64| runs.iter().map(f).sum::<f64>() / k;
    Some(EvalMetrics {
        eps_mu: avg(|m| m.eps_mu),
        eps_sigma: avg(|m| m.eps_sigma),
        rmse_mu: avg(|m| m.rmse_mu),
        rmse_sigma: avg(|m| m.rmse_sigma),
        n_test: (runs.iter().map(|m| m.n_test).sum::<usize>() as f64 / k).round() as usize,
    })
}

/// Rank-based quintile per value; sizes differ by at most one, ties keep
/// input order.
pub fn quintile_bins(values: &[f64]) -> Result<Vec<usize>, EvalError> {
    let n = values.len();
    if n < 5 {
        return Err(EvalError::TooFew { need: 5, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    // The first n % 5 bins take one extra member.
    let (base, extra) = (n / 5, n % 5);
    let mut bins = vec![0; n];
    let mut rank = 0;
    for q in 0..5 {
        let size = base + usize::from(q < extra);
        for &i in &order[rank..rank + size] {
            bins[i] = q;
        }
        rank += size;
    }
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rmse: f64,
    pub n: usize,
}

/// RMSE of μ per settlement (rural, urban) and true-μ quintile; `None`
/// marks an empty cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionTable {
    pub cells: [[Option<Cell>; 5]; 2],
}

fn settlement_row(s: Settlement) -> usize {
    match s {
        Settlement::Rural => 0,
        Settlement::Urban => 1,
    }
}

impl IntersectionTable {
    /// Overall RMSE as the count-weighted quadratic mean of the cells.
    pub fn overall_rmse(&self) -> f64 {
        let (mut sse, mut n) = (0.0, 0usize);
        for c in self.cells.iter().flatten().flatten() {
            sse += c.rmse * c.rmse * c.n as f64;
            n += c.n;
        }
        (sse / n as f64).sqrt()
    }

    /// Rows rural/urban, columns Q1..Q5, `-` for empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("settlement,Q1,Q2,Q3,Q4,Q5\n");
        for (r, name) in ["rural", "urban"].iter().enumerate() {
            s.push_str(name);
            for c in &self.cells[r] {
                match c {
                    Some(c) => s.push_str(&format!(",{:.4}", c.rmse)),
                    None => s.push_str(",-"),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn intersection_table(
    settlements: &[Settlement],
    mu_true: &[f64],
    mu_pred: &[f64],
) -> Result<IntersectionTable, EvalError> {
    check_len(mu_true, mu_pred, 5)?;
    if settlements.len() != mu_true.len() {
        return Err(EvalError::LengthMismatch(settlements.len(), mu_true.len()));
    }
    let q = quintile_bins(mu_true)?;
    let mut acc = [[(0.0, 0usize); 5]; 2];
    for i in 0..mu_true.len() {
        let c = &mut acc[settlement_row(settlements[i])][q[i]];
        c.0 += (mu_true[i] - mu_pred[i]).powi(2);
        c.1 += 1;
    }
    let cells = acc.map(|row| {
        row.map(|(sse, n)| {
            (n > 0).then(|| Cell {
                rmse: (sse / n as f64).sqrt(),
                n,
            })
        })
    });
    Ok(IntersectionTable { cells })
}

/// Least-squares `y ≈ c0 + c1 x + c2 x²`.
pub fn poly2_fit(x: &[f64], y: &[f64]) -> Result<[f64; 3], EvalError> {
    check_len(x, y, 3)?;
    let mut distinct = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EvalError::TooFewForFit);
    }
    // Fit in a centred, scaled variable t = (x - m) / s for conditioning.
    let m = mean(x);
    let s = pop_std(x);
    let mut a = [[0.0; 4]; 3];
    for (xi, yi) in x.iter().zip(y) {
        let t = (xi - m) / s;
        let basis = [1.0, t, t * t];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += basis[r] * basis[c];
            }
            a[r][3] += basis[r] * yi;
        }
    }
    let b = solve3(a).ok_or(EvalError::TooFewForFit)?;
    // y = b0 + b1 (x-m)/s + b2 (x-m)²/s²
    let c2 = b[2] / (s * s);
    let c1 = b[1] / s - 2.0 * m * c2;
    let c0 = b[0] - b[1] * m / s + c2 * m * m;
    Ok([c0, c1, c2])
}

fn solve3(mut a: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pearson: Option<f64>,
    pub poly2: Option<[f64; 3]>,
}

impl PairSummary {
    fn of(mu: &[f64], sigma: &[f64]) -> Self {
        Self {
            pearson: pearson(mu, sigma).ok(),
            poly2: poly2_fit(mu, sigma).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityGroup {
    pub settlement: Settlement,
    pub n: usize,
    pub predicted: PairSummary,
    pub truth: Option<PairSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub groups: Vec<VariabilityGroup>,
}

/// Correlation and quadratic fit of σ against μ per settlement type, for
/// predictions and (when given) the truth. Groups too small for a fit
/// report what they can.
pub fn variability(settlements: &[Settlement], pred: &[[f64; 2]], truth: Option<&[[f64; 2]]>) -> VariabilityReport {
    let groups = [Settlement::Rural, Settlement::Urban]
        .into_iter()
        .map(|s| {
            let idx: Vec<usize> = (0..settlements.len()).filter(|&i| settlements[i] == s).collect();
            let pick = |v: &[[f64; 2]], t: usize| -> Vec<f64> { idx.iter().map(|&i| v[i][t]).collect() };
            VariabilityGroup {
                settlement: s,
                n: idx.len(),
                predicted: PairSummary::of(&pick(pred, 0), &pick(pred, 1)),
                truth: truth.map(|t| PairSummary::of(&pick(t, 0), &pick(t, 1))),
            }
        })
        .collect();
    VariabilityReport { groups }
}

/// Labelled held-out data of one country.
pub struct CountryEval<'a> {
    pub name: &'a str,
    pub model: &'a WealthModel,
    pub test_x: &'a FeatureMatrix,
    pub test_y: &'a [[f64; 2]],
}

/// `entries[i][j]`: model trained in country i evaluated on country j's
/// test split, unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub countries: Vec<String>,
    pub entries: Vec<Vec<EvalMetrics>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train,test,eps_mu,eps_sigma,rmse_mu,rmse_sigma,n_test\n");
        for (i, row) in self.entries.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    self.countries[i], self.countries[j], m.eps_mu, m.eps_sigma, m.rmse_mu, m.rmse_sigma, m.n_test
                ));
            }
        }
        s
    }
}

/// Clipped predictions as `[μ̂, σ̂]` rows.
pub fn predict_pairs(model: &WealthModel, x: &FeatureMatrix) -> Result<Vec<[f64; 2]>, EvalError> {
    Ok(model.predict(x)?.into_iter().map(|(m, s)| [m, s]).collect())
}

pub fn transfer(countries: &[CountryEval<'_>]) -> Result<TransferMatrix, EvalError> {
    for c in countries {
        if c.model.columns() != countries[0].model.columns() {
            return Err(EvalError::ColumnMismatch);
        }
    }
    let entries = countries
        .iter()
        .map(|src| {
            countries
                .iter()
                .map(|dst| evaluate(dst.test_y, &predict_pairs(src.model, dst.test_x)?))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransferMatrix {
        countries: countries.iter().map(|c| c.name.to_string()).collect(),
        entries,
    })
}

/// One labelled row per evaluated metric set, mirroring a results table.
pub fn metrics_csv(rows: &[(String, EvalMetrics)]) -> String {
    let mut s = String::from("config,eps_mu,eps_sigma,rmse_mu,rmse_sigma,n_test\n");
    for (name, m) in rows {
        s.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{}\n",
            m.eps_mu, m.eps_sigma, m.rmse_mu, m.rmse_sigma, m.n_test
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_hand_cases() {
        let t = [0.0, 10.0];
        assert!((nrmse(&t, &[0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!((rmse(&t, &[0.0, 0.0]).unwrap() - 10.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        let y = [3.0, 7.0, 1.0, 9.0, 5.5];
        let m = mean(&y);
        assert!((nrmse(&y, &[m; 5]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nrmse(&[2.0, 2.0], &[1.0, 2.0]), Err(EvalError::ConstantTruth));
    }

    #[test]
    fn pearson_oracle() {
        let x = [1.0, 2.0, 4.0, 7.0, 11.0];
        let y = [2.0, 1.0, 5.0, 6.0, 13.0];
        // covariance-formula oracle with divisor n - 1
        let n = 5.0;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((pearson(&x, &y).unwrap() - cov / (sx * sy)).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&x, &[1.0; 5]), Err(EvalError::ConstantInput));
    }

    #[test]
    fn quintile_sizes() {
        let ten: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(quintile_bins(&ten).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        let seven = [5.0, 1.0, 3.0, 2.0, 7.0, 6.0, 4.0];
        let b = quintile_bins(&seven).unwrap();
        let mut sizes = [0; 5];
        for q in &b {
            sizes[*q] += 1;
        }
        assert_eq!(sizes, [2, 2, 1, 1, 1]);
        assert_eq!(quintile_bins(&[1.0; 6]).unwrap(), vec![0, 0, 1, 2, 3, 4]);
        assert!(quintile_bins(&[1.0; 4]).is_err());
    }

    #[test]
    fn poly_fits() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 1.5 + 2.0).collect();
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let c = poly2_fit(&x, &sq).unwrap();
        assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9 && (c[2] - 1.0).abs() < 1e-12);
        let lin: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let c = poly2_fit(&x, &lin).unwrap();
        assert!(c[0].abs() < 1e-9 && (c[1] - 2.0).abs() < 1e-10 && c[2].abs() < 1e-12);
        assert_eq!(poly2_fit(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]), Err(EvalError::TooFewForFit));
    }

    #[test]
    fn intersection_marks_empty_and_recombines() {
        use Settlement::*;
        let truth: Vec<f64> = (0..20).map(|i| i as f64 * 5.0).collect();
        let pred: Vec<f64> = truth.iter().enumerate().map(|(i, t)| t + (i % 3) as f64).collect();
        let s: Vec<Settlement> = (0..20).map(|i| if i >= 4 && i % 2 == 0 { Urban } else { Rural }).collect();
        let t = intersection_table(&s, &truth, &pred).unwrap();
        assert!(t.cells[1][0].is_none());
        // direct subset oracle
        for (row, set) in [(0, Rural), (1, Urban)] {
            for q in 0..5 {
                let idx: Vec<usize> = (q * 4..q * 4 + 4).filter(|&i| s[i] == set).collect();
                match t.cells[row][q] {
                    None => assert!(idx.is_empty()),
                    Some(c) => {
                        let sse: f64 = idx.iter().map(|&i| (truth[i] - pred[i]).powi(2)).sum();
                        assert_eq!(c.n, idx.len());
                        assert!((c.rmse - (sse / idx.len() as f64).sqrt()).abs() < 1e-12);
                    }
                }
            }
        }
        assert!((t.overall_rmse() - rmse(&truth, &pred).unwrap()).abs() < 1e-9);
        assert!(t.to_csv().lines().nth(2).unwrap().starts_with("urban,-,"));
    }

    #[test]
    fn variability_groups() {
        use Settlement::*;
        let s = [Rural, Rural, Rural, Urban, Urban];
        let p = [[10.0, 20.0], [20.0, 40.0], [30.0, 60.0], [50.0, 5.0], [60.0, 6.0]];
        let r = variability(&s, &p, None);
        assert_eq!(r.groups[0].n, 3);
        assert!((r.groups[0].predicted.pearson.unwrap() - 1.0).abs() < 1e-12);
        let c = r.groups[0].predicted.poly2.unwrap();
        assert!((c[1] - 2.0).abs() < 1e-9);
        assert!(r.groups[1].predicted.poly2.is_none());
        assert!(r.groups[1].predicted.pearson.is_some());
    }
}
