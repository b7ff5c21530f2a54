//! Infinite Feature Selection.
//!
//! Features become nodes of a weighted graph whose edges mix feature spread
//! and rank decorrelation. A feature's score sums the weights of all paths
//! of every length that start at it, discounted geometrically:
//! `s = sum_{l>=1} (rA)^l 1 = (I - rA)^{-1} 1 - 1`. With `r` set from the
//! spectral radius of `A` the series converges and the closed form is solved
//! with conjugate gradients (`I - rA` is symmetric positive definite).

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectionError {
    #[error("need at least 2 samples and 2 features, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("every feature is constant")]
    DegenerateData,
    #[error("feature matrix contains a non-finite value")]
    NonFinite,
    #[error("linear system did not converge (residual {0:e})")]
    SingularSystem(f64),
    #[error("cannot keep {requested} of {available} features")]
    BadCount { requested: usize, available: usize },
    #[error("expected {expected} columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Tunables for graph construction and selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfsConfig {
    /// Mix between the spread term (1.0) and the decorrelation term (0.0).
    pub alpha: f64,
    /// Target value of `r * spectral_radius(A)`; must lie in (0, 1).
    pub r_factor: f64,
    /// Fraction of features kept, in (0, 1].
    pub keep_fraction: f64,
    /// Columns beyond this count are pre-filtered by variance before the
    /// graph is built, bounding memory at `max_graph_features^2` entries.
    pub max_graph_features: usize,
}

impl Default for IfsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            r_factor: 0.9,
            keep_fraction: 0.2,
            max_graph_features: 8192,
        }
    }
}

impl IfsConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SelectionError::InvalidParameter(format!("alpha {} not in [0,1]", self.alpha)));
        }
        if !(self.r_factor > 0.0 && self.r_factor < 1.0) {
            return Err(SelectionError::InvalidParameter(format!(
                "r_factor {} not in (0,1)",
                self.r_factor
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(SelectionError::InvalidParameter(format!(
                "keep_fraction {} not in (0,1]",
                self.keep_fraction
            )));
        }
        if self.max_graph_features < 2 {
            return Err(SelectionError::InvalidParameter("max_graph_features must be >= 2".into()));
        }
        Ok(())
    }
}

/// Average ranks (1-based) of a column, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share rank mean((i+1)..=j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn check_matrix(data: &ArrayView2<f64>) -> Result<(), SelectionError> {
    let (rows, cols) = data.dim();
    if rows < 2 || cols < 2 {
        return Err(SelectionError::TooSmall { rows, cols });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SelectionError::NonFinite);
    }
    Ok(())
}

/// Population standard deviation of each column.
pub fn column_std(data: &ArrayView2<f64>) -> Vec<f64> {
    let m = data.nrows() as f64;
    data.axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / m;
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m).sqrt()
        })
        .collect()
}

/// Feature affinity graph:
/// `A[i][j] = alpha * max(s_i, s_j) + (1 - alpha) * (1 - |rho_ij|)` where
/// `s` is the column standard deviation over its maximum and `rho` the
/// Spearman correlation. A constant column counts as fully correlated with
/// everything. The diagonal is zero.
pub fn affinity_matrix(data: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>, SelectionError> {
    check_matrix(&data)?;
    let (m, n) = data.dim();
    let std = column_std(&data);
    let max_std = std.iter().copied().fold(0.0, f64::max);
    if max_std <= 0.0 {
        return Err(SelectionError::DegenerateData);
    }
    let spread: Vec<f64> = std.iter().map(|s| s / max_std).collect();

    // Centred, unit-norm rank columns; Z^T Z is then the Spearman matrix.
    let mut z = Array2::<f64>::zeros((m, n));
    let mut constant = vec![false; n];
    for (j, col) in data.axis_iter(Axis(1)).enumerate() {
        let ranks = average_ranks(&col.to_vec());
        let mean = (m as f64 + 1.0) / 2.0;
        let norm = ranks.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            constant[j] = true;
            continue;
        }
        for (i, r) in ranks.iter().enumerate() {
            z[[i, j]] = (r - mean) / norm;
        }
    }
    let mut a = z.t().dot(&z);
    for i in 0..n {
        let mut row = a.row_mut(i);
        for j in 0..n {
            let rho = if constant[i] || constant[j] {
                1.0
            } else {
                row[j].abs().min(1.0)
            };
            row[j] = alpha * spread[i].max(spread[j]) + (1.0 - alpha) * (1.0 - rho);
        }
        row[i] = 0.0;
    }
    Ok(a)
}

/// Spectral radius estimate by power iteration from the all-ones vector.
pub fn spectral_radius(a: &Array2<f64>) -> f64 {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-10;
    let n = a.nrows();
    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..MAX_ITER {
        let y = a.dot(&x);
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - lambda).abs() <= TOL * norm;
        lambda = norm;
        x = y / norm;
        if done {
            break;
        }
    }
    lambda
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfsResult {
    pub scores: Vec<f64>,
    /// Feature indices by descending score, ties by ascending index.
    pub ranking: Vec<usize>,
    /// True when the graph had no edges and every score is zero.
    pub zero_matrix: bool,
}

pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    ranking
}

/// Path-sum scores of a non-negative symmetric affinity graph.
pub fn ifs_scores(a: &Array2<f64>, r_factor: f64) -> Result<IfsResult, SelectionError> {
    let n = a.nrows();
    if !(r_factor > 0.0 && r_factor < 1.0) {
        return Err(SelectionError::InvalidParameter(format!("r_factor {r_factor} not in (0,1)")));
    }
    let rho = spectral_radius(a);
    if rho == 0.0 {
        return Ok(IfsResult {
            scores: vec![0.0; n],
            ranking: (0..n).collect(),
            zero_matrix: true,
        });
    }
    let r = r_factor / rho;
    let x = solve_shifted(a, r)?;
    let scores: Vec<f64> = x.iter().map(|v| (v - 1.0).max(0.0)).collect();
    let ranking = rank_scores(&scores);
    Ok(IfsResult {
        scores,
        ranking,
        zero_matrix: false,
    })
}

/// Solves `(I - rA) x = 1` by conjugate gradients.
fn solve_shifted(a: &Array2<f64>, r: f64) -> Result<Array1<f64>, SelectionError> {
    const MAX_ITER: usize = 1000;
    const TOL: f64 = 1e-13;
    let n = a.nrows();
    let apply = |v: &Array1<f64>| -> Array1<f64> { v - &(a.dot(v) * r) };
    let b = Array1::from_elem(n, 1.0);
    let b_norm = (n as f64).sqrt();
    let mut x = b.clone();
    let mut res = &b - &apply(&x);
    let mut p = res.clone();
    let mut rs = res.dot(&res);
    for _ in 0..MAX_ITER {
        if rs.sqrt() <= TOL * b_norm {
            return Ok(x);
        }
        let ap = apply(&p);
        let denom = p.dot(&ap);
        if !(denom > 0.0) {
            break;
        }
        let step = rs / denom;
        x.scaled_add(step, &p);
        res.scaled_add(-step, &ap);
        let rs_next = res.dot(&res);
        p = &res + &(p * (rs_next / rs));
        rs = rs_next;
    }
    let residual = rs.sqrt() / b_norm;
    if residual.is_finite() && residual <= 1e-9 {
        Ok(x)
    } else {
        Err(SelectionError::SingularSystem(residual))
    }
}

/// First `l` entries of the ranking.
pub fn select_top(result: &IfsResult, l: usize) -> Result<Vec<usize>, SelectionError> {
    if l == 0 || l > result.ranking.len() {
        return Err(SelectionError::BadCount {
            requested: l,
            available: result.ranking.len(),
        });
    }
    Ok(result.ranking[..l].to_vec())
}

/// Column projection learned on training data. Holds only indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FittedSelector {
    n_features: usize,
    selected: Vec<usize>,
}

impl FittedSelector {
    pub fn new(n_features: usize, selected: Vec<usize>) -> Result<Self, SelectionError> {
        if selected.is_empty() || selected.iter().any(|&i| i >= n_features) {
            return Err(SelectionError::BadCount {
                requested: selected.len(),
                available: n_features,
            });
        }
        Ok(Self {
            n_features,
            selected,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Result<Array2<f64>, SelectionError> {
        if data.ncols() != self.n_features {
            return Err(SelectionError::ColumnMismatch {
                expected: self.n_features,
                found: data.ncols(),
            });
        }
        Ok(data.select(Axis(1), &self.selected))
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>, SelectionError> {
        if row.len() != self.n_features {
            return Err(SelectionError::ColumnMismatch {
                expected: self.n_features,
                found: row.len(),
            });
        }
        Ok(self.selected.iter().map(|&i| row[i]).collect())
    }
}

/// Number of features kept for a column count.
pub fn keep_count(cols: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * cols as f64).round() as usize).clamp(1, cols)
}

/// Fits a selector on training rows. Labels are never consulted.
pub fn fit_selector(train: ArrayView2<f64>, cfg: &IfsConfig) -> Result<FittedSelector, SelectionError> {
    cfg.validate()?;
    check_matrix(&train)?;
    let cols = train.ncols();
    let l = keep_count(cols, cfg.keep_fraction);

    // Variance pre-filter for very wide inputs.
    let candidates: Vec<usize> = if cols > cfg.max_graph_features {
        let std = column_std(&train);
        let mut idx: Vec<usize> = (0..cols).collect();
        idx.sort_by(|&a, &b| std[b].total_cmp(&std[a]).then(a.cmp(&b)));
        idx.truncate(cfg.max_graph_features);
        idx.sort_unstable();
        idx
    } else {
        (0..cols).collect()
    };
    let sub = train.select(Axis(1), &candidates);
    let a = affinity_matrix(sub.view(), cfg.alpha)?;
    let result = ifs_scores(&a, cfg.r_factor)?;
    drop(a);
    let mut selected: Vec<usize> = result.ranking.iter().map(|&i| candidates[i]).collect();
    if l > selected.len() {
        // Pre-filtered columns follow in index order.
        let chosen: std::collections::HashSet<usize> = selected.iter().copied().collect();
        selected.extend((0..cols).filter(|i| !chosen.contains(i)));
    }
    selected.truncate(l);
    FittedSelector::new(cols, selected)
}
