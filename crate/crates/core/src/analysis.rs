//! Domain-signature analysis: PCA of variate embeddings, affine alignment
//! to a known layout with R², a permutation null, and forecast plot data.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Projection onto the leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `V × k` scores.
    pub projection: Matrix,
    /// `D × k`, unit columns.
    pub components: Matrix,
    pub mean: Vec<f64>,
    /// Fraction of total variance per returned component.
    pub explained_variance: Vec<f64>,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Mean-centred PCA via the covariance eigendecomposition. Components are
/// ordered by eigenvalue and signed so their largest-magnitude loading is
/// positive.
pub fn pca_project(embeddings: &Matrix, k: usize) -> Result<Pca> {
    let (v, d) = embeddings.shape();
    if k == 0 || v < k || k > d {
        return Err(Error::Shape(format!("cannot take {k} components of a {v}×{d} embedding table")));
    }
    let mean: Vec<f64> = (0..d).map(|c| (0..v).map(|r| embeddings.get(r, c)).sum::<f64>() / v as f64).collect();
    let centred = Matrix::from_fn(v, d, |r, c| embeddings.get(r, c) - mean[c]);
    let x = to_na(&centred);
    let cov = x.transpose() * &x / v as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut components = Matrix::zeros(d, k);
    let mut explained = Vec::with_capacity(k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(i);
        let pivot = (0..d).fold(0, |best, r| if col[r].abs() > col[best].abs() { r } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            components.set(r, j, sign * col[r]);
        }
        explained.push(if total > 0.0 { eig.eigenvalues[i].max(0.0) / total } else { 0.0 });
    }
    Ok(Pca { projection: centred.matmul(&components), components, mean, explained_variance: explained })
}

/// Least-squares affine map from a projection to a layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutAlignment {
    /// `k × k` linear part, applied as `projection · linear + offset`.
    pub linear: Matrix,
    pub offset: Vec<f64>,
    pub r_squared_per_axis: Vec<f64>,
    /// `1 − ΣSS_res / ΣSS_tot` over all layout coordinates.
    pub r_squared: f64,
    /// `V × k` fitted positions.
    pub fitted: Matrix,
}

/// Affine least-squares fit `layout ≈ projection · A + b`.
pub fn align_layout(projection: &Matrix, layout: &Matrix) -> Result<LayoutAlignment> {
    let (v, k) = projection.shape();
    if layout.rows() != v {
        return Err(Error::Shape(format!("{v} projected variates vs {} layout positions", layout.rows())));
    }
    let m = layout.cols();
    if v <= k {
        return Err(Error::RankDeficient(format!("{v} points cannot determine an affine map in {k} dimensions")));
    }
    let design = DMatrix::from_fn(v, k + 1, |r, c| if c < k { projection.get(r, c) } else { 1.0 });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (v.max(k + 1) as f64) * f64::EPSILON;
    if svd.singular_values.iter().any(|s| *s <= tol) {
        return Err(Error::RankDeficient("projection has collinear coordinates".into()));
    }
    let y = to_na(layout);
    let coef = svd.solve(&y, tol).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let fitted_na = &design * &coef;
    let mut per_axis = Vec::with_capacity(m);
    let (mut res_all, mut tot_all) = (0.0, 0.0);
    for c in 0..m {
        let mean = y.column(c).mean();
        let res: f64 = (0..v).map(|r| (y[(r, c)] - fitted_na[(r, c)]).powi(2)).sum();
        let tot: f64 = (0..v).map(|r| (y[(r, c)] - mean).powi(2)).sum();
        if tot == 0.0 {
            return Err(Error::RankDeficient(format!("layout axis {c} is constant")));
        }
        per_axis.push(1.0 - res / tot);
        res_all += res;
        tot_all += tot;
    }
    Ok(LayoutAlignment {
        linear: Matrix::from_fn(k, m, |r, c| coef[(r, c)]),
        offset: (0..m).map(|c| coef[(k, c)]).collect(),
        r_squared_per_axis: per_axis,
        r_squared: 1.0 - res_all / tot_all,
        fitted: Matrix::from_fn(v, m, |r, c| fitted_na[(r, c)]),
    })
}

/// Permutation null of the pooled R²: layout rows are shuffled against the
/// projection. `p = (1 + #{null ≥ observed}) / (1 + permutations)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub observed: f64,
    pub null: Vec<f64>,
    pub p_value: f64,
}

pub fn permutation_test(
    projection: &Matrix,
    layout: &Matrix,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    let observed = align_layout(projection, layout)?.r_squared;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = (0..layout.rows()).collect();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rows.shuffle(&mut rng);
        null.push(align_layout(projection, &layout.select_rows(&rows))?.r_squared);
    }
    let exceed = null.iter().filter(|r| **r >= observed).count();
    Ok(PermutationTest { observed, p_value: (1 + exceed) as f64 / (1 + permutations) as f64, null })
}

/// JSON report of a domain-signature analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub domain: String,
    pub explained_variance: Vec<f64>,
    pub r_squared: Option<f64>,
    pub r_squared_per_axis: Option<Vec<f64>>,
    pub p_value: Option<f64>,
    /// PCA coordinates per variate, for external plotting.
    pub projection: Vec<Vec<f64>>,
}

/// PCA(3 or fewer) explained variance, plus PCA(layout dims) alignment and
/// a permutation null when a layout is given.
pub fn analyze_domain(
    domain: &str,
    embeddings: &Matrix,
    layout: Option<&Matrix>,
    permutations: usize,
    seed: u64,
) -> Result<AlignmentReport> {
    let k = 3.min(embeddings.rows()).min(embeddings.cols());
    let pca = pca_project(embeddings, k)?;
    let mut report = AlignmentReport {
        domain: domain.to_string(),
        explained_variance: pca.explained_variance.clone(),
        r_squared: None,
        r_squared_per_axis: None,
        p_value: None,
        projection: (0..pca.projection.rows()).map(|r| pca.projection.row(r).to_vec()).collect(),
    };
    if let Some(layout) = layout {
        let dims = layout.cols();
        let proj = pca_project(embeddings, dims)?.projection;
        let fit = align_layout(&proj, layout)?;
        report.r_squared = Some(fit.r_squared);
        report.r_squared_per_axis = Some(fit.r_squared_per_axis);
        if permutations > 0 {
            report.p_value = Some(permutation_test(&proj, layout, permutations, seed)?.p_value);
        }
    }
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One row of forecast plot data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub t: usize,
    pub variate: usize,
    pub context: Option<f64>,
    pub truth: f64,
    pub prediction: Option<f64>,
    pub visible_flag: bool,
}

/// Writes `t,variate,context,truth,prediction,visible_flag`, one row per
/// variate and time point. `context` is `V × C`, `truth` and `prediction`
/// are `V × H`; context rows leave `prediction` empty, horizon rows leave
/// `context` empty, and `truth` repeats the context on visible rows.
pub fn export_forecast_plot(context: &Matrix, truth: &Matrix, prediction: &Matrix, path: &Path) -> Result<()> {
    let (v, c) = context.shape();
    if truth.shape() != prediction.shape() || truth.rows() != v {
        return Err(Error::Shape(format!(
            "context {:?}, truth {:?}, prediction {:?}",
            context.shape(),
            truth.shape(),
            prediction.shape()
        )));
    }
    let h = truth.cols();
    let mut out = String::from("t,variate,context,truth,prediction,visible_flag\n");
    for r in 0..v {
        for t in 0..c + h {
            if t < c {
                let x = context.get(r, t);
                out.push_str(&format!("{t},{r},{x},{x},,true\n"));
            } else {
                out.push_str(&format!("{t},{r},,{},{},false\n", truth.get(r, t - c), prediction.get(r, t - c)));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_forecast_plot`].
pub fn read_forecast_plot(path: &Path) -> Result<Vec<PlotRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data { entry: path.display().to_string(), message: e.to_string() })?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Data { entry: path.display().to_string(), message: e.to_string() }))
        .collect()
}
