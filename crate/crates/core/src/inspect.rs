//! Analysis exports: per-class mean Intra-W, a PCA projection of expression
//! features, and relation-weight dumps.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::FeatureDataset;
use crate::error::{contract, Result};
use crate::model::{ExecMode, HyperParams, ModelParams};
use crate::numerics::DenseMatrix;
use crate::trainer::for_each_chunk;

/// `K × M` mean Intra-W vector per class; classes without samples get zeros.
pub fn class_mean_intra_weights(
    params: &ModelParams,
    data: &FeatureDataset,
    hp: &HyperParams,
    mode: ExecMode,
) -> Result<DenseMatrix> {
    let (k, m) = (hp.n_classes, hp.n_latent);
    let mut sums = DenseMatrix::zeros(k, m);
    let mut counts = vec![0usize; k];
    for_each_chunk(params, data, hp, mode, |rows, fwd| {
        for (r, &i) in rows.iter().enumerate() {
            let c = data.labels[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(fwd.intra_w.row(r)) {
                *s += v;
            }
        }
        Ok(())
    })?;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(sums)
}

/// `‖w̄ − 1/M‖₁`
pub fn balance_distance(mean_weights: &[f64]) -> f64 {
    let u = 1.0 / mean_weights.len() as f64;
    mean_weights.iter().map(|w| (w - u).abs()).sum()
}

/// `N × D` expression features `y`, row order preserved.
pub fn expression_features(
    params: &ModelParams,
    data: &FeatureDataset,
    hp: &HyperParams,
    mode: ExecMode,
) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(data.len(), hp.latent_dim);
    for_each_chunk(params, data, hp, mode, |rows, fwd| {
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(fwd.expression.row(r));
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `N × 2`
    pub points: DenseMatrix,
    /// Variance captured by each component, descending.
    pub variances: [f64; 2],
}

/// Projects mean-centered rows onto the two leading covariance eigenvectors.
/// Each axis is oriented so its largest-magnitude entry is positive.
pub fn pca_2d(features: &DenseMatrix) -> Result<Projection> {
    let (n, d) = features.shape();
    if n == 0 {
        return contract("pca_2d: no samples");
    }
    if d < 2 {
        return contract("pca_2d: need at least two feature dimensions");
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = features.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered);
    cov.scale(1.0 / n as f64);

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = DenseMatrix::zeros(d, 2);
    let mut variances = [0.0; 2];
    for (c, &e) in order.iter().take(2).enumerate() {
        let col = eig.eigenvectors.column(e);
        let pivot = (0..d).fold(0, |best, r| if col[r].abs() > col[best].abs() { r } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            basis.set(r, c, sign * col[r]);
        }
        variances[c] = eig.eigenvalues[e].max(0.0);
    }
    Ok(Projection {
        points: centered.matmul(&basis),
        variances,
    })
}

pub fn write_intra_w_csv(path: &Path, means: &DenseMatrix, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string()];
    header.extend((1..=means.cols()).map(|j| format!("weight_{j}")));
    w.write_record(&header)?;
    for (c, name) in class_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(means.row(c).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projection_csv(path: &Path, proj: &Projection, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "pc1", "pc2"])?;
    for (i, l) in labels.iter().enumerate() {
        let p = proj.points.row(i);
        w.write_record([l.to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per `(sample, j)` with `ω(j, ·)`, for the first `limit` samples.
pub fn write_relations_csv(
    path: &Path,
    params: &ModelParams,
    data: &FeatureDataset,
    hp: &HyperParams,
    mode: ExecMode,
    limit: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample".to_string(), "row".to_string()];
    header.extend((1..=hp.n_latent).map(|j| format!("w_{j}")));
    w.write_record(&header)?;
    let subset = data.subset(&(0..limit.min(data.len())).collect::<Vec<_>>());
    for_each_chunk(params, &subset, hp, mode, |rows, fwd| {
        for (r, &i) in rows.iter().enumerate() {
            let omega = &fwd.relations[r];
            for j in 0..hp.n_latent {
                let mut rec = vec![i.to_string(), (j + 1).to_string()];
                rec.extend(omega.row(j).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        Ok(())
    })?;
    w.flush()?;
    Ok(())
}
