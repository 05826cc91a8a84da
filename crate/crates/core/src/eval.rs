//! Retrieval accuracy, class-mean similarity maps, Gaussian Fréchet distance,
//! class agreement of generated latents, and CSV export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndiff::Tensor;

use crate::container::write_atomic;
use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOLERANCE` are clamped to zero; below it is an error.
pub const PSD_TOLERANCE: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalMode {
    /// Hit when the query's paired gallery item is retrieved.
    Image,
    /// Hit when any retrieved item shares the query's label.
    Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    /// Each query only searches the gallery items of its own batch; batch `b`
    /// holds the listed gallery rows.
    Local(Vec<Vec<usize>>),
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Label => "label",
        }
    }
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local(_) => "local",
        }
    }
}

/// Gallery embeddings with labels. Item ids are row indices.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl RetrievalIndex {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        if embeddings.ndim() != 2
            || embeddings.shape()[0] != labels.len()
            || !embeddings.is_finite()
        {
            return Err(Error::Invalid(format!(
                "index needs a finite [N, D] matrix and N labels, got {:?} and {}",
                embeddings.shape(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Indices of the `k` candidates most similar to `query`; ties go to the
/// smaller id.
fn top_k(query: &[f64], index: &RetrievalIndex, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&j| (cosine(query, index.embeddings.row(j)), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Fraction of queries with a hit among their top `k` candidates.
///
/// Query `i` is paired with gallery item `pairs[i]` and carries label
/// `labels[i]`.
pub fn topk_retrieval(
    queries: &Tensor,
    pairs: &[usize],
    labels: &[usize],
    index: &RetrievalIndex,
    k: usize,
    mode: RetrievalMode,
    scope: &Scope,
) -> Result<f64> {
    let n = queries.shape().first().copied().unwrap_or(0);
    if queries.ndim() != 2 || pairs.len() != n || labels.len() != n {
        return Err(Error::Invalid(
            "queries, pairs and labels must have the same length".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("no queries".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if queries.shape()[1] != index.embeddings.shape()[1] {
        return Err(Error::Invalid("query and gallery widths differ".into()));
    }
    let all: Vec<usize> = (0..index.len()).collect();
    let batch_of = match scope {
        Scope::Global => Vec::new(),
        Scope::Local(batches) => {
            let mut owner = vec![usize::MAX; index.len()];
            for (b, rows) in batches.iter().enumerate() {
                for &r in rows {
                    if r >= index.len() {
                        return Err(Error::Invalid(format!("batch row {r} outside the index")));
                    }
                    owner[r] = b;
                }
            }
            owner
        }
    };
    let mut hits = 0usize;
    for i in 0..n {
        let pool: &[usize] = match scope {
            Scope::Global => &all,
            Scope::Local(batches) => {
                let b = *batch_of.get(pairs[i]).ok_or_else(|| {
                    Error::Invalid(format!("pair {} outside the index", pairs[i]))
                })?;
                if b == usize::MAX {
                    return Err(Error::Invalid(format!(
                        "gallery row {} belongs to no batch",
                        pairs[i]
                    )));
                }
                &batches[b]
            }
        };
        if k > pool.len() {
            return Err(Error::Invalid(format!(
                "K = {k} exceeds the {} candidates",
                pool.len()
            )));
        }
        let top = top_k(queries.row(i), index, pool, k);
        let hit = match mode {
            RetrievalMode::Image => top.contains(&pairs[i]),
            RetrievalMode::Label => top.iter().any(|&j| index.labels[j] == labels[i]),
        };
        hits += usize::from(hit);
    }
    Ok(hits as f64 / n as f64)
}

/// `K x K` cosine similarities between class-mean embeddings.
pub fn cosine_map(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    if embeddings.ndim() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::Invalid(
            "cosine_map needs [N, D] embeddings and N labels".into(),
        ));
    }
    let d = embeddings.shape()[1];
    let mut means = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!(
                "label {l} outside {classes} classes"
            )));
        }
        counts[l] += 1;
        means[l]
            .iter_mut()
            .zip(embeddings.row(i))
            .for_each(|(m, v)| *m += v);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("class {k} has no members")));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut out = Tensor::zeros([classes, classes]);
    for i in 0..classes {
        for j in i..classes {
            let c = cosine(&means[i], &means[j]);
            out.data_mut()[i * classes + j] = c;
            out.data_mut()[j * classes + i] = c;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Invalid(format!("covariance must be {d}x{d}")));
        }
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOLERANCE {
            return Err(Error::Invalid("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of the rows of `[N, ...]` samples.
    pub fn fit(samples: &Tensor) -> Result<Self> {
        let n = samples.shape()[0];
        if n < 2 {
            return Err(Error::Invalid(
                "need at least 2 samples for a covariance".into(),
            ));
        }
        let d = samples.numel() / n;
        let x = DMatrix::from_row_slice(n, d, samples.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }
}

/// Symmetric PSD square root by eigendecomposition.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::Invalid(format!(
                "matrix is not positive semidefinite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the
/// product root taken from the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Invalid(format!(
            "dimension mismatch: {} and {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let ra = psd_sqrt(&a.cov)?;
    psd_sqrt(&b.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner)?.trace();
    let diff = &a.mean - &b.mean;
    let fd = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Fraction of generated latents whose nearest anchor (cosine on the flattened
/// latent) belongs to their conditioning class.
pub fn class_agreement(generated: &Tensor, classes: &[usize], anchors: &Tensor) -> Result<f64> {
    let n = generated.shape().first().copied().unwrap_or(0);
    if n == 0 || classes.len() != n || anchors.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid(
            "class_agreement needs non-empty, matching inputs".into(),
        ));
    }
    let k = anchors.shape()[0];
    let per = generated.numel() / n;
    if anchors.numel() / k != per {
        return Err(Error::Invalid(
            "generated latents and anchors differ in size".into(),
        ));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let g = &generated.data()[i * per..(i + 1) * per];
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..k {
            let c = cosine(g, &anchors.data()[j * per..(j + 1) * per]);
            if c > best.0 {
                best = (c, j);
            }
        }
        hits += usize::from(best.1 == classes[i]);
    }
    Ok(hits as f64 / n as f64)
}

/// CSV with header `id,label,d0,...`; values printed with 17 significant digits.
pub fn embeddings_csv(embeddings: &Tensor, labels: &[usize]) -> Result<String> {
    let (n, d) = match embeddings.shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::Invalid(format!(
                "expected [N, D] embeddings, got {s:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::Invalid("one label per row required".into()));
    }
    let mut out = String::from("id,label");
    for j in 0..d {
        let _ = write!(out, ",d{j}");
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        let _ = write!(out, "{i},{l}");
        for v in embeddings.row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes [`embeddings_csv`] to `path`. An empty set still gets a header.
pub fn export_embeddings(embeddings: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    write_atomic(path, embeddings_csv(embeddings, labels)?.as_bytes())
}

/// Same layout as [`export_embeddings`] for `width` columns and no rows.
pub fn export_empty(width: usize, path: &Path) -> Result<()> {
    let mut out = String::from("id,label");
    for j in 0..width {
        let _ = write!(out, ",d{j}");
    }
    out.push('\n');
    write_atomic(path, out.as_bytes())
}

/// Parses an embedding CSV back into ids, labels and rows.
pub fn read_embeddings(text: &str) -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?;
    if !header.starts_with("id,label") {
        return Err(Error::Format("missing `id,label` header".into()));
    }
    let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let mut f = line.split(',');
        let parse_int = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad row `{line}`")))
        };
        ids.push(parse_int(f.next())?);
        labels.push(parse_int(f.next())?);
        rows.push(
            f.map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((ids, labels, rows))
}

/// One row of the `metric,scope,mode,K,value` table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub scope: String,
    pub mode: String,
    pub k: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,scope,mode,K,value\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.metric, r.scope, r.mode, r.k, r.value
        );
    }
    out
}
