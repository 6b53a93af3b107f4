//! Distribution-fidelity evaluation.
//!
//! Generated and reference samples are compared with the k-nearest-neighbor
//! manifold metrics: precision is the fraction of generated feature vectors
//! that fall inside some reference point's k-NN ball, recall is the same
//! with the roles swapped. Neighbor search is exact brute force; at the
//! sample counts this pipeline produces, oracle-grade exactness matters more
//! than speed. A second evaluator summarizes lesion sizes: the long-axis
//! histogram plus the fraction inside the clinically common 3 to 10 mm band.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sdf::long_axis_mm;
use crate::volume::Mask;

/// Default neighbor count of the manifold metrics.
pub const DEFAULT_K: usize = 3;

/// Clinically common size band highlighted in the size summary, in mm.
pub const COMMON_BAND_MM: (f64, f64) = (3.0, 10.0);

/// Which side of the comparison a feature set represents. Metadata only; the
/// metric functions take the roles from their argument positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetLabel {
    Real,
    Fake,
}

/// N x d matrix of sample embeddings, one row per sample.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    label: SetLabel,
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureSet {
    pub fn new(label: SetLabel, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("dim", "feature dimension must be >= 1"));
        }
        if rows.len() % dim != 0 {
            return Err(Error::arg(
                "rows",
                format!("{} values do not tile rows of width {dim}", rows.len()),
            ));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("rows", "feature values must be finite"));
        }
        Ok(FeatureSet { label, dim, rows })
    }

    pub fn from_rows(label: SetLabel, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::arg(
                    "rows",
                    format!("row {i} has {} values, expected {dim}", r.len()),
                ));
            }
            flat.extend_from_slice(r);
        }
        Self::new(label, dim, flat)
    }

    pub fn label(&self) -> SetLabel {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from each row to its k-th nearest other row (self excluded),
/// with distance ties broken toward the smaller row index.
pub fn knn_radius(set: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::arg("k", "neighbor count must be >= 1"));
    }
    let n = set.len();
    if n < k + 1 {
        return Err(Error::TooFewRows { needed: k + 1, found: n });
    }
    let mut radii = Vec::with_capacity(n);
    let mut neighbors: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        neighbors.clear();
        for j in 0..n {
            if j != i {
                neighbors.push((dist2(set.row(i), set.row(j)), j));
            }
        }
        neighbors.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("distances are finite")
                .then(a.1.cmp(&b.1))
        });
        radii.push(neighbors[k - 1].0.sqrt());
    }
    Ok(radii)
}

fn check_compatible(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::arg(
            "feature sets",
            format!("dimension mismatch: {} vs {}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

/// Fraction of `fake` rows lying within the k-NN ball of at least one `real`
/// row.
pub fn improved_precision(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<f64> {
    check_compatible(real, fake)?;
    if fake.is_empty() {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    let radii = knn_radius(real, k)?;
    let mut covered = 0usize;
    for f in 0..fake.len() {
        let frow = fake.row(f);
        let inside = (0..real.len())
            .any(|r| dist2(frow, real.row(r)).sqrt() <= radii[r]);
        if inside {
            covered += 1;
        }
    }
    Ok(covered as f64 / fake.len() as f64)
}

/// Fraction of `real` rows lying within the k-NN ball of at least one `fake`
/// row. Exactly `improved_precision` with the roles swapped.
pub fn improved_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<f64> {
    improved_precision(fake, real, k)
}

/// Evaluation record emitted by the IP/IR command.
#[derive(Debug, Clone, Serialize)]
pub struct IprReport {
    pub ip: f64,
    pub ir: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
}

/// Computes both manifold metrics and packages them for serialization.
pub fn evaluate_ipr(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<IprReport> {
    Ok(IprReport {
        ip: improved_precision(real, fake, k)?,
        ir: improved_recall(real, fake, k)?,
        k,
        n_real: real.len(),
        n_fake: fake.len(),
    })
}

impl IprReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

/// One bar of the long-axis histogram. The last bin includes its upper edge.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub count: usize,
}

/// Size statistics over a set of lesion masks.
#[derive(Debug, Clone)]
pub struct LongAxisReport {
    pub axes_mm: Vec<f64>,
    pub min_mm: f64,
    pub max_mm: f64,
    /// Fraction of lesions inside [`COMMON_BAND_MM`], inclusive.
    pub fraction_3_to_10_mm: f64,
    pub bins: Vec<HistogramBin>,
}

/// Measures every mask's long axis and bins the values into `bin_count`
/// equal-width bins spanning the observed range.
pub fn long_axis_report(masks: &[Mask], bin_count: usize) -> Result<LongAxisReport> {
    if masks.is_empty() {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    if bin_count == 0 {
        return Err(Error::arg("bin_count", "must be >= 1"));
    }
    let mut axes_mm = Vec::with_capacity(masks.len());
    for m in masks {
        axes_mm.push(long_axis_mm(m)?);
    }
    Ok(summarize_axes(axes_mm, bin_count))
}

/// Same summary for long axes that were already measured.
pub fn summarize_axes(axes_mm: Vec<f64>, bin_count: usize) -> LongAxisReport {
    assert!(!axes_mm.is_empty() && bin_count > 0, "validated by callers");
    let mut min_mm = f64::INFINITY;
    let mut max_mm = f64::NEG_INFINITY;
    for &a in &axes_mm {
        min_mm = min_mm.min(a);
        max_mm = max_mm.max(a);
    }
    let (band_lo, band_hi) = COMMON_BAND_MM;
    let in_band = axes_mm.iter().filter(|&&a| a >= band_lo && a <= band_hi).count();
    let fraction = in_band as f64 / axes_mm.len() as f64;

    let width = (max_mm - min_mm) / bin_count as f64;
    let mut bins: Vec<HistogramBin> = (0..bin_count)
        .map(|b| HistogramBin {
            lo_mm: min_mm + b as f64 * width,
            hi_mm: if b + 1 == bin_count { max_mm } else { min_mm + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &a in &axes_mm {
        let idx = if width > 0.0 {
            (((a - min_mm) / width) as usize).min(bin_count - 1)
        } else {
            0
        };
        bins[idx].count += 1;
    }

    LongAxisReport { axes_mm, min_mm, max_mm, fraction_3_to_10_mm: fraction, bins }
}

impl LongAxisReport {
    /// Histogram as CSV with a header row.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo_mm,bin_hi_mm,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.lo_mm, b.hi_mm, b.count));
        }
        out
    }

    /// Summary line as JSON.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            count: usize,
            min_mm: f64,
            max_mm: f64,
            fraction_3_to_10_mm: f64,
        }
        serde_json::to_string(&Summary {
            count: self.axes_mm.len(),
            min_mm: self.min_mm,
            max_mm: self.max_mm,
            fraction_3_to_10_mm: self.fraction_3_to_10_mm,
        })
        .expect("summary serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Distribution checks
// ---------------------------------------------------------------------------

/// Two-sided Kolmogorov-Smirnov statistic of a sample against the uniform
/// distribution on `[lo, hi]`.
///
/// Returns the supremum distance between the empirical CDF and the uniform
/// CDF. At the 5% level the statistic of a genuinely uniform sample stays
/// below roughly `1.36 / sqrt(n)`.
pub fn ks_statistic_uniform(values: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("values", "KS statistic needs at least one sample"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::arg("range", format!("invalid uniform support [{lo}, {hi}]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("values", "KS statistic requires finite samples"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let above = (i as f64 + 1.0) / n - cdf;
        let below = cdf - i as f64 / n;
        worst = worst.max(above).max(below);
    }
    Ok(worst)
}
