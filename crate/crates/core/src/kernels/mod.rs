//! Gradient feature sets and the SGD, SignGD and asymmetric SignGD Gram matrices.

mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{dot, Dense};
use crate::model::Model;
use crate::netcore::GradientFeatures;
use crate::optim::epsilon_sign;

pub use io::{GramMeta, GRAM_MAGIC, GRAM_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `⟨∇f(ξ), ∇f(ξ′)⟩`.
    Sgd,
    /// `⟨sign ∇f(ξ), sign ∇f(ξ′)⟩`.
    #[serde(rename = "signgd")]
    SignGd,
    /// `⟨∇f(ξ), sign ∇f(ξ′)⟩`; rows plain, columns signed.
    #[serde(rename = "asigngd")]
    ASignGd,
}

impl KernelKind {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, KernelKind::ASignGd)
    }

    pub fn row_mode_is_sign(self) -> bool {
        matches!(self, KernelKind::SignGd)
    }

    pub fn col_mode_is_sign(self) -> bool {
        !matches!(self, KernelKind::Sgd)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Sgd => "sgd",
            KernelKind::SignGd => "signgd",
            KernelKind::ASignGd => "asigngd",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(KernelKind::Sgd),
            "signgd" => Ok(KernelKind::SignGd),
            "asigngd" => Ok(KernelKind::ASignGd),
            other => Err(Error::config(format!(
                "unknown kernel kind `{other}` (expected sgd, signgd or asigngd)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureMode {
    Plain,
    /// ε-sign applied coordinate-wise; `eps = None` picks `1e−8 · max |coordinate|`.
    Sign {
        eps: Option<f64>,
    },
}

/// Relative ε used when none is given.
pub const DEFAULT_RELATIVE_EPS: f64 = 1e-8;

/// One feature vector per `(example, logit)` pair, ordered class-major:
/// entry `c · N + i` is logit `logits[c]` of example `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub features: Vec<GradientFeatures>,
    /// Resolved mode; for sign features `eps` is always `Some`.
    pub mode: FeatureMode,
    pub logits: Vec<usize>,
    pub num_examples: usize,
    pub params_hash: String,
    pub dataset_hash: String,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn is_sign(&self) -> bool {
        matches!(self.mode, FeatureMode::Sign { .. })
    }

    pub fn eps(&self) -> Option<f64> {
        match self.mode {
            FeatureMode::Plain => None,
            FeatureMode::Sign { eps } => eps,
        }
    }

    pub fn ids(&self) -> Vec<(u64, usize)> {
        self.features
            .iter()
            .map(|f| (f.example_id, f.logit))
            .collect()
    }

    /// Largest absolute coordinate across all vectors.
    pub fn max_abs(&self) -> f64 {
        self.features
            .iter()
            .flat_map(|f| f.values.iter())
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// ε-sign transform of a plain feature set.
    pub fn to_sign(&self, eps: Option<f64>) -> Result<FeatureSet> {
        if self.is_sign() {
            return Err(Error::config("feature set is already sign-transformed"));
        }
        let eps = eps.unwrap_or(DEFAULT_RELATIVE_EPS * self.max_abs());
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::config(format!(
                "sign epsilon must be finite and non-negative, got {eps}"
            )));
        }
        let features = self
            .features
            .iter()
            .map(|f| GradientFeatures::new(f.example_id, f.logit, epsilon_sign(&f.values, eps)))
            .collect();
        Ok(FeatureSet {
            features,
            mode: FeatureMode::Sign { eps: Some(eps) },
            ..self.clone()
        })
    }
}

/// SHA-256 over the little-endian bytes of the trainable coordinates.
pub fn params_hash(model: &dyn Model) -> String {
    let bytes: Vec<u8> = model
        .parameters()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    sha256_hex(&bytes)
}

/// Per-example gradients of the requested logits, class-major.
pub fn compute_features(
    model: &dyn Model,
    dataset: &Dataset,
    logits: &[usize],
    mode: FeatureMode,
) -> Result<FeatureSet> {
    dataset.ensure_non_empty()?;
    if logits.is_empty() {
        return Err(Error::input("at least one logit index is required"));
    }
    for &c in logits {
        if c >= model.output_dim() {
            return Err(Error::input(format!(
                "logit index {c} out of range for {} outputs",
                model.output_dim()
            )));
        }
    }
    let per_example: Vec<Vec<Vec<f64>>> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let rows = model.jacobian_rows(&ex.input, logits)?;
            if rows.iter().any(|r| r.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for example {}",
                    ex.id
                )));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::NonFinite { layer, what } => {
                Error::Numeric(format!("non-finite forward pass at layer {layer}: {what}"))
            }
            other => other,
        })?;
    let n = dataset.len();
    let mut features = Vec::with_capacity(n * logits.len());
    for (c_idx, &c) in logits.iter().enumerate() {
        for (i, ex) in dataset.examples.iter().enumerate() {
            features.push(GradientFeatures::new(
                ex.id,
                c,
                per_example[i][c_idx].clone(),
            ));
        }
    }
    let plain = FeatureSet {
        features,
        mode: FeatureMode::Plain,
        logits: logits.to_vec(),
        num_examples: n,
        params_hash: params_hash(model),
        dataset_hash: dataset.content_hash(),
    };
    match mode {
        FeatureMode::Plain => Ok(plain),
        FeatureMode::Sign { eps } => plain.to_sign(eps),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramProvenance {
    pub params_hash: String,
    pub dataset_hash: String,
    /// Column-side hashes when rows and columns come from different sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_dataset_hash: Option<String>,
    pub eps: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Rows and columns are indexed by `(example id, logit)` in class-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: Dense,
    pub symmetric: bool,
    pub num_classes: usize,
    pub row_ids: Vec<(u64, usize)>,
    pub col_ids: Vec<(u64, usize)>,
    pub kind: KernelKind,
    pub provenance: GramProvenance,
}

impl GramMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values.get(r, c)
    }

    /// Diagonal block `(c, c)` of a class-major `CN × CN'` matrix.
    pub fn class_block(&self, c: usize) -> Result<Dense> {
        if c >= self.num_classes {
            return Err(Error::input(format!(
                "class {c} out of range for {} classes",
                self.num_classes
            )));
        }
        let n = self.rows() / self.num_classes;
        let m = self.cols() / self.num_classes;
        let mut out = Dense::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.set(i, j, self.get(c * n + i, c * m + j));
            }
        }
        Ok(out)
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        if self.rows() != self.cols() {
            return f64::INFINITY;
        }
        let mut m: f64 = 0.0;
        for i in 0..self.rows() {
            for j in 0..i {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }
}

fn check_modes(rows: &FeatureSet, cols: &FeatureSet, kind: KernelKind) -> Result<()> {
    if rows.is_sign() != kind.row_mode_is_sign() || cols.is_sign() != kind.col_mode_is_sign() {
        let want = |s: bool| if s { "sign" } else { "plain" };
        return Err(Error::config(format!(
            "{} kernel needs {} rows and {} columns, got {} and {}",
            kind.name(),
            want(kind.row_mode_is_sign()),
            want(kind.col_mode_is_sign()),
            want(rows.is_sign()),
            want(cols.is_sign()),
        )));
    }
    if rows.dim() != cols.dim() {
        return Err(Error::shape(format!(
            "feature lengths differ: {} vs {}",
            rows.dim(),
            cols.dim()
        )));
    }
    if rows
        .features
        .iter()
        .chain(&cols.features)
        .any(|f| f.len() != rows.dim())
    {
        return Err(Error::shape(
            "feature vectors within a set have different lengths",
        ));
    }
    if rows.num_classes() != cols.num_classes() {
        return Err(Error::shape(format!(
            "row set has {} classes, column set has {}",
            rows.num_classes(),
            cols.num_classes()
        )));
    }
    Ok(())
}

/// Entry `(a, b)` is `⟨rows[a], cols[b]⟩`. Symmetric kinds on the same
/// examples are computed on one triangle and mirrored.
pub fn gram(rows: &FeatureSet, cols: &FeatureSet, kind: KernelKind) -> Result<GramMatrix> {
    check_modes(rows, cols, kind)?;
    let same_set =
        kind.is_symmetric() && rows.ids() == cols.ids() && rows.features == cols.features;
    let (r, c) = (rows.len(), cols.len());
    let row_data: Vec<Vec<f64>> = (0..r)
        .into_par_iter()
        .map(|a| {
            let start = if same_set { a } else { 0 };
            (start..c)
                .map(|b| dot(&rows.features[a].values, &cols.features[b].values))
                .collect()
        })
        .collect();
    let mut values = Dense::zeros(r, c);
    for (a, row) in row_data.into_iter().enumerate() {
        let start = if same_set { a } else { 0 };
        for (off, v) in row.into_iter().enumerate() {
            values.set(a, start + off, v);
            if same_set {
                values.set(start + off, a, v);
            }
        }
    }
    let col_dataset_hash =
        (cols.dataset_hash != rows.dataset_hash).then(|| cols.dataset_hash.clone());
    Ok(GramMatrix {
        values,
        symmetric: same_set,
        num_classes: rows.num_classes(),
        row_ids: rows.ids(),
        col_ids: cols.ids(),
        kind,
        provenance: GramProvenance {
            params_hash: rows.params_hash.clone(),
            dataset_hash: rows.dataset_hash.clone(),
            col_dataset_hash,
            eps: cols.eps().or(rows.eps()),
            seed: None,
        },
    })
}

/// Builds the features `kind` needs and the Gram between `rows` and `cols`
/// datasets (pass the same dataset twice for a training Gram).
pub fn kernel_between(
    model: &dyn Model,
    rows: &Dataset,
    cols: &Dataset,
    logits: &[usize],
    kind: KernelKind,
    eps: Option<f64>,
) -> Result<GramMatrix> {
    let row_plain = compute_features(model, rows, logits, FeatureMode::Plain)?;
    let col_plain = if std::ptr::eq(rows, cols) {
        row_plain.clone()
    } else {
        compute_features(model, cols, logits, FeatureMode::Plain)?
    };
    // one ε shared by both sides so that row and column transforms agree
    let eps =
        Some(eps.unwrap_or(DEFAULT_RELATIVE_EPS * row_plain.max_abs().max(col_plain.max_abs())));
    let r = if kind.row_mode_is_sign() {
        row_plain.to_sign(eps)?
    } else {
        row_plain
    };
    let c = if kind.col_mode_is_sign() {
        col_plain.to_sign(eps)?
    } else {
        col_plain
    };
    gram(&r, &c, kind)
}

/// Gram between features of `rows` (computed one example at a time and never
/// stored) and an existing column set. Suited to large test sets.
pub fn cross_gram(
    model: &dyn Model,
    rows: &Dataset,
    cols: &FeatureSet,
    kind: KernelKind,
) -> Result<GramMatrix> {
    rows.ensure_non_empty()?;
    if cols.is_sign() != kind.col_mode_is_sign() {
        return Err(Error::config(format!(
            "{} kernel column features have the wrong mode",
            kind.name()
        )));
    }
    let eps = cols.eps().unwrap_or(0.0);
    let logits = &cols.logits;
    let m = rows.len();
    let per_example: Vec<Vec<Vec<f64>>> = rows
        .examples
        .par_iter()
        .map(|ex| {
            let jac = model.jacobian_rows(&ex.input, logits)?;
            jac.into_iter()
                .map(|mut g| {
                    if g.len() != cols.dim() {
                        return Err(Error::shape(format!(
                            "feature lengths differ: {} vs {}",
                            g.len(),
                            cols.dim()
                        )));
                    }
                    if kind.row_mode_is_sign() {
                        g = epsilon_sign(&g, eps);
                    }
                    Ok(cols.features.iter().map(|f| dot(&g, &f.values)).collect())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut values = Dense::zeros(m * logits.len(), cols.len());
    for (c, _) in logits.iter().enumerate() {
        for (i, rows_i) in per_example.iter().enumerate() {
            for (j, v) in rows_i[c].iter().enumerate() {
                values.set(c * m + i, j, *v);
            }
        }
    }
    let row_ids = logits
        .iter()
        .flat_map(|&c| rows.examples.iter().map(move |e| (e.id, c)))
        .collect();
    Ok(GramMatrix {
        values,
        symmetric: false,
        num_classes: logits.len(),
        row_ids,
        col_ids: cols.ids(),
        kind,
        provenance: GramProvenance {
            params_hash: params_hash(model),
            dataset_hash: rows.content_hash(),
            col_dataset_hash: Some(cols.dataset_hash.clone()),
            eps: cols.eps(),
            seed: None,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDistance {
    /// `mean |K_a − K_b| / mean |K_b|`.
    pub mean_elementwise_relative: f64,
    /// `‖K_a − K_b‖_F / ‖K_b‖_F`.
    pub frobenius_relative: f64,
    /// `max |K_a − K_b| / |K_b|` over entries; a zero reference entry counts
    /// as infinite unless the two entries agree.
    pub per_entry_max: f64,
}

pub fn kernel_relative_distance(a: &Dense, b: &Dense) -> Result<KernelDistance> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "kernel shapes differ: {}×{} vs {}×{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (mut abs_diff, mut abs_ref, mut sq_diff, mut sq_ref, mut per_entry) =
        (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = (x - y).abs();
        abs_diff += d;
        abs_ref += y.abs();
        sq_diff += d * d;
        sq_ref += y * y;
        let rel = if y != 0.0 {
            d / y.abs()
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        per_entry = per_entry.max(rel);
    }
    if abs_ref == 0.0 {
        return Err(Error::Numeric(
            "reference kernel is identically zero; relative distance undefined".into(),
        ));
    }
    Ok(KernelDistance {
        mean_elementwise_relative: abs_diff / abs_ref,
        frobenius_relative: (sq_diff / sq_ref).sqrt(),
        per_entry_max: per_entry,
    })
}
