//! In-context regression episodes built from tabular datasets.
//!
//! A dataset is split into train and test rows.  Inputs are normalized by a
//! configurable scheme ([`crate::normalize`]), fitted on the training split
//! only; targets stay raw.  The retrieval corpus is the training split
//! z-scored regardless of the input-side scheme, and each episode injects a
//! seeded sample of corpus rows as key/value documents, mirroring the
//! synthetic dot-product layout: both input slots carry the same normalized
//! feature vector.
//!
//! Per-episode sampling order is frozen (context indices, query index,
//! document indices), so a `(seed, index)` pair reproduces an episode bit
//! for bit.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use crate::attention::{DocInjection, TokenDims, TokenMatrix};
use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::normalize::{NormKind, Normalizer};
use crate::rng;
use crate::task::{DocumentSet, Episode};

/// A regression table with a declared train/test split.  Targets are kept
/// separate from features and are never normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    /// All rows, train split first: `(n_train + n_test) x features`.
    pub x: Mat,
    /// Targets aligned with `x`: `(n_train + n_test) x d_y`.
    pub y: Mat,
    pub n_train: usize,
}

impl TabularDataset {
    pub fn new(name: String, x: Mat, y: Mat, n_train: usize) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "TabularDataset::new",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        if n_train == 0 || n_train >= x.rows() {
            return Err(CoreError::InvalidConfig(
                "train split must leave at least one test row".into(),
            ));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(CoreError::NonFinite("tabular dataset"));
        }
        Ok(TabularDataset { name, x, y, n_train })
    }

    pub fn n_test(&self) -> usize {
        self.x.rows() - self.n_train
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y.cols()
    }

    pub fn train_x(&self) -> Mat {
        self.x.block(0, self.n_train, 0, self.x.cols())
    }

    pub fn test_x(&self) -> Mat {
        self.x.block(self.n_train, self.x.rows(), 0, self.x.cols())
    }

    pub fn train_y(&self) -> Mat {
        self.y.block(0, self.n_train, 0, self.y.cols())
    }

    pub fn test_y(&self) -> Mat {
        self.y.block(self.n_train, self.y.rows(), 0, self.y.cols())
    }
}

/// The retrieval corpus: training rows z-scored with training statistics,
/// independent of whatever input-side normalizer an experiment varies.
pub fn build_corpus(ds: &TabularDataset) -> Result<DocumentSet> {
    let train = ds.train_x();
    let norm = Normalizer::fit(NormKind::Zscore, &train)?;
    Ok(DocumentSet::new(norm.apply(&train)?))
}

/// Episode shape knobs; the defaults match the synthetic task family
/// (`TaskConfig::synthetic_default`): 10 context examples, 10 documents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InContextConfig {
    pub n_ctx: usize,
    pub docs: usize,
}

impl Default for InContextConfig {
    fn default() -> Self {
        InContextConfig { n_ctx: 10, docs: 10 }
    }
}

/// Episode factory over one normalized dataset.
#[derive(Debug, Clone)]
pub struct TabularSampler {
    pub cfg: InContextConfig,
    pub norm: Normalizer,
    norm_train: Mat,
    norm_test: Mat,
    train_y: Mat,
    test_y: Mat,
    corpus: DocumentSet,
}

impl TabularSampler {
    pub fn new(ds: &TabularDataset, kind: NormKind, cfg: InContextConfig) -> Result<Self> {
        if cfg.n_ctx == 0 || cfg.docs == 0 {
            return Err(CoreError::InvalidConfig("n_ctx and docs must be positive".into()));
        }
        if cfg.n_ctx > ds.n_train {
            return Err(CoreError::InvalidConfig("n_ctx exceeds training rows".into()));
        }
        if cfg.docs > ds.n_train {
            return Err(CoreError::InvalidConfig("docs exceeds corpus rows".into()));
        }
        let corpus = build_corpus(ds)?;
        let norm = Normalizer::fit(kind, &ds.train_x())?;
        let norm_train = norm.apply(&ds.train_x())?;
        let norm_test = norm.apply(&ds.test_x())?;
        Ok(TabularSampler {
            cfg,
            norm,
            norm_train,
            norm_test,
            train_y: ds.train_y(),
            test_y: ds.test_y(),
            corpus,
        })
    }

    pub fn dims(&self) -> TokenDims {
        let f = self.norm_train.cols();
        TokenDims::new(f, f, self.train_y.cols())
    }

    pub fn corpus(&self) -> &DocumentSet {
        &self.corpus
    }

    /// Build episode `index` under `master_seed`.  Context rows come from
    /// the training split, the query from the test split, and the injected
    /// documents from the z-scored corpus.
    pub fn episode(&self, master_seed: u64, index: u64) -> Episode {
        let mut r = rng::stream(master_seed, index);
        let ctx_idx = sample_distinct(&mut r, self.norm_train.rows(), self.cfg.n_ctx);
        let query_idx = r.gen_range(0..self.norm_test.rows());
        let doc_idx = sample_distinct(&mut r, self.corpus.n_docs(), self.cfg.docs);

        let dims = self.dims();
        let mut tm = TokenMatrix::zeros(dims, self.cfg.n_ctx);
        for (i, &ti) in ctx_idx.iter().enumerate() {
            let row = self.norm_train.row(ti);
            tm.mat.row_mut(i)[dims.x1()].copy_from_slice(row);
            tm.mat.row_mut(i)[dims.x2()].copy_from_slice(row);
            tm.mat.row_mut(i)[dims.y()].copy_from_slice(self.train_y.row(ti));
        }
        let q = self.cfg.n_ctx;
        let qrow = self.norm_test.row(query_idx);
        tm.mat.row_mut(q)[dims.x1()].copy_from_slice(qrow);
        tm.mat.row_mut(q)[dims.x2()].copy_from_slice(qrow);

        let docs = Mat::from_fn(self.cfg.docs, dims.d1, |i, j| self.corpus.docs[(doc_idx[i], j)]);
        let inject = DocInjection::from_docs(&docs, dims.d1);

        Episode {
            tokens: tm,
            inject: Some(inject),
            query_y: self.test_y.row(query_idx).to_vec(),
            shared_slots: true,
        }
    }

    pub fn episodes(&self, master_seed: u64, count: usize) -> Vec<Episode> {
        (0..count as u64).map(|i| self.episode(master_seed, i)).collect()
    }
}

/// `k` distinct draws from `0..n`, in draw order.
fn sample_distinct(r: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = r.gen_range(0..n);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Feature-geometry families for the normalization boundary study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFamily {
    /// Per-feature U(0, scale): bounded and flat, the regime where min–max
    /// normalization keeps dot-product geometry well conditioned.
    BoundedUniform,
    /// Per-feature scaled LogNormal(0, 1.5): skewed with heavy right tails,
    /// so a handful of outliers dominate dot products.
    LogNormalHeavy,
}

impl FeatureFamily {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureFamily::BoundedUniform => "bounded_uniform",
            FeatureFamily::LogNormalHeavy => "lognormal_heavy",
        }
    }
}

/// Synthetic regression table with controlled feature geometry.  The target
/// is the same saturating nonlinear teacher for both families,
/// `y = sum_c w_c tanh(x_c) + 0.1 eps`, so any alignment contrast between
/// them is driven by the feature distribution, not the target form.
///
/// Sampling order is frozen: teacher, feature scales, features, noise.
pub fn synthetic_tabular(
    family: FeatureFamily,
    rows: usize,
    features: usize,
    n_train: usize,
    seed: u64,
) -> Result<TabularDataset> {
    let mut r = rng::stream(seed, 0);
    let w: Vec<f64> = (0..features).map(|_| rng::normal(&mut r, 1.0)).collect();
    let scales: Vec<f64> = (0..features).map(|_| r.gen_range(0.5..2.0)).collect();
    let lognorm = LogNormal::new(0.0, 1.5).expect("valid sigma");
    let x = Mat::from_fn(rows, features, |_, c| match family {
        FeatureFamily::BoundedUniform => scales[c] * r.gen_range(0.0..1.0),
        FeatureFamily::LogNormalHeavy => scales[c] * lognorm.sample(&mut r),
    });
    let y = Mat::from_fn(rows, 1, |row, _| {
        let mut acc = crate::metrics::Kahan::new();
        for c in 0..features {
            acc.add(w[c] * crate::mathx::tanh(x[(row, c)]));
        }
        acc.value() + 0.1 * rng::normal(&mut r, 1.0)
    });
    TabularDataset::new(String::from(family.name()), x, y, n_train)
}
