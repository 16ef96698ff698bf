//! Time-series data model, channel-wise normalisation and crop/pad to a
//! fixed context length.

mod manifest;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use manifest::{load_corpus, load_manifest, read_csv, write_corpus};
pub use synth::{
    planted_layout, synth_corpus, LayoutConfig, LayoutField, LayoutShape, SignalKind, SynthConfig, SynthDomain,
};

/// A family of series sharing variate semantics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub variates: Vec<String>,
    /// `false` means every observation is analysed on its own (`V_S = 1`).
    pub multivariate: bool,
    pub nominal_frequency: f64,
}

impl DomainSpec {
    pub fn new(
        name: impl Into<String>,
        variates: Vec<String>,
        multivariate: bool,
        nominal_frequency: f64,
    ) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Config("domain name is empty".into()));
        }
        if variates.is_empty() {
            return Err(Error::Config(format!("domain `{name}` has no variates")));
        }
        let mut seen = HashSet::new();
        for v in &variates {
            if !seen.insert(v.as_str()) {
                return Err(Error::Config(format!("domain `{name}` lists variate `{v}` twice")));
            }
        }
        if !multivariate && variates.len() != 1 {
            return Err(Error::Config(format!(
                "uni-variate domain `{name}` must declare exactly one variate, got {}",
                variates.len()
            )));
        }
        Ok(Self { name, variates, multivariate, nominal_frequency })
    }

    /// Convenience constructor with generated variate names `v0, v1, ...`.
    pub fn with_count(name: impl Into<String>, count: usize) -> Result<Self> {
        let variates = (0..count).map(|i| format!("v{i}")).collect();
        Self::new(name, variates, count > 1, 1.0)
    }

    pub fn num_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn variate_index(&self, name: &str) -> Option<usize> {
        self.variates.iter().position(|v| v == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Target(Vec<f64>),
}

/// Domains, samples, and any planted variate layouts (`V × k`).
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub domains: Vec<Arc<DomainSpec>>,
    pub samples: Vec<TimeSeriesSample>,
    pub layouts: BTreeMap<String, Matrix>,
}

impl Corpus {
    pub fn domain(&self, name: &str) -> Option<&Arc<DomainSpec>> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Channel-wise normalised copy (normalisation happens before any padding).
    pub fn normalized(&self) -> Corpus {
        Corpus {
            domains: self.domains.clone(),
            samples: self.samples.iter().map(normalize_channelwise).collect(),
            layouts: self.layouts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesSample {
    pub domain: Arc<DomainSpec>,
    /// `V_S × T`, one row per variate.
    pub values: Matrix,
    /// Row `i` of `values` is catalogue variate `variate_subset[i]`.
    pub variate_subset: Vec<usize>,
    pub label: Option<Label>,
}

impl TimeSeriesSample {
    /// Sample covering the full catalogue in order.
    pub fn new(domain: Arc<DomainSpec>, values: Matrix, label: Option<Label>) -> Result<Self> {
        let subset = (0..values.rows()).collect();
        Self::with_subset(domain, values, subset, label)
    }

    pub fn with_subset(
        domain: Arc<DomainSpec>,
        values: Matrix,
        variate_subset: Vec<usize>,
        label: Option<Label>,
    ) -> Result<Self> {
        if values.rows() != variate_subset.len() {
            return Err(Error::Shape(format!(
                "{} value rows but {} variate indices",
                values.rows(),
                variate_subset.len()
            )));
        }
        if values.cols() == 0 {
            return Err(Error::Shape("sample has no time points".into()));
        }
        let mut seen = HashSet::new();
        for &i in &variate_subset {
            if i >= domain.num_variates() {
                return Err(Error::VariateIndex {
                    domain: domain.name.clone(),
                    index: i,
                    count: domain.num_variates(),
                });
            }
            if !seen.insert(i) {
                return Err(Error::Invalid(format!("variate index {i} repeated")));
            }
        }
        if !values.is_finite() {
            return Err(Error::Data { entry: domain.name.clone(), message: "values contain NaN or infinity".into() });
        }
        Ok(Self { domain, values, variate_subset, label })
    }

    pub fn num_variates(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    /// Splits a multi-row sample of a uni-variate domain into one sample per row.
    pub fn split_univariate(self) -> Vec<TimeSeriesSample> {
        if self.domain.multivariate || self.values.rows() <= 1 {
            return vec![self];
        }
        let t = self.values.cols();
        (0..self.values.rows())
            .map(|r| TimeSeriesSample {
                domain: Arc::clone(&self.domain),
                values: Matrix::from_vec(1, t, self.values.row(r).to_vec()),
                variate_subset: vec![0],
                label: self.label.clone(),
            })
            .collect()
    }
}

/// A sample cropped or right-padded to the context length.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// `V_S × T̄`.
    pub values: Matrix,
    /// `true` for real data, `false` for zero padding.
    pub time_validity: Vec<bool>,
    pub crop_offset: usize,
}

impl PreparedSample {
    /// Wraps an exact-length matrix with every time point valid.
    pub fn full(values: Matrix) -> Self {
        let t = values.cols();
        Self { values, time_validity: vec![true; t], crop_offset: 0 }
    }

    pub fn num_variates(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn valid_len(&self) -> usize {
        self.time_validity.iter().filter(|v| **v).count()
    }
}

/// Per-variate `(x − μ) / σ` with population σ. Flat rows become zeros.
pub fn normalize_channelwise(sample: &TimeSeriesSample) -> TimeSeriesSample {
    let mut out = sample.clone();
    normalize_rows(&mut out.values);
    out
}

pub(crate) fn normalize_rows(values: &mut Matrix) {
    for r in 0..values.rows() {
        let row = values.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Random crop (if longer) or right zero-pad (if shorter) to `context_length`.
pub fn prepare<R: Rng + ?Sized>(
    sample: &TimeSeriesSample,
    context_length: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<PreparedSample> {
    if patch_size == 0 || context_length == 0 || context_length % patch_size != 0 {
        return Err(Error::Config(format!(
            "context length {context_length} is not a positive multiple of patch size {patch_size}"
        )));
    }
    let t = sample.len();
    let v = sample.num_variates();
    if t > context_length {
        let offset = rng.random_range(0..=t - context_length);
        Ok(crop_at(sample, context_length, offset))
    } else {
        let mut values = Matrix::zeros(v, context_length);
        for r in 0..v {
            values.row_mut(r)[..t].copy_from_slice(sample.values.row(r));
        }
        let mut time_validity = vec![false; context_length];
        time_validity[..t].fill(true);
        Ok(PreparedSample { values, time_validity, crop_offset: 0 })
    }
}

/// Deterministic crop starting at `offset`.
pub fn crop_at(sample: &TimeSeriesSample, length: usize, offset: usize) -> PreparedSample {
    let v = sample.num_variates();
    let mut values = Matrix::zeros(v, length);
    for r in 0..v {
        values.row_mut(r).copy_from_slice(&sample.values.row(r)[offset..offset + length]);
    }
    PreparedSample { values, time_validity: vec![true; length], crop_offset: offset }
}
