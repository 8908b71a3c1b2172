//! Synthetic two-domain cohorts standing in for screening mammograms.
//!
//! Each patient has a latent density `d ~ U(0,1)`; the ordinal label is the
//! quartile bin of `d`. Images are thresholded band-limited noise whose bright
//! fraction tracks `d`, rendered through a scanner model (gain, offset,
//! additive noise, texture scale) in raw integer intensities and then divided
//! by the maximum of the bit depth. The label rule is shared by both domains,
//! so any shift between them is purely covariate.

mod generate;
mod io;
mod split;

pub use generate::{
    bit_depth_normalize, generate_patient, make_domain_pair, render_image, BitDepth, DomainSpec,
    ImageStyle, DEFAULT_N_PATIENTS_O, DEFAULT_N_PATIENTS_T, NUM_SUBSCANNERS,
};
pub use io::{load_pair, save_pair};
pub use split::{patient_split, Split, SplitAssignment};


use crate::error::{Error, Result};
use crate::nn::{DomainTag, IMAGE_SIDE};
use crate::tensor::Tensor;

pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub patient_id: u32,
    /// `IMAGE_SIDE²` intensities in `[0,1]`, row-major.
    pub image: Vec<f32>,
    pub label: u8,
    pub domain: DomainTag,
    /// Scanner index 0–4 for domain O, `None` for T.
    pub subscanner: Option<u8>,
}

/// One cohort: its scanner specs, records sorted by patient, and the
/// patient-level split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain: DomainTag,
    pub specs: Vec<DomainSpec>,
    pub n_patients: usize,
    pub records: Vec<SampleRecord>,
    pub split: SplitAssignment,
}

impl DomainData {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records
            .iter()
            .filter(move |r| self.split.get(r.patient_id) == Some(split))
    }

    pub fn image_set(&self, split: Split) -> ImageSet {
        ImageSet::from_records(self.records_in(split))
    }
}

/// The original and target cohorts generated together.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub shift: f64,
    pub seed: u64,
    pub o: DomainData,
    pub t: DomainData,
}

impl DomainPair {
    pub fn domain(&self, d: DomainTag) -> &DomainData {
        match d {
            DomainTag::O => &self.o,
            DomainTag::T => &self.t,
        }
    }
}

/// Flat images and labels, ready for batching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> Self {
        let mut set = ImageSet::default();
        for r in records {
            set.images.extend_from_slice(&r.image);
            set.labels.push(r.label as usize);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenation of two sets, `self` first.
    pub fn concat(&self, other: &ImageSet) -> ImageSet {
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out
    }

    /// Images at `indices` as `[n,1,28,28]`, with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} out of {} samples", self.len())));
            }
            data.extend_from_slice(&self.images[i * PIXELS..(i + 1) * PIXELS]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(&[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels,
        ))
    }

    /// Consecutive chunks of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |c| {
            let end = ((c + 1) * size).min(idx.len());
            self.batch(&idx[c * size..end])
        })
    }
}

/// Per-class fraction of records.
pub fn class_marginals(records: &[SampleRecord]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for r in records {
        m[r.label as usize] += 1.0;
    }
    let n = records.len().max(1) as f64;
    m.map(|c| c / n)
}
