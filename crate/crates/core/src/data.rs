//! Dataset manifests, patch sampling, normalization, within-patient
//! shuffling and the MLP patch grid.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctsim::DoseModel;
use crate::error::{Error, Result};
use crate::models::{read_json, write_json};
use crate::optim::BatchSource;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
/// HU values are divided by this before entering a network.
pub const HU_SCALE: f32 = 512.0;
pub const CNN_PATCH: usize = 40;
pub const CNN_PATCHES_PER_SLICE: usize = 150;
pub const MLP_PATCH: usize = 13;
pub const MLP_STRIDE: usize = 3;
pub const MLP_PATCHES_PER_SLICE: usize = 500;

pub fn normalize(hu: &Tensor<f32>) -> Tensor<f32> {
    hu.map(|v| v / HU_SCALE)
}

pub fn denormalize(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v * HU_SCALE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub index: usize,
    /// Position along the patient axis in [0, 1].
    pub z: f64,
    /// Paths relative to the manifest directory.
    pub normal: String,
    pub low: String,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub split: Split,
    pub anatomy_seed: u64,
    pub slices: Vec<SliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generation_seed: u64,
    pub size: usize,
    pub pixel_spacing_mm: f64,
    pub mu_water: f64,
    /// Low-dose acquisition; the normal-dose slices use the same incident
    /// photon count at dose fraction 1.
    pub dose: DoseModel,
    pub n_angles: usize,
    pub n_detectors: usize,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest.json",
                format!("version {} (expected {MANIFEST_VERSION})", self.format_version),
            ));
        }
        let mut ids = HashSet::new();
        for p in &self.patients {
            if !ids.insert(&p.id) {
                return Err(Error::param(format!("duplicate patient id '{}'", p.id)));
            }
        }
        Ok(())
    }

    pub fn patients_in(&self, split: Split) -> impl Iterator<Item = (usize, &PatientEntry)> {
        self.patients.iter().enumerate().filter(move |(_, p)| p.split == split)
    }
}

/// Co-registered normal- and low-dose slices in HU, each shaped (1, 1, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub normal: Tensor<f32>,
    pub low: Tensor<f32>,
}

impl SlicePair {
    pub fn new(normal: Tensor<f32>, low: Tensor<f32>) -> Result<Self> {
        normal.expect_same_shape(&low, "slice pair")?;
        if normal.batch() != 1 || normal.channels() != 1 {
            return Err(Error::shape("slice pairs hold single-channel images"));
        }
        Ok(Self { normal, low })
    }
}

/// A manifest with its slices loaded; `slices[p][s]` matches
/// `manifest.patients[p].slices[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub slices: Vec<Vec<SlicePair>>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.manifest.validate()?;
        for (patient, pairs) in self.manifest.patients.iter().zip(&self.slices) {
            let pdir = dir.join(&patient.id);
            fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
            for (entry, pair) in patient.slices.iter().zip(pairs) {
                pair.normal.write_ten(&dir.join(&entry.normal))?;
                pair.low.write_ten(&dir.join(&entry.low))?;
            }
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        manifest.validate()?;
        let mut slices = Vec::with_capacity(manifest.patients.len());
        for patient in &manifest.patients {
            let mut pairs = Vec::with_capacity(patient.slices.len());
            for entry in &patient.slices {
                let pair = SlicePair::new(
                    Tensor::read_ten(&dir.join(&entry.normal))?,
                    Tensor::read_ten(&dir.join(&entry.low))?,
                )
                .map_err(|e| Error::format(dir.join(&entry.low), e.to_string()))?;
                pairs.push(pair);
            }
            slices.push(pairs);
        }
        Ok(Self { manifest, slices })
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// (patient index, slice index, pair) over one split in manifest order.
    pub fn pairs(&self, split: Split) -> impl Iterator<Item = (usize, usize, &SlicePair)> {
        self.manifest
            .patients_in(split)
            .flat_map(move |(p, entry)| (0..entry.slices.len()).map(move |s| (p, s, &self.slices[p][s])))
    }

    pub fn count(&self, split: Split) -> usize {
        self.pairs(split).count()
    }
}

/// Uniform top-left corners of `n` fully contained `size x size` windows,
/// drawn with replacement.
pub fn sample_patch_corners<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > height || size > width {
        return Err(Error::param(format!(
            "patch size {size} does not fit a {height}x{width} slice"
        )));
    }
    Ok((0..n)
        .map(|_| (rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub y: usize,
    pub x: usize,
    /// (1, C, size, size)
    pub input: Tensor<f32>,
    /// (1, 1, size, size)
    pub target: Tensor<f32>,
}

/// Crops input and target at the same sampled corners. `stacked_input` is
/// (1, C, H, W) and `target_residual` is (1, 1, H, W).
pub fn extract_patches<R: Rng + ?Sized>(
    stacked_input: &Tensor<f32>,
    target_residual: &Tensor<f32>,
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    check_slice_pair(stacked_input, target_residual)?;
    let corners = sample_patch_corners(stacked_input.height(), stacked_input.width(), n, size, rng)?;
    Ok(corners
        .into_iter()
        .map(|(y, x)| {
            let mut input = Tensor::zeros([1, stacked_input.channels(), size, size]);
            stacked_input.crop_into(0, y, x, size, size, input.data_mut());
            let mut target = Tensor::zeros([1, 1, size, size]);
            target_residual.crop_into(0, y, x, size, size, target.data_mut());
            PatchPair { y, x, input, target }
        })
        .collect())
}

fn check_slice_pair(input: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
    if input.batch() != 1 || target.batch() != 1 || target.channels() != 1 {
        return Err(Error::shape("expected a (1, C, H, W) input and a (1, 1, H, W) target"));
    }
    if input.height() != target.height() || input.width() != target.width() {
        return Err(Error::shape(format!(
            "input {}x{} and target {}x{} differ",
            input.height(),
            input.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Permutes each maximal run of equal patient ids independently, keeping
/// the order of the runs.
pub fn shuffle_within_patient<T, R: Rng + ?Sized>(
    items: &mut [T],
    patient_of: impl Fn(&T) -> usize,
    rng: &mut R,
) {
    let mut start = 0;
    while start < items.len() {
        let id = patient_of(&items[start]);
        let mut end = start + 1;
        while end < items.len() && patient_of(&items[end]) == id {
            end += 1;
        }
        items[start..end].shuffle(rng);
        start = end;
    }
}

/// Location of one training patch: `source` indexes the slice table held by
/// the batch iterator, `patient`/`slice` index the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub source: usize,
    pub patient: usize,
    pub slice: usize,
    pub y: usize,
    pub x: usize,
}

pub fn patch_audit_csv(refs: &[PatchRef]) -> String {
    let mut s = String::from("patient,slice,y,x\n");
    for r in refs {
        let _ = writeln!(s, "{},{},{},{}", r.patient, r.slice, r.y, r.x);
    }
    s
}

/// Whole-slice network input and residual target, normalized.
#[derive(Clone, Debug)]
pub struct TrainingSlice {
    pub patient: usize,
    pub slice: usize,
    /// (1, C, H, W)
    pub input: Tensor<f32>,
    /// (1, 1, H, W)
    pub target: Tensor<f32>,
}

impl TrainingSlice {
    pub fn new(patient: usize, slice: usize, input: Tensor<f32>, target: Tensor<f32>) -> Result<Self> {
        check_slice_pair(&input, &target)?;
        Ok(Self {
            patient,
            slice,
            input,
            target,
        })
    }
}

/// Samples `per_slice` patch locations from every slice, in slice order.
pub fn sample_patch_stream<R: Rng + ?Sized>(
    slices: &[TrainingSlice],
    per_slice: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<PatchRef>> {
    let mut refs = Vec::with_capacity(slices.len() * per_slice);
    for (source, s) in slices.iter().enumerate() {
        for (y, x) in sample_patch_corners(s.input.height(), s.input.width(), per_slice, size, rng)? {
            refs.push(PatchRef {
                source,
                patient: s.patient,
                slice: s.slice,
                y,
                x,
            });
        }
    }
    Ok(refs)
}

/// Cycles a patch stream in order, cropping fixed-size minibatches lazily.
/// A cycle's trailing partial batch is completed from the start of the next.
pub struct MinibatchIter<'a> {
    slices: &'a [TrainingSlice],
    refs: Vec<PatchRef>,
    patch: usize,
    minibatch: usize,
    cursor: usize,
}

impl<'a> MinibatchIter<'a> {
    pub fn new(slices: &'a [TrainingSlice], refs: Vec<PatchRef>, patch: usize, minibatch: usize) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::param("patch stream is empty"));
        }
        if minibatch == 0 {
            return Err(Error::param("minibatch must be at least 1"));
        }
        let channels = slices.first().map(|s| s.input.channels()).unwrap_or(0);
        for r in &refs {
            let s = slices
                .get(r.source)
                .ok_or_else(|| Error::param(format!("patch source {} out of range", r.source)))?;
            if s.input.channels() != channels {
                return Err(Error::shape("training slices disagree on channel count"));
            }
            if r.y + patch > s.input.height() || r.x + patch > s.input.width() {
                return Err(Error::param("patch reference exceeds its slice"));
            }
        }
        Ok(Self {
            slices,
            refs,
            patch,
            minibatch,
            cursor: 0,
        })
    }

    /// Stream positions of the next batch, advancing the cursor.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.refs.len();
        let out = (0..self.minibatch).map(|i| (self.cursor + i) % n).collect();
        self.cursor = (self.cursor + self.minibatch) % n;
        out
    }

    pub fn refs(&self) -> &[PatchRef] {
        &self.refs
    }
}

impl BatchSource for MinibatchIter<'_> {
    fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = self.patch;
        let channels = self.slices[self.refs[0].source].input.channels();
        let mut inputs = Tensor::zeros([self.minibatch, channels, p, p]);
        let mut targets = Tensor::zeros([self.minibatch, 1, p, p]);
        for (b, idx) in self.next_indices().into_iter().enumerate() {
            let r = self.refs[idx];
            let s = &self.slices[r.source];
            s.input.crop_into(0, r.y, r.x, p, p, inputs.item_mut(b));
            s.target.crop_into(0, r.y, r.x, p, p, targets.item_mut(b));
        }
        Ok((inputs, targets))
    }
}

/// Top-left positions along one axis at `stride`, with the last window
/// clamped to touch the far border.
pub fn grid_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent < patch || stride == 0 {
        return Vec::new();
    }
    let mut pos: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if *pos.last().unwrap() + patch < extent {
        pos.push(extent - patch);
    }
    pos
}

/// All `patch x patch` windows of a (1, C, H, W) slice on the clamped stride
/// grid, as a (N, C, patch, patch) tensor plus their corners in row-major
/// order.
pub fn mlp_extract(
    slice: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<(Tensor<f32>, Vec<(usize, usize)>)> {
    if slice.batch() != 1 {
        return Err(Error::shape("mlp_extract takes a single slice"));
    }
    if slice.height() < patch || slice.width() < patch {
        return Err(Error::param(format!(
            "slice {}x{} is smaller than the {patch}x{patch} patch",
            slice.height(),
            slice.width()
        )));
    }
    if stride == 0 {
        return Err(Error::param("stride must be at least 1"));
    }
    let rows = grid_positions(slice.height(), patch, stride);
    let cols = grid_positions(slice.width(), patch, stride);
    let corners: Vec<(usize, usize)> = rows.iter().flat_map(|&y| cols.iter().map(move |&x| (y, x))).collect();
    let mut out = Tensor::zeros([corners.len(), slice.channels(), patch, patch]);
    for (b, &(y, x)) in corners.iter().enumerate() {
        slice.crop_into(0, y, x, patch, patch, out.item_mut(b));
    }
    Ok((out, corners))
}

/// Isotropic Gaussian weights over a `patch x patch` window centred on it.
pub fn gaussian_window(patch: usize, sigma: f64) -> Vec<f64> {
    let c = (patch as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(patch * patch);
    for i in 0..patch {
        for j in 0..patch {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    w
}

/// Gaussian-weighted average of overlapping patch predictions. `predictions`
/// is (N, 1, p, p) with N matching `corners`.
pub fn mlp_aggregate(
    predictions: &Tensor<f32>,
    corners: &[(usize, usize)],
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    let p = predictions.height();
    if predictions.batch() != corners.len() || predictions.channels() != 1 || predictions.width() != p {
        return Err(Error::shape(format!(
            "expected ({}, 1, p, p) predictions, got {:?}",
            corners.len(),
            predictions.shape()
        )));
    }
    let weights = gaussian_window(p, p as f64 / 3.0);
    let mut acc = vec![0.0f64; height * width];
    let mut mass = vec![0.0f64; height * width];
    for (b, &(y, x)) in corners.iter().enumerate() {
        if y + p > height || x + p > width {
            return Err(Error::param(format!("patch at ({y}, {x}) exceeds the slice")));
        }
        let item = predictions.item(b);
        for i in 0..p {
            for j in 0..p {
                let k = (y + i) * width + x + j;
                let w = weights[i * p + j];
                acc[k] += w * item[i * p + j] as f64;
                mass[k] += w;
            }
        }
    }
    if let Some(k) = mass.iter().position(|&m| m <= 0.0) {
        return Err(Error::Contract(format!(
            "pixel ({}, {}) is not covered by any patch",
            k / width,
            k % width
        )));
    }
    Tensor::new(
        [1, 1, height, width],
        acc.iter().zip(&mass).map(|(a, m)| (a / m) as f32).collect(),
    )
}
