//! Cascaded training: each stage is trained on the whole-image outputs of
//! the stages before it, stacked with the original low-dose image.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    denormalize, mlp_aggregate, mlp_extract, normalize, sample_patch_stream, shuffle_within_patient,
    Dataset, MinibatchIter, PatchRef, Split, TrainingSlice, CNN_PATCH, CNN_PATCHES_PER_SLICE,
    MLP_PATCHES_PER_SLICE, MLP_STRIDE,
};
use crate::error::{Error, Result};
use crate::models::{build_network, read_json, write_json, ModelKind, Network, NetworkSpec};
use crate::optim::{training_loop, LossTrace, TrainConfig};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub const CHAIN_VERSION: u32 = 1;

/// How the input of stage k >= 2 is assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingPolicy {
    /// [x_L, latest intermediate]: two channels for every k >= 2.
    #[default]
    LatestIntermediate,
    /// [x_L, x_D^(1), ..., x_D^(k-1)]: k channels at stage k.
    AllIntermediates,
}

impl StackingPolicy {
    pub fn in_channels(self, k: usize) -> usize {
        match (self, k) {
            (_, 1) => 1,
            (StackingPolicy::LatestIntermediate, _) => 2,
            (StackingPolicy::AllIntermediates, k) => k,
        }
    }

    /// Network input for stage `k` (1-based) given x_L and the intermediates
    /// x_D^(1)..x_D^(k-1) produced so far.
    pub fn stack(self, low: &Tensor<f32>, intermediates: &[Tensor<f32>], k: usize) -> Result<Tensor<f32>> {
        if k == 0 {
            return Err(Error::param("cascade indices start at 1"));
        }
        if intermediates.len() < k - 1 {
            return Err(Error::param(format!(
                "stage {k} needs {} intermediates, got {}",
                k - 1,
                intermediates.len()
            )));
        }
        let mut parts = vec![low];
        match self {
            StackingPolicy::LatestIntermediate if k >= 2 => parts.push(&intermediates[k - 2]),
            StackingPolicy::AllIntermediates => parts.extend(&intermediates[..k - 1]),
            _ => {}
        }
        Tensor::stack_channels(&parts)
    }
}

/// Input of stage `k` under the default policy: x_L alone for k = 1,
/// [x_L, x_D^(k-1)] afterwards.
pub fn make_cascade_input(low: &Tensor<f32>, previous: Option<&Tensor<f32>>, k: usize) -> Result<Tensor<f32>> {
    match (k, previous) {
        (0, _) => Err(Error::param("cascade indices start at 1")),
        (1, None) => Ok(low.clone()),
        (1, Some(_)) => Err(Error::param("stage 1 takes no intermediate")),
        (_, None) => Err(Error::param(format!("stage {k} needs the previous intermediate"))),
        (_, Some(prev)) => Tensor::stack_channels(&[low, prev]),
    }
}

/// Everything that determined how one stage was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeProvenance {
    pub cascade: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub patch_size: usize,
    pub patches_per_slice: usize,
    pub training_slices: usize,
    /// SHA-256 of the whole-image training inputs x_D^(k-1) (normalized).
    pub denoised_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrainRecord {
    pub cascade_index: usize,
    pub loss_trace: LossTrace,
    pub denoised_checksum: String,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct CascadeChain {
    pub networks: Vec<Network<f32>>,
    pub policy: StackingPolicy,
    pub provenance: Vec<CascadeProvenance>,
}

impl CascadeChain {
    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    /// The first `k` stages.
    pub fn prefix(&self, k: usize) -> Self {
        Self {
            networks: self.networks[..k].to_vec(),
            policy: self.policy,
            provenance: self.provenance[..k.min(self.provenance.len())].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.networks.first() else {
            return Ok(());
        };
        for (i, net) in self.networks.iter().enumerate() {
            let want = self.policy.in_channels(i + 1);
            if net.spec.in_channels != want {
                return Err(Error::Configuration(format!(
                    "stage {} takes {} channels, expected {want}",
                    i + 1,
                    net.spec.in_channels
                )));
            }
            if net.spec.kind != first.spec.kind || net.spec.depth_modules != first.spec.depth_modules {
                return Err(Error::Configuration("cascade stages must share kind and depth".into()));
            }
        }
        Ok(())
    }
}

/// Settings shared by every stage of a cascade run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub cascades: usize,
    /// Architecture of stage 1; later stages differ only in input channels.
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub policy: StackingPolicy,
    pub patches_per_slice: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl CascadeConfig {
    /// Paper patch sampling for the given architecture: 150 40x40 patches per
    /// slice for the CNN, 500 13x13 patches for the MLP.
    pub fn new(cascades: usize, spec: NetworkSpec, train: TrainConfig, seed: u64) -> Self {
        let (patch_size, patches_per_slice) = match spec.kind {
            ModelKind::Dncnn => (CNN_PATCH, CNN_PATCHES_PER_SLICE),
            ModelKind::Mlp => (spec.patch, MLP_PATCHES_PER_SLICE),
        };
        Self {
            cascades,
            spec,
            train,
            policy: StackingPolicy::default(),
            patches_per_slice,
            patch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cascades == 0 {
            return Err(Error::param("at least one cascade is required"));
        }
        if self.patches_per_slice == 0 || self.patch_size == 0 {
            return Err(Error::param("patch count and size must be positive"));
        }
        if self.spec.kind == ModelKind::Mlp && self.patch_size != self.spec.patch {
            return Err(Error::param("mlp patch size must match the network"));
        }
        self.spec.validate()?;
        self.train.validate()
    }

    pub fn stage_spec(&self, k: usize) -> NetworkSpec {
        self.spec.clone().with_in_channels(self.policy.in_channels(k))
    }
}

/// Denoised image after one stage. Residual networks predict what to remove
/// from the latest image; direct networks (the MLP) predict the image.
/// All tensors are normalized, shaped (1, C, H, W).
pub fn apply_stage(
    network: &Network<f32>,
    policy: StackingPolicy,
    low: &Tensor<f32>,
    intermediates: &[Tensor<f32>],
    k: usize,
) -> Result<Tensor<f32>> {
    let input = policy.stack(low, intermediates, k)?;
    let prediction = match network.spec.kind {
        ModelKind::Dncnn => network.infer(&input)?,
        ModelKind::Mlp => {
            let (patches, corners) = mlp_extract(&input, network.spec.patch, MLP_STRIDE)?;
            let predicted = network.infer(&patches)?;
            mlp_aggregate(&predicted, &corners, input.height(), input.width())?
        }
    };
    if network.spec.residual {
        intermediates.last().unwrap_or(low).sub(&prediction)
    } else {
        Ok(prediction)
    }
}

/// Runs the chain on one low-dose slice in HU, returning the final output
/// and every intermediate x_D^(1)..x_D^(K), all in HU.
pub fn denoise_chain(chain: &CascadeChain, low_hu: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    if chain.is_empty() {
        return Err(Error::param("cannot denoise with an empty chain"));
    }
    if !low_hu.is_finite() {
        return Err(Error::NonFinite("low-dose input".into()));
    }
    let low = normalize(low_hu);
    let mut intermediates: Vec<Tensor<f32>> = Vec::with_capacity(chain.len());
    for (i, net) in chain.networks.iter().enumerate() {
        let next = apply_stage(net, chain.policy, &low, &intermediates, i + 1)?;
        intermediates.push(next);
    }
    let hu: Vec<Tensor<f32>> = intermediates.iter().map(denormalize).collect();
    Ok((hu.last().cloned().unwrap(), hu))
}

fn checksum(images: &[Tensor<f32>]) -> String {
    let mut hasher = Sha256::new();
    for t in images {
        hasher.update(t.to_ten_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Whole-slice training state: x_L, x_H and the intermediates so far, all
/// normalized.
struct SliceState {
    patient: usize,
    slice: usize,
    low: Tensor<f32>,
    normal: Tensor<f32>,
    intermediates: Vec<Tensor<f32>>,
}

/// Trains `config.cascades` stages in sequence on the training split.
/// `on_stage` sees each finished stage and its record, e.g. to checkpoint.
pub fn train_cascade(
    dataset: &Dataset,
    config: &CascadeConfig,
    mut on_stage: impl FnMut(&CascadeChain, &CascadeTrainRecord) -> Result<()>,
) -> Result<(CascadeChain, Vec<CascadeTrainRecord>)> {
    config.validate()?;
    let mut states: Vec<SliceState> = dataset
        .pairs(Split::Train)
        .map(|(patient, slice, pair)| SliceState {
            patient,
            slice,
            low: normalize(&pair.low),
            normal: normalize(&pair.normal),
            intermediates: Vec::new(),
        })
        .collect();
    if states.is_empty() {
        return Err(Error::param("dataset has no training slices"));
    }

    let mut chain = CascadeChain {
        networks: Vec::with_capacity(config.cascades),
        policy: config.policy,
        provenance: Vec::with_capacity(config.cascades),
    };
    let mut records = Vec::with_capacity(config.cascades);
    for k in 1..=config.cascades {
        let started = Instant::now();
        let spec = config.stage_spec(k);
        let current: Vec<Tensor<f32>> = states
            .iter()
            .map(|s| s.intermediates.last().unwrap_or(&s.low).clone())
            .collect();
        let denoised_checksum = checksum(&current);

        let slices: Vec<TrainingSlice> = states
            .iter()
            .zip(&current)
            .map(|(s, cur)| {
                let input = config.policy.stack(&s.low, &s.intermediates, k)?;
                let target = if spec.residual { cur.sub(&s.normal)? } else { s.normal.clone() };
                TrainingSlice::new(s.patient, s.slice, input, target)
            })
            .collect::<Result<_>>()?;
        drop(current);

        let mut rng = rng_for(config.seed, &[k as u64, 1]);
        let mut refs = sample_patch_stream(&slices, config.patches_per_slice, config.patch_size, &mut rng)?;
        shuffle_within_patient(&mut refs, |r: &PatchRef| r.patient, &mut rng);
        let mut batches = MinibatchIter::new(&slices, refs, config.patch_size, config.train.minibatch)?;

        let init_seed = derive_seed(config.seed, &[k as u64, 0]);
        let mut network = build_network::<f32>(&spec, init_seed)?;
        let train = TrainConfig {
            seed: config.seed,
            ..config.train.clone()
        };
        log::info!(
            "cascade {k}: {} slices, {} patches, {} iterations",
            slices.len(),
            batches.refs().len(),
            train.total_iterations
        );
        let loss_trace = training_loop(&mut network, &mut batches, &train)?;
        drop(batches);
        drop(slices);

        // whole-image denoising of the training set for the next stage
        let policy = config.policy;
        let next: Vec<Tensor<f32>> = states
            .par_iter()
            .map(|s| apply_stage(&network, policy, &s.low, &s.intermediates, k))
            .collect::<Result<_>>()?;
        for (s, img) in states.iter_mut().zip(next) {
            match policy {
                StackingPolicy::LatestIntermediate => {
                    // only the latest intermediate is ever read again
                    s.intermediates.clear();
                    s.intermediates.resize(k - 1, Tensor::zeros([0, 0, 0, 0]));
                    s.intermediates.push(img);
                }
                StackingPolicy::AllIntermediates => s.intermediates.push(img),
            }
        }

        chain.provenance.push(CascadeProvenance {
            cascade: k,
            seed: config.seed,
            init_seed,
            spec,
            train,
            patch_size: config.patch_size,
            patches_per_slice: config.patches_per_slice,
            training_slices: states.len(),
            denoised_checksum: denoised_checksum.clone(),
        });
        chain.networks.push(network);
        let record = CascadeTrainRecord {
            cascade_index: k,
            loss_trace,
            denoised_checksum,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        on_stage(&chain, &record)?;
        records.push(record);
    }
    Ok((chain, records))
}

#[derive(Serialize, Deserialize)]
struct ChainManifest {
    format_version: u32,
    cascades: usize,
    policy: StackingPolicy,
    provenance: Vec<CascadeProvenance>,
    networks: Vec<String>,
}

fn stage_dir(k: usize) -> String {
    format!("cascade_{k:02}")
}

/// Writes `chain.json` and one checkpoint directory per stage.
pub fn save_chain(chain: &CascadeChain, dir: &Path) -> Result<()> {
    chain.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut networks = Vec::with_capacity(chain.len());
    for (i, net) in chain.networks.iter().enumerate() {
        let name = stage_dir(i + 1);
        net.save(&dir.join(&name))?;
        networks.push(name);
    }
    write_json(
        &dir.join("chain.json"),
        &ChainManifest {
            format_version: CHAIN_VERSION,
            cascades: chain.len(),
            policy: chain.policy,
            provenance: chain.provenance.clone(),
            networks,
        },
    )
}

pub fn load_chain(dir: &Path) -> Result<CascadeChain> {
    let manifest: ChainManifest = read_json(&dir.join("chain.json"))?;
    if manifest.format_version != CHAIN_VERSION {
        return Err(Error::format(
            dir.join("chain.json"),
            format!("chain version {} (expected {CHAIN_VERSION})", manifest.format_version),
        ));
    }
    if manifest.networks.len() != manifest.cascades {
        return Err(Error::format(dir.join("chain.json"), "stage count mismatch"));
    }
    let networks = manifest
        .networks
        .iter()
        .map(|name| Network::load(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let chain = CascadeChain {
        networks,
        policy: manifest.policy,
        provenance: manifest.provenance,
    };
    chain
        .validate()
        .map_err(|e| Error::format(dir.join("chain.json"), e.to_string()))?;
    Ok(chain)
}
