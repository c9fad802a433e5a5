//! Command arguments, config-file merging and presets.
//!
//! Every flag also exists as a key in the matching section of the TOML
//! config file. Resolution order is flag, then file, then preset default.
//! The resolved arguments are written back out in the same file format, so
//! a run directory's `run_config.toml` can be passed to `--config` again.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use ctcascade::cascade::StackingPolicy;
use ctcascade::gradcheck::Primitive;
use ctcascade::models::ModelKind;

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "CTCASCADE_DATA";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64x64 slices, CNN3, two cascades of 2,000 iterations.
    #[default]
    Desk,
    /// 512x512 slices, CNN5, eight cascades of 90,000 iterations.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Cnn,
    Mlp,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Cnn => ModelKind::Dncnn,
            ModelArg::Mlp => ModelKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackingArg {
    /// Low-dose image plus the latest intermediate.
    Latest,
    /// Low-dose image plus every intermediate so far.
    All,
}

impl From<StackingArg> for StackingPolicy {
    fn from(s: StackingArg) -> Self {
        match s {
            StackingArg::Latest => StackingPolicy::LatestIntermediate,
            StackingArg::All => StackingPolicy::AllIntermediates,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

/// Fills each `None` field of `self` from `other`.
macro_rules! merge_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn or(self, other: Self) -> Self {
                Self { $($field: self.$field.or(other.$field)),* }
            }
        }
    };
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// Number of simulated patients.
    #[arg(long)]
    pub patients: Option<usize>,
    /// How many of the patients form the training split.
    #[arg(long)]
    pub train: Option<usize>,
    /// Slices per patient.
    #[arg(long)]
    pub slices: Option<usize>,
    /// Slice width and height in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Low-dose fraction of the normal dose, in (0, 1].
    #[arg(long)]
    pub dose: Option<f64>,
    /// Incident photons per detector bin at normal dose.
    #[arg(long)]
    pub photons: Option<f64>,
    /// Projection angles; 0 chooses from the slice size.
    #[arg(long)]
    pub angles: Option<usize>,
    /// Field of view in millimetres.
    #[arg(long)]
    pub fov_mm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_fields!(SimulateArgs { patients, train, slices, size, dose, photons, angles, fov_mm, seed, out });

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; the chain is saved under `<out>/chain`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Number of cascaded networks.
    #[arg(long)]
    pub cascades: Option<usize>,
    /// Middle Conv+BN+ReLU modules per CNN.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Feature channels per CNN layer.
    #[arg(long)]
    pub features: Option<usize>,
    /// Training iterations per cascade.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight penalty.
    #[arg(long)]
    pub weight_penalty: Option<f64>,
    /// Patches drawn per training slice at each cascade.
    #[arg(long)]
    pub patches_per_slice: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub stacking: Option<StackingArg>,
    /// Loss is logged every this many iterations.
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}
merge_fields!(TrainArgs {
    data,
    out,
    model,
    cascades,
    depth,
    features,
    iters,
    minibatch,
    lr,
    weight_penalty,
    patches_per_slice,
    patch_size,
    stacking,
    log_every,
    seed,
});

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseArgs {
    /// Chain directory written by `train`.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Dataset directory; used when no `--input` files are given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Single low-dose slices in HU (.ten files) to denoise instead of a dataset.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every cascade's output.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub emit_intermediates: Option<bool>,
    /// Also write alpha * denoised + (1 - alpha) * low-dose.
    #[arg(long)]
    pub blend: Option<f64>,
}
merge_fields!(DenoiseArgs { chain, data, split, inputs, out, emit_intermediates, blend });

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Denoised weight of the blended variant.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Export windowed grayscale PNGs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub png: Option<bool>,
    /// Number of test slices exported when `--png` is set.
    #[arg(long)]
    pub png_slices: Option<usize>,
}
merge_fields!(EvaluateArgs { chain, data, out, alpha, png, png_slices });

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Number of random seeds per primitive.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Maximum relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Scale one primitive's analytic gradient as a negative control
    /// (conv, bn, relu, tanh, linear, loss, cnn3).
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Directory for the run config and report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_fields!(GradcheckArgs { seeds, tolerance, corrupt, out });

/// Layout of the config file and of every written `run_config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise: Option<DenoiseArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckArgs>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes this config as `run_config.toml` inside `dir`, creating it.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = toml::to_string(self).context("serializing run config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Dataset directory used when neither flag nor file names one.
pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

impl SimulateArgs {
    pub fn resolve(self, preset: Preset) -> Self {
        let d = match preset {
            Preset::Desk => SimulateArgs {
                patients: Some(10),
                train: Some(7),
                slices: Some(40),
                size: Some(64),
                ..Default::default()
            },
            Preset::Paper => SimulateArgs {
                patients: Some(10),
                train: Some(7),
                slices: Some(562),
                size: Some(512),
                ..Default::default()
            },
        };
        let common = SimulateArgs {
            dose: Some(0.25),
            photons: Some(1e5),
            angles: Some(0),
            fov_mm: Some(360.0),
            seed: Some(1),
            out: Some(default_data_root()),
            ..Default::default()
        };
        self.or(d).or(common)
    }
}

impl TrainArgs {
    pub fn resolve(self, preset: Preset) -> Result<Self> {
        let model = self.model.unwrap_or(ModelArg::Cnn);
        let d = match (preset, model) {
            (Preset::Desk, ModelArg::Cnn) => TrainArgs {
                cascades: Some(2),
                depth: Some(3),
                features: Some(DESK_FEATURES),
                iters: Some(2_000),
                minibatch: Some(DESK_MINIBATCH),
                lr: Some(DESK_LEARNING_RATE),
                ..Default::default()
            },
            (Preset::Paper, ModelArg::Cnn) => TrainArgs {
                cascades: Some(8),
                depth: Some(5),
                features: Some(64),
                iters: Some(90_000),
                minibatch: Some(100),
                lr: Some(1e-4),
                ..Default::default()
            },
            (Preset::Desk, ModelArg::Mlp) => TrainArgs {
                cascades: Some(2),
                iters: Some(2_000),
                minibatch: Some(DESK_MINIBATCH),
                lr: Some(DESK_LEARNING_RATE),
                ..Default::default()
            },
            (Preset::Paper, ModelArg::Mlp) => TrainArgs {
                cascades: Some(4),
                iters: Some(900_000),
                minibatch: Some(100),
                lr: Some(1e-4),
                ..Default::default()
            },
        };
        let (patch, per_slice) = match (preset, model) {
            (Preset::Desk, ModelArg::Cnn) => (40, DESK_PATCHES_PER_SLICE),
            (Preset::Paper, ModelArg::Cnn) => (40, 150),
            (_, ModelArg::Mlp) => (13, 500),
        };
        let common = TrainArgs {
            data: Some(default_data_root()),
            out: Some(PathBuf::from("runs/train")),
            model: Some(model),
            // depth and width are fixed for the MLP; kept for completeness
            depth: Some(2),
            features: Some(0),
            weight_penalty: Some(1e-4),
            patches_per_slice: Some(per_slice),
            patch_size: Some(patch),
            stacking: Some(StackingArg::Latest),
            log_every: Some(50),
            seed: Some(7),
            ..Default::default()
        };
        let resolved = self.or(d).or(common);
        if resolved.cascades == Some(0) {
            bail!("--cascades must be at least 1");
        }
        Ok(resolved)
    }
}

/// Desk preset training hyperparameters, sized so two cascades of 2,000
/// iterations finish within minutes on one core.
pub const DESK_FEATURES: usize = 32;
pub const DESK_MINIBATCH: usize = 8;
pub const DESK_LEARNING_RATE: f64 = 1e-3;
/// About one pass over every training patient in 2,000 minibatches; the
/// patch stream is ordered patient by patient, so 150 per slice would only
/// ever reach the first few patients.
pub const DESK_PATCHES_PER_SLICE: usize = 50;

impl DenoiseArgs {
    pub fn resolve(self) -> Self {
        self.or(DenoiseArgs {
            chain: Some(PathBuf::from("runs/train/chain")),
            data: Some(default_data_root()),
            split: Some(SplitArg::Test),
            inputs: Some(Vec::new()),
            out: Some(PathBuf::from("runs/denoise")),
            emit_intermediates: Some(false),
            blend: None,
        })
    }
}

impl EvaluateArgs {
    pub fn resolve(self) -> Self {
        self.or(EvaluateArgs {
            chain: Some(PathBuf::from("runs/train/chain")),
            data: Some(default_data_root()),
            out: Some(PathBuf::from("runs/eval")),
            alpha: Some(ctcascade::metrics::DEFAULT_BLEND),
            png: Some(false),
            png_slices: Some(4),
        })
    }
}

impl GradcheckArgs {
    pub fn resolve(self) -> Result<Self> {
        let resolved = self.or(GradcheckArgs {
            seeds: Some(20),
            tolerance: Some(ctcascade::gradcheck::DEFAULT_TOLERANCE),
            corrupt: None,
            out: None,
        });
        if let Some(name) = &resolved.corrupt {
            name.parse::<Primitive>()?;
        }
        Ok(resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_preset() {
        let flags = TrainArgs {
            iters: Some(10),
            ..Default::default()
        };
        let file = TrainArgs {
            iters: Some(99),
            cascades: Some(3),
            ..Default::default()
        };
        let r = flags.or(file).resolve(Preset::Desk).unwrap();
        assert_eq!(r.iters, Some(10));
        assert_eq!(r.cascades, Some(3));
        assert_eq!(r.depth, Some(3));
    }

    #[test]
    fn mlp_defaults_use_small_patches() {
        let r = TrainArgs {
            model: Some(ModelArg::Mlp),
            ..Default::default()
        }
        .resolve(Preset::Paper)
        .unwrap();
        assert_eq!(r.patch_size, Some(13));
        assert_eq!(r.patches_per_slice, Some(500));
        assert_eq!(r.iters, Some(900_000));
    }

    #[test]
    fn written_config_parses_back() {
        let cfg = FileConfig {
            threads: Some(1),
            preset: Some(Preset::Desk),
            simulate: Some(SimulateArgs::default().resolve(Preset::Desk)),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepochs = 3\n").is_err());
    }

    #[test]
    fn unknown_corruption_target_is_rejected() {
        let args = GradcheckArgs {
            corrupt: Some("pool".into()),
            ..Default::default()
        };
        assert!(args.resolve().is_err());
    }
}
