use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use ctcascade::cascade::{denoise_chain, load_chain, save_chain, CascadeConfig, CascadeTrainRecord};
use ctcascade::ctsim::{generate_dataset, SimConfig};
use ctcascade::data::{Dataset, Split};
use ctcascade::gradcheck::{run_suite, Primitive, SuiteRow};
use ctcascade::metrics::{blend, evaluate_chain, export_png};
use ctcascade::models::{ModelKind, NetworkSpec};
use ctcascade::optim::TrainConfig;
use ctcascade::Tensor;

use crate::config::{
    DenoiseArgs, EvaluateArgs, FileConfig, GradcheckArgs, Preset, SimulateArgs, SplitArg, TrainArgs,
};

pub const CHAIN_DIR: &str = "chain";
pub const TRAIN_RECORDS_FILE: &str = "train_records.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.json";

fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| anyhow!("missing value for {name}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(args: &SimulateArgs, preset: Preset, threads: usize) -> Result<()> {
    let out = required(&args.out, "out")?;
    FileConfig {
        threads: Some(threads),
        preset: Some(preset),
        simulate: Some(args.clone()),
        ..Default::default()
    }
    .write_to(&out)?;

    let config = SimConfig {
        n_patients: required(&args.patients, "patients")?,
        n_train: required(&args.train, "train")?,
        slices_per_patient: required(&args.slices, "slices")?,
        size: required(&args.size, "size")?,
        fov_mm: required(&args.fov_mm, "fov_mm")?,
        dose_fraction: required(&args.dose, "dose")?,
        incident_photons: required(&args.photons, "photons")?,
        n_angles: required(&args.angles, "angles")?,
        seed: required(&args.seed, "seed")?,
        ..SimConfig::default()
    };
    config.validate()?;
    info!(
        "simulating {} patients x {} slices at {}x{}, dose {}",
        config.n_patients, config.slices_per_patient, config.size, config.size, config.dose_fraction
    );
    let dataset = generate_dataset(&config)?;
    dataset.save(&out)?;
    info!(
        "wrote {} ({} train, {} test slices)",
        Dataset::manifest_path(&out).display(),
        dataset.count(Split::Train),
        dataset.count(Split::Test)
    );
    Ok(())
}

fn cascade_config(args: &TrainArgs) -> Result<CascadeConfig> {
    let kind: ModelKind = required(&args.model, "model")?.into();
    let spec = match kind {
        ModelKind::Dncnn => NetworkSpec::dncnn(required(&args.depth, "depth")?, 1)
            .with_features(required(&args.features, "features")?),
        ModelKind::Mlp => NetworkSpec {
            patch: required(&args.patch_size, "patch_size")?,
            ..NetworkSpec::mlp(1)
        },
    };
    let train = TrainConfig {
        learning_rate: required(&args.lr, "lr")?,
        weight_penalty: required(&args.weight_penalty, "weight_penalty")?,
        minibatch: required(&args.minibatch, "minibatch")?,
        total_iterations: required(&args.iters, "iters")?,
        log_every: required(&args.log_every, "log_every")?,
        ..TrainConfig::default()
    };
    let mut config = CascadeConfig::new(required(&args.cascades, "cascades")?, spec, train, required(&args.seed, "seed")?);
    config.policy = required(&args.stacking, "stacking")?.into();
    config.patch_size = required(&args.patch_size, "patch_size")?;
    config.patches_per_slice = required(&args.patches_per_slice, "patches_per_slice")?;
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs, preset: Preset, threads: usize) -> Result<()> {
    let out = required(&args.out, "out")?;
    FileConfig {
        threads: Some(threads),
        preset: Some(preset),
        train: Some(args.clone()),
        ..Default::default()
    }
    .write_to(&out)?;

    let config = cascade_config(args)?;
    let data = required(&args.data, "data")?;
    let dataset = Dataset::load(&data).with_context(|| format!("loading dataset from {}", data.display()))?;
    let chain_dir = out.join(CHAIN_DIR);
    let mut records: Vec<CascadeTrainRecord> = Vec::new();
    train_with_checkpoints(&dataset, &config, &out, &chain_dir, &mut records)?;
    info!("trained {} cascades into {}", records.len(), chain_dir.display());
    Ok(())
}

/// Saves the chain, loss trace and timing records after every stage, so an
/// interrupted run keeps its finished cascades.
fn train_with_checkpoints(
    dataset: &Dataset,
    config: &CascadeConfig,
    out: &Path,
    chain_dir: &Path,
    records: &mut Vec<CascadeTrainRecord>,
) -> Result<()> {
    ctcascade::cascade::train_cascade(dataset, config, |chain, record| {
        save_chain(chain, chain_dir)?;
        let trace = out.join(format!("loss_cascade_{:02}.csv", record.cascade_index));
        fs::write(&trace, record.loss_trace.to_csv()).map_err(|e| ctcascade::Error::Io {
            path: trace.clone(),
            source: e,
        })?;
        records.push(record.clone());
        // wall-clock times vary run to run, so they live outside the chain
        let text = serde_json::to_string_pretty(&*records).map_err(|e| ctcascade::Error::Json {
            path: out.join(TRAIN_RECORDS_FILE),
            source: e,
        })?;
        let path = out.join(TRAIN_RECORDS_FILE);
        fs::write(&path, text + "\n").map_err(|e| ctcascade::Error::Io { path, source: e })?;
        info!(
            "cascade {} done in {:.1}s, final loss {:?}",
            record.cascade_index,
            record.wall_clock_seconds,
            record.loss_trace.points.last().map(|p| p.1)
        );
        Ok(())
    })?;
    Ok(())
}

struct DenoiseJob {
    /// Output path prefix; suffixes name the variants.
    prefix: PathBuf,
    low: Tensor<f32>,
}

fn write_slice(path: PathBuf, image: &Tensor<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    image.write_ten(&path)?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

pub fn denoise(args: &DenoiseArgs, threads: usize) -> Result<()> {
    let out = required(&args.out, "out")?;
    FileConfig {
        threads: Some(threads),
        denoise: Some(args.clone()),
        ..Default::default()
    }
    .write_to(&out)?;
    if let Some(alpha) = args.blend {
        if !(0.0..=1.0).contains(&alpha) {
            bail!("--blend {alpha} must lie in [0, 1]");
        }
    }

    let chain_dir = required(&args.chain, "chain")?;
    let chain = load_chain(&chain_dir).with_context(|| format!("loading chain from {}", chain_dir.display()))?;
    let inputs = args.inputs.clone().unwrap_or_default();
    let jobs: Vec<DenoiseJob> = if inputs.is_empty() {
        let data = required(&args.data, "data")?;
        let dataset = Dataset::load(&data).with_context(|| format!("loading dataset from {}", data.display()))?;
        let split = required(&args.split, "split")?;
        let wanted = |s: Split| split == SplitArg::All || (s == Split::Train) == (split == SplitArg::Train);
        let mut jobs = Vec::new();
        for (p, patient) in dataset.manifest.patients.iter().enumerate() {
            if !wanted(patient.split) {
                continue;
            }
            for (s, pair) in dataset.slices[p].iter().enumerate() {
                jobs.push(DenoiseJob {
                    prefix: out.join(&patient.id).join(format!("s{s:03}")),
                    low: pair.low.clone(),
                });
            }
        }
        jobs
    } else {
        inputs
            .iter()
            .map(|path| {
                let stem = path.file_stem().ok_or_else(|| anyhow!("input {} has no file name", path.display()))?;
                Ok(DenoiseJob {
                    prefix: out.join(stem),
                    low: Tensor::read_ten(path)?,
                })
            })
            .collect::<Result<_>>()?
    };
    if jobs.is_empty() {
        bail!("nothing to denoise");
    }

    let emit = args.emit_intermediates.unwrap_or(false);
    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let (denoised, intermediates) = denoise_chain(&chain, &job.low)
            .with_context(|| format!("denoising {}", job.prefix.display()))?;
        write_slice(with_suffix(&job.prefix, "_denoised.ten"), &denoised)?;
        if emit {
            for (k, image) in intermediates.iter().enumerate() {
                write_slice(with_suffix(&job.prefix, &format!("_cascade_{:02}.ten", k + 1)), image)?;
            }
        }
        if let Some(alpha) = args.blend {
            write_slice(with_suffix(&job.prefix, "_blend.ten"), &blend(&denoised, &job.low, alpha)?)?;
        }
        Ok(())
    })?;
    info!("denoised {} slices into {}", jobs.len(), out.display());
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, threads: usize) -> Result<()> {
    let out = required(&args.out, "out")?;
    FileConfig {
        threads: Some(threads),
        evaluate: Some(args.clone()),
        ..Default::default()
    }
    .write_to(&out)?;

    let chain_dir = required(&args.chain, "chain")?;
    let chain = load_chain(&chain_dir).with_context(|| format!("loading chain from {}", chain_dir.display()))?;
    let data = required(&args.data, "data")?;
    let dataset = Dataset::load(&data).with_context(|| format!("loading dataset from {}", data.display()))?;
    let alpha = required(&args.alpha, "alpha")?;
    let png = args.png.unwrap_or(false);
    let (evaluation, outputs) = evaluate_chain(&chain, &dataset, alpha, png)?;

    let csv = out.join(EVAL_CSV);
    fs::write(&csv, evaluation.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_json(&out.join(EVAL_SUMMARY), &evaluation)?;
    info!(
        "low-dose input: PSNR {:.3} dB, SSIM {:.4}",
        evaluation.baseline.psnr_db, evaluation.baseline.ssim
    );
    for (o, b) in evaluation.original.rows.iter().zip(&evaluation.blended.rows) {
        info!(
            "cascade {}: PSNR {:.3} dB, SSIM {:.4}; blended PSNR {:.3} dB, SSIM {:.4}",
            o.cascade, o.psnr_db, o.ssim, b.psnr_db, b.ssim
        );
    }

    if png {
        let dir = out.join("png");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for o in outputs.iter().take(required(&args.png_slices, "png_slices")?) {
            let id = &dataset.manifest.patients[o.patient].id;
            let stem = format!("{id}_s{:03}", o.slice);
            let pair = &dataset.slices[o.patient][o.slice];
            export_png(&pair.low, &dir.join(format!("{stem}_low.png")))?;
            export_png(&pair.normal, &dir.join(format!("{stem}_normal.png")))?;
            for (k, (d, b)) in o.intermediates.iter().zip(&o.blended).enumerate() {
                export_png(d, &dir.join(format!("{stem}_cascade_{:02}.png", k + 1)))?;
                export_png(b, &dir.join(format!("{stem}_cascade_{:02}_blend.png", k + 1)))?;
            }
        }
    }
    Ok(())
}

pub fn gradcheck_rows(args: &GradcheckArgs) -> Result<Vec<SuiteRow>> {
    let seeds: Vec<u64> = (0..required(&args.seeds, "seeds")?).collect();
    let corrupt = args.corrupt.as_deref().map(str::parse::<Primitive>).transpose()?;
    Ok(run_suite(&seeds, required(&args.tolerance, "tolerance")?, corrupt))
}

/// Runs the suite and prints one line per primitive. Returns whether every
/// primitive passed.
pub fn gradcheck(args: &GradcheckArgs, threads: usize) -> Result<bool> {
    if let Some(out) = &args.out {
        FileConfig {
            threads: Some(threads),
            gradcheck: Some(args.clone()),
            ..Default::default()
        }
        .write_to(out)?;
    }
    let rows = gradcheck_rows(args)?;
    let mut csv = String::from("primitive,seeds,max_rel_error,checked,excluded,passed\n");
    println!("{:<10} {:>14} {:>8} {:>8}  result", "primitive", "max rel error", "checked", "excluded");
    for r in &rows {
        println!(
            "{:<10} {:>14.3e} {:>8} {:>8}  {}",
            r.primitive.to_string(),
            r.max_rel_error,
            r.checked,
            r.excluded,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if let Some(d) = &r.diagnostic {
            println!("           {d}");
        }
        csv.push_str(&format!(
            "{},{},{:e},{},{},{}\n",
            r.primitive, r.seeds, r.max_rel_error, r.checked, r.excluded, r.passed
        ));
    }
    if let Some(out) = &args.out {
        let path = out.join("gradcheck.csv");
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(rows.iter().all(|r| r.passed))
}
