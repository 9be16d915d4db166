use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use latentgrade::diffusion::make_step_schedule;
use latentgrade::editing::Editor;
use latentgrade::grading::{continuous_grade, fit_calibration, ordinal_grade, Calibration, CalibrationMap};
use latentgrade::latentgeom::Probe;
use latentgrade::metrics::pca_2d;
use latentgrade::model::{load_checkpoint, save_checkpoint, train_dae, write_loss_curve, DaeCheckpoint, TrainOptions};
use latentgrade::synth::{
    generate_dataset, load_dataset, load_image, write_dataset, GeneratorConfig, Grade, ManifestRecord, Split,
    StoredDataset, INFO_FILE, MANIFEST_FILE,
};
use latentgrade::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::pipeline::{
    calibration_grade, detection_auc, encode_all, evaluate, probe_label, reconstruction_errors, select,
};

// Console output that tolerates a closed pipe (e.g. `| head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct SplitView<'a> {
    records: Vec<&'a ManifestRecord>,
    images: Vec<&'a [f32]>,
}

fn split(ds: &StoredDataset, which: Split) -> SplitView<'_> {
    let (records, images) = ds.split(which).map(|(r, img)| (r, img.as_slice())).unzip();
    SplitView { records, images }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.path("out")
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let exec = cfg.exec()?;
    let spec = cfg.dataset_spec()?;
    let dir = cfg.path("data_dir");
    let ds = generate_dataset(&spec, exec)?;
    write_dataset(&dir, &ds, cfg.get("raw")?, exec)?;
    say!("wrote {} images to {}", ds.records.len(), dir.display());
    say!("{:<6}{:>7}{:>7}{:>7}{:>7}{:>8}{:>7}", "split", "G0", "G1", "G2", "G3", "graded", "total");
    for s in Split::ALL {
        let rows: Vec<&ManifestRecord> = ds.records.iter().filter(|r| r.split == s).collect();
        let count = |g: Grade| rows.iter().filter(|r| r.grade == g).count();
        say!(
            "{:<6}{:>7}{:>7}{:>7}{:>7}{:>8}{:>7}",
            s.as_str(),
            count(Grade::G0),
            count(Grade::G1),
            count(Grade::G2),
            count(Grade::G3),
            rows.iter().filter(|r| r.graded).count(),
            rows.len()
        );
    }
    let fractured = ds.records.iter().filter(|r| r.fractured).count();
    say!(
        "fractured fraction {:.4}",
        fractured as f64 / ds.records.len().max(1) as f64
    );
    say!("manifest sha256 {}", sha256_file(&dir.join(MANIFEST_FILE))?);
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<StoredDataset> {
    let dir = cfg.path("data_dir");
    load_dataset(&dir, cfg.exec()?)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let exec = cfg.exec()?;
    let ds = load_data(cfg)?;
    let config = cfg.dae_config(ds.generator().image_size)?;
    let train: Vec<Vec<f32>> = ds.split(Split::Train).map(|(_, x)| x.clone()).collect();
    let val: Vec<Vec<f32>> = ds.split(Split::Val).map(|(_, x)| x.clone()).collect();
    let out = out_dir(cfg);
    let checkpoint_every: usize = cfg.get("checkpoint_every")?;
    let opts = TrainOptions {
        exec,
        checkpoint_dir: (checkpoint_every > 0).then(|| out.join("checkpoints")),
        checkpoint_every,
        val_limit: cfg.get("val_limit")?,
        eval_steps: cfg.get("eval_steps")?,
        log_every: cfg.get("log_every")?,
    };
    eprintln!(
        "training on {} images ({} parameters, {} samples, batch {})",
        train.len(),
        latentgrade::model::build_dae(config.clone(), config.seed)?.num_parameters(),
        config.total_samples,
        config.batch_size
    );
    let outcome = train_dae(&train, &val, &config, &opts)?;
    let ckpt_path = cfg.path("checkpoint");
    ensure_parent(&ckpt_path)?;
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let loss_path = out.join("loss.csv");
    ensure_parent(&loss_path)?;
    write_loss_curve(&loss_path, &outcome.losses)?;
    let p = &outcome.checkpoint.progress;
    say!("checkpoint {}", ckpt_path.display());
    say!("samples seen {} in {} steps", p.samples_seen, p.steps);
    if let Some(last) = outcome.losses.last() {
        say!("final batch loss {:.6}", last.1);
    }
    match p.final_val_mse {
        Some(m) => say!("held-out reconstruction mse {m:.6}"),
        None => say!("held-out reconstruction mse n/a (no validation images)"),
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<DaeCheckpoint> {
    load_checkpoint(&cfg.path("checkpoint"))
}

pub fn probe(cfg: &RunConfig) -> Result<()> {
    let exec = cfg.exec()?;
    let ckpt = load_model(cfg)?;
    let ds = load_data(cfg)?;
    let tr = split(&ds, Split::Train);
    let latents = encode_all(&ckpt.model, &tr.images, exec)?;
    let (zs, labels) = select(&tr.records, &latents, probe_label);
    let kind = cfg.probe_kind()?;
    let probe = Probe::fit(kind, &zs, &labels, &cfg.probe_config()?)?;
    let path = cfg.path("probe");
    ensure_parent(&path)?;
    probe.save(&path)?;

    let va = split(&ds, Split::Val);
    let val_auc = if va.records.is_empty() {
        None
    } else {
        let vz = encode_all(&ckpt.model, &va.images, exec)?;
        match detection_auc(&probe, &va.records, &vz) {
            Ok(v) => Some(v),
            Err(Error::DegenerateLabels) => None,
            Err(e) => return Err(e),
        }
    };
    let positives = labels.iter().filter(|&&l| l).count();
    say!("probe {kind} written to {}", path.display());
    say!("trained on {} latents ({positives} fractured, {} healthy)", labels.len(), labels.len() - positives);
    match val_auc {
        Some((auc, n)) => say!("validation AUC (G0 vs G2/G3) {auc:.4} on {n} images"),
        None => say!("validation AUC n/a (validation split lacks healthy or fractured images)"),
    }
    write_json(
        &out_dir(cfg).join("probe_report.json"),
        &json!({
            "probe_kind": kind.to_string(),
            "n_train": labels.len(),
            "n_fractured": positives,
            "training_hash": probe.hyperplane.training_hash,
            "val_auc": val_auc.map(|v| v.0),
            "n_val": val_auc.map(|v| v.1),
        }),
    )
}

pub fn calibrate(cfg: &RunConfig) -> Result<()> {
    let exec = cfg.exec()?;
    let ckpt = load_model(cfg)?;
    let probe = Probe::load(&cfg.path("probe"))?;
    let ds = load_data(cfg)?;
    let tr = split(&ds, Split::Train);
    let latents = encode_all(&ckpt.model, &tr.images, exec)?;
    let dists = latents.iter().map(|z| probe.distance(z)).collect::<Result<Vec<_>>>()?;
    let (ds_sel, grades) = select(&tr.records, &dists, calibration_grade);
    let kind = cfg.calibration_kind()?;
    let cal = fit_calibration(kind, &ds_sel, &grades, cfg.get("per_class_means")?)?;
    let path = cfg.path("calibration");
    ensure_parent(&path)?;
    cal.save(&path)?;
    say!("calibration {kind} written to {}", path.display());
    match &cal.map {
        CalibrationMap::TwoPointLinear { d0, d3 } => say!("mean distance G0 {d0:.4}, G3 {d3:.4}"),
        CalibrationMap::Polynomial { coeffs, .. } => say!("coefficients {coeffs:?}"),
    }
    say!("fitted range [{:.4}, {:.4}], monotone {}", cal.d_min, cal.d_max, cal.monotone);
    let counts: BTreeMap<String, usize> = grades.iter().fold(BTreeMap::new(), |mut m, g| {
        *m.entry(g.to_string()).or_insert(0) += 1;
        m
    });
    write_json(
        &out_dir(cfg).join("calibration_report.json"),
        &json!({
            "calibration_kind": kind.to_string(),
            "monotone": cal.monotone,
            "d_min": cal.d_min,
            "d_max": cal.d_max,
            "samples_per_grade": counts,
        }),
    )
}

fn load_input_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let (px, s) = load_image(path)?;
    if s != size {
        return Err(Error::ShapeMismatch {
            expected: format!("{size}x{size} image"),
            actual: format!("{s}x{s} in {}", path.display()),
        });
    }
    Ok(px)
}

pub fn grade(cfg: &RunConfig, images: &[PathBuf]) -> Result<()> {
    let exec = cfg.exec()?;
    let ckpt = load_model(cfg)?;
    let probe = Probe::load(&cfg.path("probe"))?;
    let cal = Calibration::load(&cfg.path("calibration"))?;
    let size = ckpt.model.config().image_size;
    let rows = exec.try_map(images, |path| -> Result<String> {
        let px = load_input_image(path, size)?;
        let d = probe.distance(ckpt.model.encode_semantic(&px)?.as_slice())?;
        let g = continuous_grade(d, &cal);
        let o = ordinal_grade(g)?;
        Ok(format!("{},{d:.6},{g:.6},{}\n", path.display(), o.index()))
    })?;
    let csv = std::iter::once("filename,distance,continuous_grade,ordinal_grade\n".to_string())
        .chain(rows)
        .collect::<String>();
    say_raw!("{csv}");
    write_text(&out_dir(cfg).join("grades.csv"), &csv)
}

fn oracle_config(cfg: &RunConfig, size: usize) -> GeneratorConfig {
    let info = cfg.path("data_dir").join(INFO_FILE);
    std::fs::read_to_string(info)
        .ok()
        .and_then(|t| serde_json::from_str::<latentgrade::synth::DatasetInfo>(&t).ok())
        .map(|i| i.spec.generator)
        .filter(|g| g.image_size == size)
        .unwrap_or_else(|| GeneratorConfig::with_size(size))
}

pub fn sweep(cfg: &RunConfig, image: &Path) -> Result<()> {
    let exec = cfg.exec()?;
    let ckpt = load_model(cfg)?;
    let probe = Probe::load(&cfg.path("probe"))?;
    let cal = Calibration::load(&cfg.path("calibration"))?;
    let model = &ckpt.model;
    let size = model.config().image_size;
    let t = model.config().schedule.timesteps;
    let editor = Editor {
        model,
        probe: &probe,
        calibration: Some(&cal),
        encode_steps: make_step_schedule(t, cfg.get("eval_steps")?)?,
        decode_steps: make_step_schedule(t, cfg.get("generation_steps")?)?,
    };
    let px = load_input_image(image, size)?;
    let sweep = editor.grade_sweep(&px, &cfg.sweep_grades()?, &oracle_config(cfg, size), exec)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let (png, csv) = sweep.write(&out_dir(cfg), stem)?;
    say_raw!("{}", sweep.csv());
    say!("strip {}", png.display());
    say!("table {}", csv.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let exec = cfg.exec()?;
    let ckpt = load_model(cfg)?;
    let probe = Probe::load(&cfg.path("probe"))?;
    let cal = Calibration::load(&cfg.path("calibration"))?;
    let ds = load_data(cfg)?;
    let te = split(&ds, Split::Test);
    if te.records.is_empty() {
        return Err(Error::EmptyInput("test split is empty".into()));
    }
    let latents = encode_all(&ckpt.model, &te.images, exec)?;
    let limit = te.images.len().min(cfg.get("val_limit")?);
    let recon = reconstruction_errors(&ckpt.model, &te.images[..limit], cfg.get("eval_steps")?, exec)?;
    let report = evaluate(&probe, &cal, &te.records, &latents, &recon)?;

    let out = out_dir(cfg);
    write_text(&out.join("eval_report.json"), &report.to_json()?)?;
    write_text(&out.join("eval_report.txt"), &report.to_text())?;
    let mut pca = String::from("filename,pc1,pc2,grade,compression\n");
    if latents.len() >= 2 {
        for ((r, p), _) in te.records.iter().zip(pca_2d(&latents)?).zip(&latents) {
            pca.push_str(&format!("{},{:.6},{:.6},{},{:.6}\n", r.filename, p[0], p[1], r.grade.index(), r.compression));
        }
    }
    write_text(&out.join("latent_pca.csv"), &pca)?;
    say_raw!("{}", report.to_text());
    say!("reports in {}", out.display());
    Ok(())
}
