//! Run configuration: built-in defaults, then an INI file, then `--key value`
//! flags. Keys are unique across sections, so a section header only groups
//! related keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use latentgrade::diffusion::ScheduleParams;
use latentgrade::grading::CalibrationKind;
use latentgrade::latentgeom::{LogisticConfig, ProbeConfig, ProbeKind, SvmConfig};
use latentgrade::model::{DaeConfig, LossKind};
use latentgrade::synth::{DatasetSpec, GeneratorConfig};
use latentgrade::{Error, Exec, Result};

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    /// Empty means "take the value from the selected preset".
    pub default: &'static str,
    pub help: &'static str,
    pub flag: bool,
}

const fn key(section: &'static str, key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        help,
        flag: false,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("paths", "data_dir", "data", "dataset directory"),
    key("paths", "checkpoint", "runs/model.daeckpt", "model checkpoint file"),
    key("paths", "probe", "runs/probe.json", "probe file"),
    key("paths", "calibration", "runs/calibration.json", "calibration file"),
    key("paths", "out", "runs", "directory for reports and other outputs"),
    key("run", "seed", "0", "seed for data generation and model initialization"),
    KeySpec {
        section: "run",
        key: "single_thread",
        default: "false",
        help: "run every stage on one thread",
        flag: true,
    },
    key("synth", "preset", "default", "dataset preset: default or paper-like"),
    key("synth", "n_train", "3000", "training images"),
    key("synth", "n_val", "200", "validation images"),
    key("synth", "n_test", "600", "test images"),
    key("synth", "image_size", "32", "image side length in pixels"),
    key("synth", "compressed_fraction", "", "probability that a sample is compressed"),
    key("synth", "graded_fraction", "", "fraction of compressed samples with a grade label"),
    key("synth", "noise_sigma", "", "pixel noise standard deviation"),
    key("synth", "raw", "true", "also write lossless .f32 images"),
    key("model", "model_preset", "desk", "model preset: desk, paper or tiny"),
    key("model", "latent_dim", "", "semantic latent dimension"),
    key("model", "base_width", "", "U-Net base channel count"),
    key("model", "channel_mult", "", "U-Net width multipliers, comma separated"),
    key("model", "encoder_mult", "", "encoder width multipliers, comma separated"),
    key("model", "encoder_strides", "", "encoder strides, comma separated"),
    key("model", "time_embed_dim", "", "time embedding width"),
    key("model", "max_groups", "", "maximum GroupNorm groups"),
    key("model", "loss", "", "training loss: mse or l1"),
    key("model", "learning_rate", "", "Adam learning rate"),
    key("model", "grad_clip", "", "global gradient norm clip; 0 disables"),
    key("model", "batch_size", "", "training batch size"),
    key("model", "total_samples", "", "training samples to draw"),
    key("model", "timesteps", "", "diffusion steps T"),
    key("model", "beta_start", "", "first noise variance"),
    key("model", "beta_end", "", "last noise variance"),
    key("train", "checkpoint_every", "0", "milestone interval in samples; 0 disables"),
    key("train", "val_limit", "32", "held-out images for reconstruction metrics"),
    key("train", "log_every", "50", "progress interval in optimizer steps; 0 is quiet"),
    key("steps", "eval_steps", "20", "DDIM steps for encoding and reconstruction"),
    key("steps", "generation_steps", "100", "DDIM steps for decoding edits"),
    key("probe", "probe_kind", "svm", "probe: linear or svm"),
    key("probe", "logistic_epochs", "500", "logistic probe epochs"),
    key("probe", "logistic_lr", "0.5", "logistic probe learning rate"),
    key("probe", "weight_decay", "0", "logistic probe L2 weight decay"),
    key("probe", "class_weighted", "false", "inverse-frequency class weights for the logistic probe"),
    key("probe", "svm_lambda", "0.01", "SVM regularization strength"),
    key("probe", "svm_epochs", "1000", "SVM subgradient epochs"),
    key("probe", "svm_lr", "0.5", "SVM initial step size"),
    key("calibrate", "calibration_kind", "two_point", "calibration: two_point, poly1 or poly3"),
    key("calibrate", "per_class_means", "false", "fit polynomials to class means instead of samples"),
    key("sweep", "grades", "-1,0,1,2,3,4", "target grades for sweeps, comma separated"),
];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Resolved `key -> value` table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn invalid(msg: String) -> Error {
    Error::InvalidConfig(msg)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.key, k.default.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = spec(key).ok_or_else(|| invalid(format!("unknown configuration key {key:?}")))?;
        self.values.insert(k.key, value.trim().to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let ini = Ini::load_from_file(path).map_err(|e| match e {
            ini::Error::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            ini::Error::Parse(p) => Error::Format {
                path: path.to_path_buf(),
                reason: p.to_string(),
            },
        })?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let s = spec(k).ok_or_else(|| invalid(format!("{}: unknown key {k:?}", path.display())))?;
                if let Some(sec) = section {
                    if sec != s.section {
                        return Err(invalid(format!(
                            "{}: key {k:?} belongs in section [{}], found in [{sec}]",
                            path.display(),
                            s.section
                        )));
                    }
                }
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::defaults();
        if let Some(p) = file {
            cfg.load_file(p)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| invalid(format!("{key} = {raw:?} is not a valid value")))
    }

    /// `None` when the key is left to its preset.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(None);
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| invalid(format!("{key} = {raw:?} is not a valid list")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn exec(&self) -> Result<Exec> {
        Ok(Exec::from_single_thread(self.get("single_thread")?))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let mut spec = DatasetSpec::preset(self.raw("preset"))?;
        spec.n_train = self.get("n_train")?;
        spec.n_val = self.get("n_val")?;
        spec.n_test = self.get("n_test")?;
        spec.seed = self.seed()?;
        spec.generator = GeneratorConfig::with_size(self.get("image_size")?);
        if let Some(v) = self.opt("compressed_fraction")? {
            spec.compressed_fraction = v;
        }
        if let Some(v) = self.opt("graded_fraction")? {
            spec.graded_fraction = v;
        }
        if let Some(v) = self.opt("noise_sigma")? {
            spec.generator.noise_sigma = v;
        }
        Ok(spec)
    }

    /// Model settings for images of `image_size`.
    pub fn dae_config(&self, image_size: usize) -> Result<DaeConfig> {
        let mut c = match self.raw("model_preset") {
            "desk" => DaeConfig::desk(),
            "paper" => DaeConfig::paper(),
            "tiny" => DaeConfig::tiny(),
            other => return Err(invalid(format!("unknown model preset {other:?}"))),
        };
        c.image_size = image_size;
        c.seed = self.seed()?;
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.opt(stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        apply!(latent_dim, base_width, time_embed_dim, max_groups, learning_rate, batch_size, total_samples);
        for (key, field) in [
            ("channel_mult", &mut c.channel_mult),
            ("encoder_mult", &mut c.encoder_mult),
            ("encoder_strides", &mut c.encoder_strides),
        ] {
            if let Some(v) = self.list(key)? {
                *field = v;
            }
        }
        if let Some(loss) = self.opt::<String>("loss")? {
            c.loss = match loss.as_str() {
                "mse" => LossKind::Mse,
                "l1" => LossKind::L1,
                other => return Err(invalid(format!("unknown loss {other:?}"))),
            };
        }
        if let Some(clip) = self.opt::<f64>("grad_clip")? {
            c.grad_clip = (clip > 0.0).then_some(clip);
        }
        let d = ScheduleParams::default();
        c.schedule = ScheduleParams {
            timesteps: self.opt("timesteps")?.unwrap_or(d.timesteps),
            beta_start: self.opt("beta_start")?.unwrap_or(d.beta_start),
            beta_end: self.opt("beta_end")?.unwrap_or(d.beta_end),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn probe_kind(&self) -> Result<ProbeKind> {
        self.raw("probe_kind").parse()
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            logistic: LogisticConfig {
                epochs: self.get("logistic_epochs")?,
                learning_rate: self.get("logistic_lr")?,
                weight_decay: self.get("weight_decay")?,
                class_weighted: self.get("class_weighted")?,
            },
            svm: SvmConfig {
                lambda: self.get("svm_lambda")?,
                epochs: self.get("svm_epochs")?,
                learning_rate: self.get("svm_lr")?,
            },
        })
    }

    pub fn calibration_kind(&self) -> Result<CalibrationKind> {
        self.raw("calibration_kind").parse()
    }

    pub fn sweep_grades(&self) -> Result<Vec<f64>> {
        self.list("grades")?
            .ok_or_else(|| invalid("grades must not be empty".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_unique() {
        let mut names: Vec<&str> = KEYS.iter().map(|k| k.key).collect();
        names.sort();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.ini");
        std::fs::write(&file, "[run]\nseed = 5\n\n[synth]\nn_train = 40\nn_val = 7\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &[("n_train".into(), "12".into())]).unwrap();
        assert_eq!(cfg.get::<usize>("n_train").unwrap(), 12);
        assert_eq!(cfg.get::<usize>("n_val").unwrap(), 7);
        assert_eq!(cfg.seed().unwrap(), 5);
        assert_eq!(cfg.get::<usize>("n_test").unwrap(), 600);
    }

    #[test]
    fn unknown_and_misplaced_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.ini");
        std::fs::write(&file, "[synth]\nbogus = 1\n").unwrap();
        assert_eq!(RunConfig::resolve(Some(&file), &[]).unwrap_err().code(), "invalid-config");
        std::fs::write(&file, "[model]\nn_train = 1\n").unwrap();
        assert_eq!(RunConfig::resolve(Some(&file), &[]).unwrap_err().code(), "invalid-config");
        let err = RunConfig::resolve(None, &[("nope".into(), "1".into())]).unwrap_err();
        assert_eq!(err.code(), "invalid-config");
    }

    #[test]
    fn presets_and_overrides_build_configs() {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("preset".into(), "paper-like".into()),
                ("base_width".into(), "8".into()),
                ("channel_mult".into(), "1,2,2".into()),
                ("grad_clip".into(), "0".into()),
            ],
        )
        .unwrap();
        let spec = cfg.dataset_spec().unwrap();
        assert!((spec.compressed_fraction - DatasetSpec::paper_like().compressed_fraction).abs() < 1e-15);
        let dae = cfg.dae_config(32).unwrap();
        assert_eq!(dae.base_width, 8);
        assert_eq!(dae.channel_mult, vec![1, 2, 2]);
        assert_eq!(dae.grad_clip, None);
        assert_eq!(dae.latent_dim, DaeConfig::desk().latent_dim);
        let bad = RunConfig::resolve(None, &[("n_train".into(), "many".into())]).unwrap();
        assert!(bad.dataset_spec().is_err());
    }
}
