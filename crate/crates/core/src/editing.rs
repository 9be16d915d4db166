//! Counterfactual images: move the semantic latent along the hyperplane
//! normal to a requested severity and decode with the original noise latent.

use std::path::{Path, PathBuf};

use crate::diffusion::StepSchedule;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grading::{Calibration, CalibrationMap};
use crate::latentgeom::{Hyperplane, LatentStandardizer, Probe};
use crate::model::{Dae, SemanticLatent, StochasticLatent};
use crate::synth::{measure_height_reduction, save_png_strip, GeneratorConfig};

pub const DEFAULT_SWEEP_GRADES: [f64; 6] = [-1.0, 0.0, 1.0, 2.0, 3.0, 4.0];
pub const GRADE_RANGE: (f64, f64) = (-1.0, 4.0);

/// Distance that the two-point calibration maps to grade `g_t`.
pub fn target_distance(g_t: f64, cal: &Calibration) -> Result<f64> {
    match &cal.map {
        CalibrationMap::TwoPointLinear { d0, d3 } => Ok(d0 + g_t / 3.0 * (d3 - d0)),
        CalibrationMap::Polynomial { degree, .. } => Err(Error::UnsupportedInversion(format!("polynomial (degree {degree})"))),
    }
}

/// Minimal standardized-space move putting `z` at signed distance
/// `target_d`, mapped back to raw latent coordinates.
pub fn edit_latent(
    z: &SemanticLatent,
    h: &Hyperplane,
    std: &LatentStandardizer,
    target_d: f64,
) -> Result<SemanticLatent> {
    let zs = std.apply(z.as_slice())?;
    let delta = target_d - h.signed_distance(&zs)?;
    let moved: Vec<f64> = zs.iter().zip(&h.normal).map(|(v, n)| v + delta * n).collect();
    Ok(SemanticLatent(std.invert(&moved)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EditTarget {
    /// Uncalibrated move of this many units along the normal.
    Shift(f64),
    /// Calibrated target grade in [-1, 4].
    Grade(f64),
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: Vec<f32>,
    pub target: EditTarget,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        match self.target {
            EditTarget::Grade(g) if !(GRADE_RANGE.0..=GRADE_RANGE.1).contains(&g) => Err(Error::OutOfRange(format!(
                "target grade {g} outside [{}, {}]",
                GRADE_RANGE.0, GRADE_RANGE.1
            ))),
            EditTarget::Shift(a) if !a.is_finite() => Err(Error::OutOfRange(format!("shift {a} is not finite"))),
            _ => Ok(()),
        }
    }
}

/// Everything needed to produce counterfactuals for one trained pipeline.
pub struct Editor<'a> {
    pub model: &'a Dae<f32>,
    pub probe: &'a Probe,
    pub calibration: Option<&'a Calibration>,
    /// Schedule for inverting the source image to its noise latent.
    pub encode_steps: StepSchedule,
    /// Schedule for decoding edited latents.
    pub decode_steps: StepSchedule,
}

/// Both latents of a source image plus its current distance.
pub struct Encoded {
    pub semantic: SemanticLatent,
    pub stochastic: StochasticLatent,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub target_grade: f64,
    pub target_distance: f64,
    /// Height reduction read from the generated pixels; `None` when the
    /// oracle finds no body.
    pub measured_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub size: usize,
    pub images: Vec<Vec<f32>>,
    pub rows: Vec<SweepRow>,
}

impl<'a> Editor<'a> {
    fn calibration(&self) -> Result<&'a Calibration> {
        self.calibration
            .ok_or_else(|| Error::InvalidConfig("a calibration is required for grade targets".into()))
    }

    pub fn encode(&self, image: &[f32]) -> Result<Encoded> {
        let semantic = self.model.encode_semantic(image)?;
        let stochastic = self.model.encode_stochastic(image, &semantic, &self.encode_steps)?;
        let distance = self.probe.distance(semantic.as_slice())?;
        Ok(Encoded {
            semantic,
            stochastic,
            distance,
        })
    }

    /// Decodes `enc` moved to signed distance `target_d`.
    pub fn decode_at(&self, enc: &Encoded, target_d: f64) -> Result<Vec<f32>> {
        let z = edit_latent(&enc.semantic, &self.probe.hyperplane, &self.probe.standardizer, target_d)?;
        self.model.decode(&enc.stochastic, &z, &self.decode_steps)
    }

    pub fn apply(&self, request: &EditRequest) -> Result<Vec<f32>> {
        request.validate()?;
        let enc = self.encode(&request.image)?;
        let target_d = match request.target {
            EditTarget::Shift(a) => enc.distance + a,
            EditTarget::Grade(g) => target_distance(g, self.calibration()?)?,
        };
        self.decode_at(&enc, target_d)
    }

    pub fn counterfactual(&self, image: &[f32], grade: f64) -> Result<Vec<f32>> {
        self.apply(&EditRequest {
            image: image.to_vec(),
            target: EditTarget::Grade(grade),
        })
    }

    /// One counterfactual per grade from a single encoding of `image`.
    pub fn grade_sweep(&self, image: &[f32], grades: &[f64], oracle: &GeneratorConfig, exec: Exec) -> Result<Sweep> {
        if grades.is_empty() {
            return Err(Error::EmptyInput("no sweep grades".into()));
        }
        let cal = self.calibration()?;
        for &g in grades {
            EditRequest {
                image: Vec::new(),
                target: EditTarget::Grade(g),
            }
            .validate()?;
        }
        let enc = self.encode(image)?;
        let targets = grades
            .iter()
            .map(|&g| target_distance(g, cal))
            .collect::<Result<Vec<_>>>()?;
        let images = exec.try_map(&targets, |&d| self.decode_at(&enc, d))?;
        let rows = grades
            .iter()
            .zip(&targets)
            .zip(&images)
            .map(|((&g, &d), img)| SweepRow {
                target_grade: g,
                target_distance: d,
                measured_reduction: measure_height_reduction(img, oracle).ok(),
            })
            .collect();
        Ok(Sweep {
            size: self.model.config().image_size,
            images,
            rows,
        })
    }
}

impl Sweep {
    pub fn csv(&self) -> String {
        let mut out = String::from("target_grade,target_distance,measured_reduction\n");
        for r in &self.rows {
            let m = r.measured_reduction.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{},{:.6},{m}\n", r.target_grade, r.target_distance));
        }
        out
    }

    /// Writes `<stem>_sweep.png` and `<stem>_sweep.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}_sweep.png"));
        let csv = dir.join(format!("{stem}_sweep.csv"));
        save_png_strip(&png, &self.images, self.size)?;
        std::fs::write(&csv, self.csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((png, csv))
    }
}
