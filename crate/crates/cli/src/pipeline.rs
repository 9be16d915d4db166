//! Label selection and evaluation shared by the subcommands and the
//! end-to-end tests.

use latentgrade::diffusion::make_step_schedule;
use latentgrade::grading::{continuous_grade, eval_label, ordinal_grade, Calibration};
use latentgrade::latentgeom::Probe;
use latentgrade::metrics::{
    confusion_matrix, mse_psnr, per_class_stats, psnr_from_mse, roc_auc, spearman, EvalReport, EVAL_CLASSES,
};
use latentgrade::model::Dae;
use latentgrade::synth::{Grade, ManifestRecord};
use latentgrade::{Exec, Result};

/// Semantic latents of a batch of [0, 1] images.
pub fn encode_all(model: &Dae<f32>, images: &[&[f32]], exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.try_map(images, |img| Ok(model.encode_semantic(img)?.0))
}

/// Probe training label: healthy G0 samples are negatives, graded G2/G3
/// samples positives; everything else is left out.
pub fn probe_label(r: &ManifestRecord) -> Option<bool> {
    match r.grade {
        Grade::G0 => Some(false),
        Grade::G2 | Grade::G3 if r.graded => Some(true),
        _ => None,
    }
}

/// Grade usable for calibration: all G0 samples plus graded compressed ones.
pub fn calibration_grade(r: &ManifestRecord) -> Option<Grade> {
    (r.grade == Grade::G0 || r.graded).then_some(r.grade)
}

/// Held-out detection label over G0 vs G2/G3; G1 is excluded.
pub fn detection_label(r: &ManifestRecord) -> Option<bool> {
    (r.grade != Grade::G1).then_some(r.fractured)
}

/// Keeps the items whose selector returns a label.
pub fn select<T: Clone, L>(
    records: &[&ManifestRecord],
    items: &[T],
    selector: impl Fn(&ManifestRecord) -> Option<L>,
) -> (Vec<T>, Vec<L>) {
    records
        .iter()
        .zip(items)
        .filter_map(|(r, x)| selector(r).map(|l| (x.clone(), l)))
        .unzip()
}

pub fn detection_auc(probe: &Probe, records: &[&ManifestRecord], latents: &[Vec<f64>]) -> Result<(f64, usize)> {
    let (zs, labels) = select(records, latents, detection_label);
    let scores = zs.iter().map(|z| probe.distance(z)).collect::<Result<Vec<_>>>()?;
    Ok((roc_auc(&scores, &labels)?, labels.len()))
}

/// Reconstruction MSE per image at `eval_steps`.
pub fn reconstruction_errors(model: &Dae<f32>, images: &[&[f32]], eval_steps: usize, exec: Exec) -> Result<Vec<f64>> {
    let steps = make_step_schedule(model.config().schedule.timesteps, eval_steps)?;
    exec.try_map(images, |img| {
        let rec = model.reconstruct(img, &steps)?;
        Ok(mse_psnr(img, &rec)?.0)
    })
}

/// Detection, grading and continuity metrics on labeled test latents.
pub fn evaluate(
    probe: &Probe,
    cal: &Calibration,
    records: &[&ManifestRecord],
    latents: &[Vec<f64>],
    recon_errors: &[f64],
) -> Result<EvalReport> {
    let (detection_auc, n_detection) = detection_auc(probe, records, latents)?;
    let dists = latents.iter().map(|z| probe.distance(z)).collect::<Result<Vec<_>>>()?;

    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (r, &d) in records.iter().zip(&dists) {
        if EVAL_CLASSES.contains(&r.grade) {
            pred.push(eval_label(ordinal_grade(continuous_grade(d, cal))?));
            truth.push(r.grade);
        }
    }
    let per_class = per_class_stats(&pred, &truth, &EVAL_CLASSES)?;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;

    let (fd, fc): (Vec<f64>, Vec<f64>) = records
        .iter()
        .zip(&dists)
        .filter(|(r, _)| r.fractured)
        .map(|(r, &d)| (d, r.compression))
        .unzip();
    let spearman_distance_compression = spearman(&fd, &fc).ok();

    let recon_mse = (!recon_errors.is_empty()).then(|| recon_errors.iter().sum::<f64>() / recon_errors.len() as f64);
    Ok(EvalReport {
        probe_kind: probe.hyperplane.kind.to_string(),
        calibration_kind: cal.kind().to_string(),
        detection_auc,
        macro_f1,
        per_class,
        confusion: confusion_matrix(&pred, &truth, &EVAL_CLASSES)?,
        recon_mse,
        recon_psnr: recon_mse.map(psnr_from_mse),
        spearman_distance_compression,
        n_detection,
        n_grading: truth.len(),
        n_fractured: fd.len(),
        n_reconstruction: recon_errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentgrade::synth::Split;

    fn rec(grade: Grade, graded: bool) -> ManifestRecord {
        ManifestRecord {
            filename: String::new(),
            split: Split::Train,
            compression: 0.0,
            grade,
            fractured: grade >= Grade::G2,
            graded,
        }
    }

    #[test]
    fn selections_follow_label_rules() {
        assert_eq!(probe_label(&rec(Grade::G0, false)), Some(false));
        assert_eq!(probe_label(&rec(Grade::G1, true)), None);
        assert_eq!(probe_label(&rec(Grade::G2, false)), None);
        assert_eq!(probe_label(&rec(Grade::G3, true)), Some(true));
        assert_eq!(calibration_grade(&rec(Grade::G2, true)), Some(Grade::G2));
        assert_eq!(calibration_grade(&rec(Grade::G3, false)), None);
        assert_eq!(detection_label(&rec(Grade::G1, true)), None);
        assert_eq!(detection_label(&rec(Grade::G2, false)), Some(true));
    }
}
