use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::checkpoint::{save_checkpoint, DaeCheckpoint, TrainingProgress};
use super::{build_dae, to_model_space, Dae, DaeConfig};
use crate::diffusion::{make_step_schedule, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::mse;
use crate::nn::{Adam, Grads};

/// Knobs of a training run that do not belong in the checkpoint.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Directory for periodic checkpoints; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
    /// Milestone interval in training samples; 0 disables milestones.
    pub checkpoint_every: usize,
    /// Held-out images used for milestone and final reconstruction MSE.
    pub val_limit: usize,
    /// DDIM steps for reconstruction evaluation.
    pub eval_steps: usize,
    /// Print progress to stderr every this many optimizer steps (0 = quiet).
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            exec: Exec::Parallel,
            checkpoint_dir: None,
            checkpoint_every: 0,
            val_limit: 32,
            eval_steps: 20,
            log_every: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: DaeCheckpoint,
    /// `(step, mean batch loss)` for every optimizer step.
    pub losses: Vec<(usize, f64)>,
}

/// Mean reconstruction MSE (pixel space) over `images`.
pub(crate) fn reconstruction_mse(model: &Dae<f32>, images: &[Vec<f32>], eval_steps: usize, exec: Exec) -> Result<f64> {
    let steps = make_step_schedule(model.config.schedule.timesteps, eval_steps)?;
    let errs = exec.try_map(images, |img| {
        let rec = model.reconstruct(img, &steps)?;
        mse(img, &rec)
    })?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Jointly trains the semantic encoder and the denoiser on unlabeled images
/// (pixels in [0, 1]) with the noise-prediction objective.
pub fn train_dae(
    train: &[Vec<f32>],
    val: &[Vec<f32>],
    config: &DaeConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let mut model = build_dae(config.clone(), config.seed)?;
    for img in train.iter().chain(val) {
        model.check_image(img.len())?;
    }
    let schedule = NoiseSchedule::linear(config.schedule)?;
    let data: Vec<Vec<f32>> = train.iter().map(|x| to_model_space(x)).collect();
    let val = &val[..val.len().min(opts.val_limit)];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_DA7A);
    let mut optim = Adam::new(model.params(), config.learning_rate, config.grad_clip);
    let batch = config.batch_size;
    let total_steps = config.total_samples.div_ceil(batch);
    let mut losses = Vec::with_capacity(total_steps);
    let mut progress = TrainingProgress::default();
    let pixels = config.pixels();

    for step in 1..=total_steps {
        let jobs: Vec<(usize, usize, Vec<f32>)> = (0..batch)
            .map(|_| {
                let idx = rng.random_range(0..data.len());
                let t = rng.random_range(1..=schedule.timesteps());
                let eps = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();
                (idx, t, eps)
            })
            .collect();
        let results = opts.exec.try_map(&jobs, |(idx, t, eps)| -> Result<(f64, Grads<f32>)> {
            let x0 = &data[*idx];
            let x_t = q_sample(x0, *t, eps, &schedule)?;
            Ok(model.loss_and_grad(x0, &x_t, *t, eps))
        })?;
        let mut grads = model.params().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_assign(g);
        }
        loss /= batch as f64;
        grads.scale(1.0 / batch as f32);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        optim.step(model.params_mut(), &grads);
        losses.push((step, loss));

        let before = progress.samples_seen;
        progress.samples_seen += batch;
        progress.steps = step;
        if opts.log_every > 0 && step % opts.log_every == 0 {
            eprintln!("step {step}/{total_steps} samples {} loss {loss:.5}", progress.samples_seen);
        }
        if opts.checkpoint_every > 0 && before / opts.checkpoint_every != progress.samples_seen / opts.checkpoint_every {
            if !val.is_empty() {
                let m = reconstruction_mse(&model, val, opts.eval_steps, opts.exec)?;
                progress.milestones.push((progress.samples_seen, m));
                if opts.log_every > 0 {
                    eprintln!("milestone {} samples: val reconstruction mse {m:.6}", progress.samples_seen);
                }
            }
            if let Some(dir) = &opts.checkpoint_dir {
                let ckpt = DaeCheckpoint {
                    model: model.clone(),
                    progress: progress.clone(),
                };
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&ckpt, &dir.join(format!("ckpt_{:09}.daeckpt", progress.samples_seen)))?;
            }
        }
    }
    if !val.is_empty() {
        progress.final_val_mse = Some(reconstruction_mse(&model, val, opts.eval_steps, opts.exec)?);
    }
    Ok(TrainOutcome {
        checkpoint: DaeCheckpoint { model, progress },
        losses,
    })
}

/// Writes the loss curve as CSV `step,loss`.
pub fn write_loss_curve(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (s, l) in losses {
        out.push_str(&format!("{s},{l}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
