//! Linear probes on frozen semantic latents and the geometry of their
//! decision hyperplane.
//!
//! Latents are standardized per dimension before probing. The fitted
//! `(w, b)` is rescaled to a unit normal so that signed distances are
//! comparable across probes and calibrations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-dimension affine map to zero mean and unit sample variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-8;

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::EmptyInput("no latents".into()))?;
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::shape(format!("latent of length {d}"), format!("length {}", r.len())));
    }
    Ok(d)
}

impl LatentStandardizer {
    pub fn fit(latents: &[Vec<f64>]) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::EmptyInput(format!(
                "standardizer needs at least 2 latents, got {}",
                latents.len()
            )));
        }
        let d = check_rows(latents)?;
        let n = latents.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let var = latents.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
                let s = var.sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape(
                format!("latent of length {}", self.dim()),
                format!("length {}", z.len()),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }

    pub fn invert(&self, z_std: &[f64]) -> Result<Vec<f64>> {
        self.check(z_std)?;
        Ok(z_std.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Logistic regression (a single linear layer with cross-entropy).
    Linear,
    Svm,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Svm => "svm",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "logistic" => Ok(ProbeKind::Linear),
            "svm" => Ok(ProbeKind::Svm),
            other => Err(Error::InvalidConfig(format!("unknown probe kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight each class by the inverse of its frequency.
    pub class_weighted: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.5,
            weight_decay: 0.0,
            class_weighted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            epochs: 1000,
            learning_rate: 0.5,
        }
    }
}

/// Decision boundary `n . z + b = 0` in standardized latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub kind: ProbeKind,
    pub normal: Vec<f64>,
    pub bias: f64,
    pub training_hash: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Hyperplane {
    /// Rescales `(w, b)` to a unit normal. The side where `w . z + b > 0`
    /// stays positive.
    pub fn canonical(kind: ProbeKind, w: &[f64], b: f64, training_hash: String) -> Result<Self> {
        let len = norm(w);
        if !(len > 0.0 && len.is_finite() && b.is_finite()) {
            return Err(Error::SingularFit(format!("probe weights have norm {len}")));
        }
        Ok(Self {
            kind,
            normal: w.iter().map(|x| x / len).collect(),
            bias: b / len,
            training_hash,
        })
    }

    pub fn canonicalize(&self) -> Result<Self> {
        Self::canonical(self.kind, &self.normal, self.bias, self.training_hash.clone())
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// Signed distance of an already standardized latent.
    pub fn signed_distance(&self, z_std: &[f64]) -> Result<f64> {
        if z_std.len() != self.dim() {
            return Err(Error::shape(
                format!("latent of length {}", self.dim()),
                format!("length {}", z_std.len()),
            ));
        }
        Ok(dot(&self.normal, z_std) + self.bias)
    }
}

/// Signed distance of a raw latent; positive on the fractured side.
pub fn distance(z: &[f64], h: &Hyperplane, std: &LatentStandardizer) -> Result<f64> {
    h.signed_distance(&std.apply(z)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub fractured: bool,
    /// The signed distance; monotone in the fracture probability.
    pub score: f64,
}

pub fn detect(z: &[f64], h: &Hyperplane, std: &LatentStandardizer) -> Result<Detection> {
    let score = distance(z, h, std)?;
    Ok(Detection {
        fractured: score > 0.0,
        score,
    })
}

/// Hex SHA-256 over the latents and labels a probe was fitted on.
pub fn training_hash(latents: &[Vec<f64>], labels: &[bool]) -> String {
    let mut h = Sha256::new();
    for (z, &l) in latents.iter().zip(labels) {
        for v in z {
            h.update(v.to_le_bytes());
        }
        h.update([l as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_labeled(latents: &[Vec<f64>], labels: &[bool]) -> Result<usize> {
    if latents.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", latents.len()), labels.len()));
    }
    let d = check_rows(latents)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    Ok(d)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full-batch logistic regression; returns the raw `(w, b)`.
pub fn fit_logistic(latents: &[Vec<f64>], labels: &[bool], cfg: &LogisticConfig) -> Result<(Vec<f64>, f64)> {
    let d = check_labeled(latents, labels)?;
    let n = latents.len() as f64;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let weight = |l: bool| {
        if !cfg.class_weighted {
            1.0
        } else if l {
            n / (2.0 * pos)
        } else {
            n / (2.0 * (n - pos))
        }
    };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (z, &l) in latents.iter().zip(labels) {
            let y = if l { 1.0 } else { 0.0 };
            let r = weight(l) * (sigmoid(dot(&w, z) + b) - y);
            gw.iter_mut().zip(z).for_each(|(g, x)| *g += r * x);
            gb += r;
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (gi / n + cfg.weight_decay * *wi);
        }
        b -= cfg.learning_rate * gb / n;
    }
    Ok((w, b))
}

/// Correctly rounded sum (Shewchuk's partials, as in Python's `fsum`).
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even across the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Primal soft-margin SVM, `lambda/2 |w|^2 + mean hinge`, by full-batch
/// subgradient descent with step `lr / sqrt(t)`. Returns the iterate with
/// the lowest objective.
///
/// Sums over samples are correctly rounded, so the result does not depend
/// on sample order and is unchanged when every sample is repeated.
pub fn fit_svm(latents: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<(Vec<f64>, f64)> {
    let d = check_labeled(latents, labels)?;
    let n = latents.len() as f64;
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let margins = |w: &[f64], b: f64| -> Vec<f64> { latents.iter().zip(&ys).map(|(z, y)| y * (dot(w, z) + b)).collect() };
    let objective = |w: &[f64], m: &[f64]| {
        cfg.lambda / 2.0 * dot(w, w) + exact_sum(m.iter().map(|m| (1.0 - m).max(0.0))) / n
    };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut m = margins(&w, b);
    let mut best = (objective(&w, &m), w.clone(), b);
    for t in 1..=cfg.epochs {
        let active: Vec<usize> = (0..m.len()).filter(|&i| m[i] < 1.0).collect();
        let gw: Vec<f64> = (0..d)
            .map(|j| cfg.lambda * w[j] - exact_sum(active.iter().map(|&i| ys[i] * latents[i][j])) / n)
            .collect();
        let gb = -exact_sum(active.iter().map(|&i| ys[i])) / n;
        let step = cfg.learning_rate / (t as f64).sqrt();
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= step * g);
        b -= step * gb;
        m = margins(&w, b);
        let obj = objective(&w, &m);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    Ok((best.1, best.2))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub logistic: LogisticConfig,
    pub svm: SvmConfig,
}

/// Standardizer and hyperplane fitted together; what gets persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub standardizer: LatentStandardizer,
    pub hyperplane: Hyperplane,
    pub n_train: usize,
}

impl Probe {
    /// Fits on raw latents with `true` meaning fractured.
    pub fn fit(kind: ProbeKind, latents: &[Vec<f64>], labels: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        check_labeled(latents, labels)?;
        let standardizer = LatentStandardizer::fit(latents)?;
        let zs = latents.iter().map(|z| standardizer.apply(z)).collect::<Result<Vec<_>>>()?;
        let (w, b) = match kind {
            ProbeKind::Linear => fit_logistic(&zs, labels, &cfg.logistic)?,
            ProbeKind::Svm => fit_svm(&zs, labels, &cfg.svm)?,
        };
        let hyperplane = Hyperplane::canonical(kind, &w, b, training_hash(latents, labels))?;
        Ok(Self {
            standardizer,
            hyperplane,
            n_train: latents.len(),
        })
    }

    pub fn distance(&self, z: &[f64]) -> Result<f64> {
        distance(z, &self.hyperplane, &self.standardizer)
    }

    pub fn detect(&self, z: &[f64]) -> Result<Detection> {
        detect(z, &self.hyperplane, &self.standardizer)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProbeFile {
            version: PROBE_VERSION,
            kind: self.hyperplane.kind,
            dim: self.hyperplane.dim(),
            mean: self.standardizer.mean.clone(),
            std: self.standardizer.std.clone(),
            normal: self.hyperplane.normal.clone(),
            bias: self.hyperplane.bias,
            n_train: self.n_train,
            training_hash: self.hyperplane.training_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let f: ProbeFile = serde_json::from_str(text)?;
        if f.version != PROBE_VERSION {
            return Err(Error::format(path, format!("unsupported probe version {}", f.version)));
        }
        if f.mean.len() != f.dim || f.std.len() != f.dim || f.normal.len() != f.dim {
            return Err(Error::format(path, "vector lengths disagree with dim"));
        }
        if f.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::format(path, "non-positive standard deviation"));
        }
        if (norm(&f.normal) - 1.0).abs() > 1e-9 {
            return Err(Error::format(path, "normal is not unit length"));
        }
        Ok(Self {
            standardizer: LatentStandardizer { mean: f.mean, std: f.std },
            hyperplane: Hyperplane {
                kind: f.kind,
                normal: f.normal,
                bias: f.bias,
                training_hash: f.training_hash,
            },
            n_train: f.n_train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

const PROBE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    version: u32,
    kind: ProbeKind,
    dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    normal: Vec<f64>,
    bias: f64,
    n_train: usize,
    training_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc_auc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_set(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut zs = Vec::new();
        let mut ls = Vec::new();
        for i in 0..100 {
            let pos = i % 2 == 1;
            let cx = if pos { 2.0 } else { -2.0 };
            zs.push(vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
            ls.push(pos);
        }
        (zs, ls)
    }

    fn accuracy(p: &Probe, zs: &[Vec<f64>], ls: &[bool]) -> f64 {
        let ok = zs
            .iter()
            .zip(ls)
            .filter(|(z, &l)| p.detect(z).unwrap().fractured == l)
            .count();
        ok as f64 / zs.len() as f64
    }

    #[test]
    fn standardizer_examples() {
        let s = LatentStandardizer::fit(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        for v in &s.std {
            assert!((v - 2f64.sqrt()).abs() < 1e-15);
        }
        let c = LatentStandardizer::fit(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]]).unwrap();
        assert_eq!(c.std[0], 1.0);
        assert_eq!(c.apply(&[5.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(LatentStandardizer::fit(&[vec![1.0]]).unwrap_err().code(), "empty-input");
    }

    #[test]
    fn standardized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64).collect())
            .collect();
        let s = LatentStandardizer::fit(&zs).unwrap();
        let st: Vec<Vec<f64>> = zs.iter().map(|z| s.apply(z).unwrap()).collect();
        for j in 0..4 {
            let m = st.iter().map(|z| z[j]).sum::<f64>() / 300.0;
            let v = st.iter().map(|z| (z[j] - m).powi(2)).sum::<f64>() / 299.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        let back = s.invert(&st[7]).unwrap();
        for (a, b) in back.iter().zip(&zs[7]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probes_separate_toy_set() {
        let (zs, ls) = toy_set(1);
        for kind in [ProbeKind::Linear, ProbeKind::Svm] {
            let p = Probe::fit(kind, &zs, &ls, &ProbeConfig::default()).unwrap();
            assert_eq!(accuracy(&p, &zs, &ls), 1.0, "{kind}");
            assert!((norm(&p.hyperplane.normal) - 1.0).abs() < 1e-9);
            let scores: Vec<f64> = zs.iter().map(|z| p.detect(z).unwrap().score).collect();
            assert_eq!(roc_auc(&scores, &ls).unwrap(), 1.0);
        }
    }

    #[test]
    fn flipped_labels_flip_normal() {
        let (zs, ls) = toy_set(2);
        let flipped: Vec<bool> = ls.iter().map(|l| !l).collect();
        for kind in [ProbeKind::Linear, ProbeKind::Svm] {
            let a = Probe::fit(kind, &zs, &ls, &ProbeConfig::default()).unwrap();
            let b = Probe::fit(kind, &zs, &flipped, &ProbeConfig::default()).unwrap();
            for (x, y) in a.hyperplane.normal.iter().zip(&b.hyperplane.normal) {
                assert!((x + y).abs() < 1e-9, "{kind}: {x} vs {y}");
            }
            assert!((a.hyperplane.bias + b.hyperplane.bias).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_rejected() {
        let (zs, _) = toy_set(1);
        let ls = vec![true; zs.len()];
        let err = Probe::fit(ProbeKind::Svm, &zs, &ls, &ProbeConfig::default()).unwrap_err();
        assert_eq!(err.code(), "degenerate-labels");
    }

    #[test]
    fn svm_regularization_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (zs, ls): (Vec<Vec<f64>>, Vec<bool>) = (0..200)
            .map(|i| {
                let pos = i % 2 == 0;
                let c = if pos { 0.7 } else { -0.7 };
                (vec![c + noise.sample(&mut rng), noise.sample(&mut rng)], pos)
            })
            .unzip();
        let norms: Vec<f64> = [0.01, 0.3, 3.0]
            .iter()
            .map(|&lambda| {
                let cfg = SvmConfig {
                    lambda,
                    ..SvmConfig::default()
                };
                norm(&fit_svm(&zs, &ls, &cfg).unwrap().0)
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn svm_invariant_to_duplication() {
        let (zs, ls) = toy_set(4);
        let mut z2 = zs.clone();
        z2.extend(zs.iter().cloned());
        let mut l2 = ls.clone();
        l2.extend(ls.iter().copied());
        let cfg = SvmConfig::default();
        let (w1, b1) = fit_svm(&zs, &ls, &cfg).unwrap();
        let (w2, b2) = fit_svm(&z2, &l2, &cfg).unwrap();
        let a = Hyperplane::canonical(ProbeKind::Svm, &w1, b1, String::new()).unwrap();
        let b = Hyperplane::canonical(ProbeKind::Svm, &w2, b2, String::new()).unwrap();
        for (x, y) in a.normal.iter().zip(&b.normal) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((a.bias - b.bias).abs() < 1e-6);
    }

    #[test]
    fn exact_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 3.5, 1e-3, -2.0];
        assert_eq!(exact_sum(v), 2.501);
        let mut r = v;
        r.reverse();
        assert_eq!(exact_sum(r), exact_sum(v));
        assert_eq!(exact_sum(v.iter().chain(&v).copied()), 2.0 * exact_sum(v));
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn distance_examples() {
        let h = Hyperplane::canonical(ProbeKind::Svm, &[1.0, 0.0], 0.0, String::new()).unwrap();
        let id = LatentStandardizer::identity(2);
        assert_eq!(distance(&[2.0, 3.0], &h, &id).unwrap(), 2.0);
        let h = Hyperplane::canonical(ProbeKind::Svm, &[3.0, 4.0], 5.0, String::new()).unwrap();
        let on_plane = [-0.6, -0.8];
        assert!(distance(&on_plane, &h, &id).unwrap().abs() < 1e-15);
        assert!(detect(&[1.0, 0.0], &h, &id).unwrap().fractured);
        let h1 = Hyperplane::canonical(ProbeKind::Svm, &[1.0], -0.3 - 1.0, String::new()).unwrap();
        let d = detect(&[1.0], &h1, &LatentStandardizer::identity(1)).unwrap();
        assert!(!d.fractured && (d.score + 0.3).abs() < 1e-12);
        assert_eq!(distance(&[1.0], &h, &id).unwrap_err().code(), "shape-mismatch");
    }

    #[test]
    fn distance_matches_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 5;
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = 0.7;
        let h = Hyperplane::canonical(ProbeKind::Linear, &w, b, String::new()).unwrap();
        // Orthonormal basis of the plane by Gram-Schmidt against w.
        let mut basis: Vec<Vec<f64>> = vec![w.iter().map(|x| x / norm(&w)).collect()];
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for e in &basis {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm(&v);
            basis.push(v.iter().map(|x| x / n).collect());
        }
        let origin: Vec<f64> = w.iter().map(|x| -b * x / dot(&w, &w)).collect();
        let id = LatentStandardizer::identity(d);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rel: Vec<f64> = z.iter().zip(&origin).map(|(a, o)| a - o).collect();
            let mut foot = origin.clone();
            for e in &basis[1..] {
                let p = dot(&rel, e);
                foot.iter_mut().zip(e).for_each(|(f, x)| *f += p * x);
            }
            let gap = norm(&z.iter().zip(&foot).map(|(a, f)| a - f).collect::<Vec<_>>());
            let dist = distance(&z, &h, &id).unwrap();
            assert!((dist.abs() - gap).abs() < 1e-6);
        }
    }

    #[test]
    fn probe_json_round_trip() {
        let (zs, ls) = toy_set(5);
        let p = Probe::fit(ProbeKind::Linear, &zs, &ls, &ProbeConfig::default()).unwrap();
        let json = p.to_json().unwrap();
        let back = Probe::from_json(&json, Path::new("p.json")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(p.hyperplane.training_hash.len(), 64);
    }

    proptest! {
        #[test]
        fn canonicalization_idempotent(w in proptest::collection::vec(-10.0f64..10.0, 3), b in -5.0f64..5.0) {
            prop_assume!(norm(&w) > 1e-3);
            let h = Hyperplane::canonical(ProbeKind::Svm, &w, b, String::new()).unwrap();
            let again = h.canonicalize().unwrap();
            for (x, y) in h.normal.iter().zip(&again.normal) {
                prop_assert!((x - y).abs() < 1e-15);
            }
            prop_assert!((h.bias - again.bias).abs() < 1e-14);
        }

        #[test]
        fn decisions_invariant_to_positive_scale(
            w in proptest::collection::vec(-10.0f64..10.0, 3),
            b in -5.0f64..5.0,
            scale in 1e-3f64..1e3,
            seed in any::<u64>()
        ) {
            prop_assume!(norm(&w) > 1e-3);
            let a = Hyperplane::canonical(ProbeKind::Svm, &w, b, String::new()).unwrap();
            let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let s = Hyperplane::canonical(ProbeKind::Svm, &ws, b * scale, String::new()).unwrap();
            let id = LatentStandardizer::identity(3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let z: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let da = distance(&z, &a, &id).unwrap();
                prop_assume!(da.abs() > 1e-9);
                prop_assert_eq!(da > 0.0, distance(&z, &s, &id).unwrap() > 0.0);
            }
        }

        #[test]
        fn distance_is_affine(
            z1 in proptest::collection::vec(-5.0f64..5.0, 4),
            z2 in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in -2.0f64..2.0
        ) {
            let h = Hyperplane::canonical(ProbeKind::Svm, &[0.3, -1.0, 2.0, 0.5], 0.4, String::new()).unwrap();
            let id = LatentStandardizer::identity(4);
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let lhs = distance(&mix, &h, &id).unwrap();
            let rhs = alpha * distance(&z1, &h, &id).unwrap() + (1.0 - alpha) * distance(&z2, &h, &id).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
