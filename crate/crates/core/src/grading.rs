//! Calibration of hyperplane distances to continuous Genant grades.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Grade;

const RIDGE: f64 = 1e-9;
const CALIBRATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    /// Line through the mean G0 distance (grade 0) and the mean G3 distance
    /// (grade 3).
    TwoPointLinear { d0: f64, d3: f64 },
    /// `g(d) = sum_j coeffs[j] * d^j`.
    Polynomial {
        degree: usize,
        coeffs: Vec<f64>,
        per_class_means: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(flatten)]
    pub map: CalibrationMap,
    /// Range of distances the fit saw.
    pub d_min: f64,
    pub d_max: f64,
    /// False when the derivative changes sign inside `[d_min, d_max]`.
    pub monotone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    TwoPoint,
    Poly1,
    Poly3,
}

impl fmt::Display for CalibrationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationKind::TwoPoint => "two_point",
            CalibrationKind::Poly1 => "poly1",
            CalibrationKind::Poly3 => "poly3",
        })
    }
}

impl FromStr for CalibrationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_point" | "two-point" => Ok(CalibrationKind::TwoPoint),
            "poly1" => Ok(CalibrationKind::Poly1),
            "poly3" => Ok(CalibrationKind::Poly3),
            other => Err(Error::InvalidConfig(format!("unknown calibration kind {other:?}"))),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn calibrate_two_point(dists_g0: &[f64], dists_g3: &[f64]) -> Result<Calibration> {
    if dists_g0.is_empty() || dists_g3.is_empty() {
        return Err(Error::EmptyInput(format!(
            "two-point calibration needs G0 and G3 samples ({} G0, {} G3)",
            dists_g0.len(),
            dists_g3.len()
        )));
    }
    let (d0, d3) = (mean(dists_g0), mean(dists_g3));
    if !(d0.is_finite() && d3.is_finite()) || d0 == d3 {
        return Err(Error::DegenerateCalibration(format!("mean G0 distance {d0} equals mean G3 distance {d3}")));
    }
    let (d_min, d_max) = range(dists_g0.iter().chain(dists_g3).copied());
    Ok(Calibration {
        map: CalibrationMap::TwoPointLinear { d0, d3 },
        d_min,
        d_max,
        monotone: true,
    })
}

/// Solves the symmetric system `a x = b` by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        let magnitude = a[pivot][col].abs();
        if magnitude.is_nan() || magnitude <= scale * 1e-14 {
            return Err(Error::SingularFit(format!("pivot {col} vanished")));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (done, rest) = a.split_at_mut(col + 1);
        let pivot_row = &done[col];
        for (offset, row) in rest.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (r, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *r -= f * p;
            }
            b[col + 1 + offset] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularFit("non-finite coefficients".into()));
    }
    Ok(x)
}

/// Least squares polynomial of `degree` through `(dists, targets)`, via
/// normal equations with a small ridge on the diagonal.
pub fn fit_polynomial(dists: &[f64], targets: &[f64], degree: usize) -> Result<Vec<f64>> {
    if dists.len() != targets.len() {
        return Err(Error::shape(dists.len(), targets.len()));
    }
    let mut distinct: Vec<f64> = dists.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(Error::SingularFit(format!(
            "degree {degree} needs {} distinct distances, got {}",
            degree + 1,
            distinct.len()
        )));
    }
    let m = degree + 1;
    let mut xtx = vec![vec![0.0; m]; m];
    let mut xty = vec![0.0; m];
    for (&d, &t) in dists.iter().zip(targets) {
        let powers: Vec<f64> = (0..m).map(|j| d.powi(j as i32)).collect();
        for i in 0..m {
            xty[i] += powers[i] * t;
            for j in 0..m {
                xtx[i][j] += powers[i] * powers[j];
            }
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += RIDGE;
    }
    solve(xtx, xty)
}

fn poly_eval(coeffs: &[f64], d: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * d + c)
}

/// Whether the derivative of a polynomial of degree at most 3 keeps one
/// sign on `[lo, hi]`.
fn poly_monotone(coeffs: &[f64], lo: f64, hi: f64) -> bool {
    let deriv: Vec<f64> = coeffs.iter().enumerate().skip(1).map(|(j, c)| j as f64 * c).collect();
    let linear_root = |a: f64, b: f64| if b != 0.0 { vec![-a / b] } else { vec![] };
    let roots = match deriv[..] {
        [a, b] => linear_root(a, b),
        [a, b, 0.0] => linear_root(a, b),
        [a, b, c] => {
            let disc = b * b - 4.0 * c * a;
            if disc > 0.0 {
                let r = disc.sqrt();
                vec![(-b - r) / (2.0 * c), (-b + r) / (2.0 * c)]
            } else {
                vec![]
            }
        }
        _ => vec![],
    };
    !roots.iter().any(|&r| lo < r && r < hi)
}

/// Polynomial calibration on per-sample targets (0, 2 or 3). With
/// `per_class_means` the fit uses one point per distinct target instead.
pub fn calibrate_poly(dists: &[f64], targets: &[f64], degree: usize, per_class_means: bool) -> Result<Calibration> {
    if degree != 1 && degree != 3 {
        return Err(Error::InvalidConfig(format!("polynomial degree must be 1 or 3, got {degree}")));
    }
    if dists.is_empty() {
        return Err(Error::EmptyInput("no calibration samples".into()));
    }
    let (xs, ys) = if per_class_means {
        let mut classes: Vec<f64> = targets.to_vec();
        classes.sort_by(f64::total_cmp);
        classes.dedup();
        classes
            .iter()
            .map(|&c| {
                let ds: Vec<f64> = dists.iter().zip(targets).filter(|(_, &t)| t == c).map(|(d, _)| *d).collect();
                (mean(&ds), c)
            })
            .unzip()
    } else {
        (dists.to_vec(), targets.to_vec())
    };
    let coeffs = fit_polynomial(&xs, &ys, degree)?;
    let (d_min, d_max) = range(dists.iter().copied());
    Ok(Calibration {
        monotone: poly_monotone(&coeffs, d_min, d_max),
        map: CalibrationMap::Polynomial {
            degree,
            coeffs,
            per_class_means,
        },
        d_min,
        d_max,
    })
}

/// Fits a calibration of `kind` from distances and their true grades.
/// Two-point uses only G0 and G3; polynomials use G0, G2 and G3.
pub fn fit_calibration(kind: CalibrationKind, dists: &[f64], grades: &[Grade], per_class_means: bool) -> Result<Calibration> {
    if dists.len() != grades.len() {
        return Err(Error::shape(dists.len(), grades.len()));
    }
    let pick = |g: Grade| -> Vec<f64> {
        dists.iter().zip(grades).filter(|(_, &x)| x == g).map(|(d, _)| *d).collect()
    };
    match kind {
        CalibrationKind::TwoPoint => calibrate_two_point(&pick(Grade::G0), &pick(Grade::G3)),
        CalibrationKind::Poly1 | CalibrationKind::Poly3 => {
            let (ds, ts): (Vec<f64>, Vec<f64>) = dists
                .iter()
                .zip(grades)
                .filter(|(_, &g)| g != Grade::G1)
                .map(|(&d, &g)| (d, g.index() as f64))
                .unzip();
            let degree = if kind == CalibrationKind::Poly1 { 1 } else { 3 };
            calibrate_poly(&ds, &ts, degree, per_class_means)
        }
    }
}

impl Calibration {
    pub fn kind(&self) -> CalibrationKind {
        match &self.map {
            CalibrationMap::TwoPointLinear { .. } => CalibrationKind::TwoPoint,
            CalibrationMap::Polynomial { degree: 1, .. } => CalibrationKind::Poly1,
            CalibrationMap::Polynomial { .. } => CalibrationKind::Poly3,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CalibrationFile {
            version: CALIBRATION_VERSION,
            calibration: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let f: CalibrationFile = serde_json::from_str(text)?;
        if f.version != CALIBRATION_VERSION {
            return Err(Error::format(path, format!("unsupported calibration version {}", f.version)));
        }
        let c = f.calibration;
        match &c.map {
            CalibrationMap::TwoPointLinear { d0, d3 } if d0 == d3 || !d0.is_finite() || !d3.is_finite() => {
                Err(Error::format(path, "two-point anchors must be finite and distinct"))
            }
            CalibrationMap::Polynomial { degree, coeffs, .. }
                if coeffs.len() != degree + 1 || coeffs.iter().any(|v| !v.is_finite()) =>
            {
                Err(Error::format(path, "polynomial coefficients do not match degree"))
            }
            _ => Ok(c),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    version: u32,
    #[serde(flatten)]
    calibration: Calibration,
}

/// Unclamped continuous grade; values below 0 or above 3 are meaningful.
pub fn continuous_grade(d: f64, cal: &Calibration) -> f64 {
    match &cal.map {
        CalibrationMap::TwoPointLinear { d0, d3 } => 3.0 * (d - d0) / (d3 - d0),
        CalibrationMap::Polynomial { coeffs, .. } => poly_eval(coeffs, d),
    }
}

/// Clamps to [0, 3] and rounds half away from zero.
pub fn ordinal_grade(g: f64) -> Result<Grade> {
    if !g.is_finite() {
        return Err(Error::OutOfRange(format!("grade {g} is not finite")));
    }
    let i = g.clamp(0.0, 3.0).round() as usize;
    Ok(Grade::from_index(i).expect("clamped"))
}

/// Evaluation rule: anything below G2 counts as healthy.
pub fn eval_label(g: Grade) -> Grade {
    if g == Grade::G1 {
        Grade::G0
    } else {
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point(d0: f64, d3: f64) -> Calibration {
        calibrate_two_point(&[d0], &[d3]).unwrap()
    }

    #[test]
    fn two_point_examples() {
        let c = two_point(-2.0, 4.0);
        assert_eq!(continuous_grade(1.0, &c), 1.5);
        assert_eq!(continuous_grade(-2.0, &c), 0.0);
        assert_eq!(continuous_grade(4.0, &c), 3.0);
        assert_eq!(continuous_grade(-4.0, &c), -1.0);
        assert_eq!(continuous_grade(2.0, &two_point(0.0, 3.0)), 2.0);
        let c = calibrate_two_point(&[-3.0, -1.0], &[3.0, 5.0]).unwrap();
        assert_eq!(c.map, CalibrationMap::TwoPointLinear { d0: -2.0, d3: 4.0 });
        assert_eq!((c.d_min, c.d_max), (-3.0, 5.0));
    }

    #[test]
    fn two_point_errors() {
        assert_eq!(calibrate_two_point(&[1.0], &[1.0]).unwrap_err().code(), "degenerate-calibration");
        assert_eq!(calibrate_two_point(&[], &[1.0]).unwrap_err().code(), "empty-input");
    }

    #[test]
    fn anchors_round_to_end_grades() {
        let c = calibrate_two_point(&[-1.2, -0.8, -1.0], &[2.5, 3.5]).unwrap();
        assert_eq!(ordinal_grade(continuous_grade(-1.0, &c)).unwrap(), Grade::G0);
        assert_eq!(ordinal_grade(continuous_grade(3.0, &c)).unwrap(), Grade::G3);
    }

    #[test]
    fn poly_exact_line() {
        let ds = [-2.0, -1.0, 0.0, 1.5, 3.0];
        let ts: Vec<f64> = ds.iter().map(|d| 0.5 * d + 1.0).collect();
        let c = calibrate_poly(&ds, &ts, 1, false).unwrap();
        let CalibrationMap::Polynomial { coeffs, .. } = &c.map else { panic!() };
        assert!((coeffs[0] - 1.0).abs() < 1e-8 && (coeffs[1] - 0.5).abs() < 1e-8);
        assert!((continuous_grade(2.0, &c) - 2.0).abs() < 1e-8);
        assert!(c.monotone);
    }

    #[test]
    fn poly1_matches_closed_form_regression() {
        let ds = [-3.1, -2.0, -2.2, 0.4, 1.1, 2.5, 2.9, 3.3];
        let ts = [0.0, 0.0, 0.0, 2.0, 2.0, 3.0, 2.0, 3.0];
        let c = calibrate_poly(&ds, &ts, 1, false).unwrap();
        let CalibrationMap::Polynomial { coeffs, .. } = &c.map else { panic!() };
        let (mx, my) = (mean(&ds), mean(&ts));
        let cov: f64 = ds.iter().zip(&ts).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = ds.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = cov / var;
        assert!((coeffs[1] - slope).abs() < 1e-8);
        assert!((coeffs[0] - (my - slope * mx)).abs() < 1e-8);
    }

    #[test]
    fn poly3_recovers_cubic() {
        let truth = [0.5, -1.0, 0.25, 0.1];
        let ds: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let ts: Vec<f64> = ds.iter().map(|&d| poly_eval(&truth, d)).collect();
        let c = calibrate_poly(&ds, &ts, 3, false).unwrap();
        let CalibrationMap::Polynomial { coeffs, .. } = &c.map else { panic!() };
        for (a, b) in coeffs.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-6, "{coeffs:?}");
        }
        // Derivative 0.3 d^2 + 0.5 d - 1 has a root at about 1.17.
        assert!(!c.monotone);
    }

    #[test]
    fn poly_rejects_too_few_distinct_points() {
        let err = calibrate_poly(&[1.0, 1.0, 2.0, 2.0], &[0.0, 0.0, 3.0, 3.0], 3, false).unwrap_err();
        assert_eq!(err.code(), "singular-fit");
        assert!(calibrate_poly(&[1.0, 2.0], &[0.0, 3.0], 2, false).is_err());
    }

    #[test]
    fn per_class_mean_fit() {
        let ds = [-2.0, -1.0, 1.0, 2.0, 4.0, 5.0];
        let ts = [0.0, 0.0, 2.0, 2.0, 3.0, 3.0];
        let c = calibrate_poly(&ds, &ts, 1, true).unwrap();
        let direct = fit_polynomial(&[-1.5, 1.5, 4.5], &[0.0, 2.0, 3.0], 1).unwrap();
        let CalibrationMap::Polynomial { coeffs, .. } = &c.map else { panic!() };
        assert_eq!(coeffs, &direct);
    }

    #[test]
    fn fit_calibration_selects_classes() {
        let ds = [-2.0, 0.0, 1.0, 4.0, 100.0];
        let gs = [Grade::G0, Grade::G1, Grade::G2, Grade::G3, Grade::G1];
        let c = fit_calibration(CalibrationKind::TwoPoint, &ds, &gs, false).unwrap();
        assert_eq!(c.map, CalibrationMap::TwoPointLinear { d0: -2.0, d3: 4.0 });
        let p = fit_calibration(CalibrationKind::Poly1, &ds, &gs, false).unwrap();
        assert_eq!(p.d_max, 4.0);
        assert_eq!(p.kind(), CalibrationKind::Poly1);
    }

    #[test]
    fn ordinal_examples() {
        assert_eq!(ordinal_grade(1.5).unwrap(), Grade::G2);
        assert_eq!(ordinal_grade(0.5).unwrap(), Grade::G1);
        assert_eq!(ordinal_grade(-1.0).unwrap(), Grade::G0);
        assert_eq!(ordinal_grade(4.2).unwrap(), Grade::G3);
        assert_eq!(ordinal_grade(2.49).unwrap(), Grade::G2);
        assert_eq!(ordinal_grade(f64::NAN).unwrap_err().code(), "out-of-range");
    }

    #[test]
    fn eval_label_examples() {
        assert_eq!(eval_label(Grade::G1), Grade::G0);
        assert_eq!(eval_label(Grade::G0), Grade::G0);
        assert_eq!(eval_label(Grade::G2), Grade::G2);
        assert_eq!(eval_label(Grade::G3), Grade::G3);
    }

    #[test]
    fn json_round_trip() {
        for c in [
            calibrate_two_point(&[-1.0, -2.0], &[3.0]).unwrap(),
            calibrate_poly(&[-2.0, -1.0, 0.0, 1.0, 2.0], &[0.0, 0.0, 2.0, 3.0, 3.0], 3, false).unwrap(),
        ] {
            let json = c.to_json().unwrap();
            assert!(json.contains("\"monotone\""));
            let back = Calibration::from_json(&json, Path::new("c.json")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json().unwrap(), json);
        }
    }

    proptest! {
        #[test]
        fn two_point_affine_invariant(
            g0 in proptest::collection::vec(-5.0f64..0.0, 1..10),
            g3 in proptest::collection::vec(0.5f64..5.0, 1..10),
            a in 0.1f64..10.0,
            c in -10.0f64..10.0,
            d in -8.0f64..8.0
        ) {
            let base = calibrate_two_point(&g0, &g3).unwrap();
            let map = |v: &[f64]| v.iter().map(|x| a * x + c).collect::<Vec<_>>();
            let moved = calibrate_two_point(&map(&g0), &map(&g3)).unwrap();
            let lhs = continuous_grade(d, &base);
            let rhs = continuous_grade(a * d + c, &moved);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn two_point_monotone(d1 in -10.0f64..10.0, d2 in -10.0f64..10.0) {
            let c = two_point(-1.0, 2.0);
            prop_assume!(d1 < d2);
            prop_assert!(continuous_grade(d1, &c) < continuous_grade(d2, &c));
        }
    }
}
