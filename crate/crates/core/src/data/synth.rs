//! Synthetic stand-in for a gestational-diabetes cohort.
//!
//! The label is drawn from a logistic model dominated by the 2-hour OGTT
//! value, so the OGTT column on its own separates the classes almost
//! perfectly. The intercept is solved so the expected prevalence is 35.8%.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{PatientDataset, Schema};
use crate::autodiff::sigmoid;
use crate::error::Result;
use crate::rng::{self, tag};
use crate::tensor::DenseMatrix;

/// Column index of the OGTT 2-hour glucose feature.
pub const OGTT_FEATURE: usize = 7;

const TARGET_PREVALENCE: f64 = 0.358;
const OGTT_SLOPE: f64 = 8.0;

pub fn synth_gdm(n: usize, seed: u64) -> Result<PatientDataset> {
    let mut rng = rng::stream(seed, &[tag::SYNTH]);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let extra_pregnancies = Poisson::new(1.2).expect("valid poisson");

    let mut rows = Vec::with_capacity(n);
    let mut ogtt_z = Vec::with_capacity(n);
    let mut side = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = std_normal.sample(&mut rng);
        let age = (30.0 + 5.0 * std_normal.sample(&mut rng)).clamp(18.0, 45.0);
        let bmi = (26.0 + 4.5 * std_normal.sample(&mut rng) + 0.8 * z).clamp(16.0, 50.0);
        let gravidity = 1.0 + f64::min(extra_pregnancies.sample(&mut rng), 7.0);
        let parity = if gravidity > 1.0 && rng.random_bool(0.8) {
            gravidity - 1.0
        } else {
            (gravidity - 2.0).max(0.0)
        };
        let family = f64::from(u8::from(rng.random_bool(0.25)));
        let pcos = f64::from(u8::from(rng.random_bool(0.12)));
        let fasting = 4.6 + 0.6 * (0.6 * z + 0.8 * std_normal.sample(&mut rng));
        let ogtt = 7.0 + 1.6 * z;
        let sbp = 115.0 + 11.0 * std_normal.sample(&mut rng) + 0.5 * (bmi - 26.0);
        let dbp = 0.55 * sbp + 10.0 + 6.0 * std_normal.sample(&mut rng);
        rows.push(vec![age, bmi, gravidity, parity, family, pcos, fasting, ogtt, sbp, dbp]);
        ogtt_z.push(z);
        side.push(0.3 * (bmi - 26.0) / 4.5 + 0.3 * family + 0.3 * pcos + 0.2 * (age - 30.0) / 5.0);
    }

    let linear: Vec<f64> = ogtt_z
        .iter()
        .zip(&side)
        .map(|(z, s)| OGTT_SLOPE * z + s)
        .collect();
    let intercept = solve_intercept(&linear, TARGET_PREVALENCE);
    let labels = linear
        .iter()
        .map(|l| Some(u8::from(rng.random::<f64>() < sigmoid(l + intercept))))
        .collect();

    let schema = Schema::SyntheticGdm;
    let specs = schema.columns();
    PatientDataset::new(
        DenseMatrix::from_rows(&rows)?,
        labels,
        specs.iter().map(|s| s.continuous).collect(),
        specs.iter().map(|s| s.name.to_string()).collect(),
    )
}

/// Bisection for b with mean(sigmoid(linear + b)) = target.
fn solve_intercept(linear: &[f64], target: f64) -> f64 {
    let rate = |b: f64| linear.iter().map(|l| sigmoid(l + b)).sum::<f64>() / linear.len().max(1) as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}
