use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const AGE_GROUPS: [&str; 6] = ["18-24", "25-34", "35-44", "45-54", "55-64", "65+"];
const AGE_WEIGHTS: [f64; 6] = [0.12, 0.18, 0.18, 0.18, 0.17, 0.17];
const BASE_INCOME: [f64; 6] = [14_000.0, 36_000.0, 52_000.0, 60_000.0, 55_000.0, 30_000.0];
const EDU_SLOPE: [f64; 6] = [800.0, 2_500.0, 4_000.0, 4_500.0, 4_000.0, 2_000.0];
const NOISE_SD: [f64; 6] = [4_000.0, 11_000.0, 20_000.0, 30_000.0, 26_000.0, 12_000.0];
const MEAN_HOURS: [f64; 6] = [24.0, 40.0, 43.0, 43.0, 38.0, 12.0];

/// Generates a census-like income table (age group × sex strata, six numeric
/// features, heteroscedastic `income`). Deterministic in `(rows, seed)`.
pub fn census_like_csv(rows: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(rows * 48);
    out.push_str("age_group,sex,education,hours,citizen,race,occupation,married,income\n");
    for _ in 0..rows {
        let u: f64 = rng.random();
        let mut age = AGE_GROUPS.len() - 1;
        let mut acc = 0.0;
        for (i, w) in AGE_WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                age = i;
                break;
            }
        }
        let male = rng.random::<f64>() < 0.49;
        let z: f64 = rng.sample(StandardNormal);
        let education = (13.0 + 2.5 * z).round().clamp(8.0, 20.0);
        let z: f64 = rng.sample(StandardNormal);
        let hours = (MEAN_HOURS[age] + if male { 4.0 } else { 0.0 } + 9.0 * z)
            .round()
            .clamp(0.0, 80.0);
        let citizen = u8::from(rng.random::<f64>() < 0.9);
        let race = rng.random_range(0..5u8);
        let occupation = (rng.random::<f64>() * 100.0).round() / 100.0;
        let married = u8::from(rng.random::<f64>() < if age == 0 { 0.1 } else { 0.55 });

        let gap = if male { 1.25 } else { 1.0 };
        let signal = BASE_INCOME[age]
            + EDU_SLOPE[age] * (education - 13.0)
            + 700.0 * (hours - MEAN_HOURS[age])
            + 25_000.0 * (occupation - 0.5) * if age == 0 { 0.3 } else { 1.0 }
            + 3_000.0 * f64::from(citizen)
            + 4_000.0 * f64::from(married)
            - 1_000.0 * f64::from(race);
        let z: f64 = rng.sample(StandardNormal);
        let income = (gap * signal + gap * NOISE_SD[age] * z).max(0.0).round();

        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            AGE_GROUPS[age],
            if male { "M" } else { "F" },
            education,
            hours,
            citizen,
            race,
            occupation,
            married,
            income
        );
    }
    out
}
