//! Otsu histogram thresholding for correspondence selection.
//!
//! Scores are binned into equal-width bins over `[min, max]` and the
//! bin boundary maximizing between-class variance is returned. Values
//! strictly above the returned threshold count as selected.

use crate::error::{Error, Result};

/// Returns the Otsu threshold for `values` using `bins` equal-width bins.
///
/// Ties between boundaries are broken toward the lowest boundary. A
/// constant input, or one where every value lands in a single bin,
/// yields [`Error::DegenerateHistogram`]; callers treat that as an
/// empty selection.
pub fn otsu_threshold(values: &[f32], bins: usize) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "otsu_threshold needs at least 2 values, got {}",
            values.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Contract(format!(
            "otsu_threshold needs at least 2 bins, got {bins}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("otsu_threshold requires finite values".into()));
    }

    let min = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if min == max {
        return Err(Error::DegenerateHistogram);
    }

    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = (((v as f64 - min) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }

    let center = |i: usize| min + (i as f64 + 0.5) * width;
    let total = values.len() as f64;
    let total_sum: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * center(i))
        .sum();

    // Split k puts bins 0..=k in the low class and bins k+1.. in the
    // high class; the candidate threshold is the boundary between them.
    let mut best: Option<(usize, f64)> = None;
    let mut n0 = 0u64;
    let mut s0 = 0.0f64;
    for k in 0..bins - 1 {
        n0 += counts[k];
        s0 += counts[k] as f64 * center(k);
        let n1 = values.len() as u64 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let w0 = n0 as f64 / total;
        let w1 = n1 as f64 / total;
        let mu0 = s0 / n0 as f64;
        let mu1 = (total_sum - s0) / n1 as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best.map_or(0.0, |(_, v)| v) {
            best = Some((k, var));
        }
    }

    match best {
        Some((k, _)) => Ok(min + (k + 1) as f64 * width),
        None => Err(Error::DegenerateHistogram),
    }
}
