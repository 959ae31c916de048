//! Visual diagnostics: key-space PCA maps and reciprocal-attention
//! heatmaps, exportable as PNG with a JSON sidecar.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

use super::ReciprocalState;

/// Relative eigenvalue floor below which a principal component is
/// treated as zero-variance and rendered flat.
const DEGENERATE_EIGENVALUE_RATIO: f64 = 1e-9;

/// A token to anchor a reciprocal heatmap on, by sub-panel and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "panel", content = "index", rename_all = "lowercase")]
pub enum Anchor {
    Top(usize),
    Bottom(usize),
}

/// Metadata written next to each exported diagnostic image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticSidecar {
    pub step: usize,
    pub layer: usize,
    pub anchor: Option<Anchor>,
    pub grid: (usize, usize),
}

/// Projects per-token keys onto their top three principal components
/// and maps them to RGB in `[0, 1]` over the token grid.
///
/// Channels are min-max normalized independently; components with no
/// variance render as flat 0.5. Component signs are canonicalized so
/// the output is deterministic.
pub fn key_pca_map(keys: &Array2<f32>, grid: (usize, usize)) -> Result<Array3<f32>> {
    let (tokens, dim) = keys.dim();
    if tokens < 3 {
        return Err(Error::Contract(format!(
            "key PCA needs at least 3 tokens, got {tokens}"
        )));
    }
    if grid.0 * grid.1 != tokens {
        return Err(Error::ShapeMismatch(format!(
            "grid {grid:?} does not cover {tokens} tokens"
        )));
    }

    // Mean-center in f64.
    let mut centered = DMatrix::<f64>::zeros(tokens, dim);
    for c in 0..dim {
        let mean = (0..tokens).map(|r| f64::from(keys[[r, c]])).sum::<f64>() / tokens as f64;
        for r in 0..tokens {
            centered[(r, c)] = f64::from(keys[[r, c]]) - mean;
        }
    }
    let covariance = centered.transpose() * &centered / tokens as f64;
    let eigen = nalgebra::SymmetricEigen::new(covariance);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let max_ev = order.first().map_or(0.0, |&i| eigen.eigenvalues[i]).max(0.0);

    let mut rgb = Array3::<f32>::from_elem((grid.0, grid.1, 3), 0.5);
    for channel in 0..3 {
        let Some(&idx) = order.get(channel) else { break };
        let ev = eigen.eigenvalues[idx];
        if max_ev <= 0.0 || ev <= DEGENERATE_EIGENVALUE_RATIO * max_ev {
            continue;
        }
        let mut axis = eigen.eigenvectors.column(idx).clone_owned();
        // Fix the sign by making the largest-magnitude loading positive.
        let lead = (0..dim).max_by(|&a, &b| {
            axis[a].abs().partial_cmp(&axis[b].abs()).unwrap_or(std::cmp::Ordering::Equal)
        });
        if let Some(lead) = lead {
            if axis[lead] < 0.0 {
                axis.neg_mut();
            }
        }
        let projected: Vec<f64> = (0..tokens)
            .map(|r| (0..dim).map(|c| centered[(r, c)] * axis[c]).sum())
            .collect();
        let lo = projected.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = projected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        for (r, &p) in projected.iter().enumerate() {
            rgb[[r / grid.1, r % grid.1, channel]] = ((p - lo) / (hi - lo)) as f32;
        }
    }
    Ok(rgb)
}

/// Renders the averaged reciprocal scores against one anchor token as a
/// min-max normalized grid over the opposite sub-panel.
///
/// A constant row or column normalizes to all zeros.
pub fn reciprocal_heatmap(
    state: &ReciprocalState,
    anchor: Anchor,
    grid: (usize, usize),
) -> Result<Array2<f32>> {
    if state.updates() == 0 {
        return Err(Error::Contract(
            "heatmap requires at least one reciprocal observation".into(),
        ));
    }
    let p = state.panel_tokens();
    if grid.0 * grid.1 != p {
        return Err(Error::ShapeMismatch(format!(
            "grid {grid:?} does not cover {p} panel tokens"
        )));
    }
    let m_bar = state.m_bar();
    let values: Vec<f64> = match anchor {
        Anchor::Bottom(v) => {
            if v >= p {
                return Err(Error::Contract(format!("bottom anchor {v} out of range")));
            }
            (0..p).map(|u| f64::from(m_bar[[u, v]])).collect()
        }
        Anchor::Top(u) => {
            if u >= p {
                return Err(Error::Contract(format!("top anchor {u} out of range")));
            }
            (0..p).map(|v| f64::from(m_bar[[u, v]])).collect()
        }
    };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(Array2::from_shape_fn(grid, |(r, c)| {
        if span <= 0.0 {
            0.0
        } else {
            ((values[r * grid.1 + c] - lo) / span) as f32
        }
    }))
}

/// Writes a heatmap as an 8-bit grayscale PNG plus its JSON sidecar.
pub fn export_heatmap(
    png_path: &Path,
    heat: &Array2<f32>,
    sidecar: &DiagnosticSidecar,
) -> Result<()> {
    imageio::save_unit_gray_png(png_path, heat)?;
    write_sidecar(png_path, sidecar)
}

/// Writes a key-PCA map as an 8-bit RGB PNG plus its JSON sidecar.
pub fn export_key_pca(
    png_path: &Path,
    rgb: &Array3<f32>,
    sidecar: &DiagnosticSidecar,
) -> Result<()> {
    imageio::save_unit_rgb_png(png_path, rgb)?;
    write_sidecar(png_path, sidecar)
}

fn write_sidecar(png_path: &Path, sidecar: &DiagnosticSidecar) -> Result<()> {
    let json_path = png_path.with_extension("json");
    let file = std::fs::File::create(json_path)?;
    serde_json::to_writer_pretty(file, sidecar)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_keys_render_flat_gray() {
        let keys = Array2::from_shape_fn((6, 4), |_| 1.25f32);
        let rgb = key_pca_map(&keys, (3, 2)).unwrap();
        assert!(rgb.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn collinear_keys_use_one_channel() {
        // Keys on a line: covariance is rank one, so channels 2 and 3
        // are degenerate per the eigen-decomposition oracle.
        let dir = [1.0f32, -2.0, 0.5];
        let keys = Array2::from_shape_fn((8, 3), |(r, c)| r as f32 * dir[c]);
        let rgb = key_pca_map(&keys, (4, 2)).unwrap();
        let ch0: Vec<f32> = rgb.slice(ndarray::s![.., .., 0]).iter().copied().collect();
        assert!(ch0.iter().any(|&x| x == 0.0) && ch0.iter().any(|&x| x == 1.0));
        for channel in 1..3 {
            assert!(rgb
                .slice(ndarray::s![.., .., channel])
                .iter()
                .all(|&x| x == 0.5));
        }
    }

    #[test]
    fn two_clusters_make_two_flat_regions() {
        let keys = Array2::from_shape_fn((6, 3), |(r, c)| {
            if r < 3 {
                [0.0f32, 1.0, 2.0][c]
            } else {
                [4.0f32, -1.0, 0.0][c]
            }
        });
        let rgb = key_pca_map(&keys, (6, 1)).unwrap();
        for channel in 0..3 {
            let a = rgb[[0, 0, channel]];
            let b = rgb[[3, 0, channel]];
            for r in 0..3 {
                assert_eq!(rgb[[r, 0, channel]], a);
                assert_eq!(rgb[[r + 3, 0, channel]], b);
            }
        }
        // The leading component separates the clusters.
        assert_ne!(rgb[[0, 0, 0]], rgb[[3, 0, 0]]);
    }

    #[test]
    fn heatmap_single_spike() {
        let mut state = ReciprocalState::new(4, 0.8).unwrap();
        let mut m = Array2::<f32>::zeros((4, 4));
        m[[2, 1]] = 0.6;
        state.update_ema(&m).unwrap();
        let heat = reciprocal_heatmap(&state, Anchor::Bottom(1), (2, 2)).unwrap();
        assert_eq!(heat[[1, 0]], 1.0); // token u = 2 in a 2x2 grid
        assert_eq!(heat.iter().filter(|&&x| x == 0.0).count(), 3);
    }

    #[test]
    fn heatmap_uniform_state_is_zero() {
        let mut state = ReciprocalState::new(4, 0.8).unwrap();
        state.update_ema(&Array2::from_elem((4, 4), 0.25)).unwrap();
        let heat = reciprocal_heatmap(&state, Anchor::Top(0), (2, 2)).unwrap();
        assert!(heat.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heatmap_min_max_normalizes() {
        let mut state = ReciprocalState::new(2, 0.8).unwrap();
        state.update_ema(&array![[0.2f32, 0.1], [0.6, 0.3]]).unwrap();
        let heat = reciprocal_heatmap(&state, Anchor::Bottom(0), (2, 1)).unwrap();
        assert_eq!(heat[[0, 0]], 0.0);
        assert_eq!(heat[[1, 0]], 1.0);
    }
}
