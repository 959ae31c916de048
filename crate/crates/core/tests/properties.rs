//! Property tests for the attention numerics and metric invariants.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use storyboard_core::attention::{
    build_correspondence, compute_attention, mix_values, morphological_filter, otsu_threshold,
    AttentionView, CorrespondenceMap, ReciprocalState, OTSU_BINS,
};
use storyboard_core::diversity::{bbox_std_score, minmax_normalize, pose_variance_score, PanelAnnotation};
use storyboard_core::error::Error;
use storyboard_core::reciprocal_scores;

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Per-pair reciprocal score, straight from the definition.
fn naive_reciprocal(a_tb: &Array2<f32>, a_bt: &Array2<f32>) -> Array2<f32> {
    let p = a_tb.nrows();
    let mut m = Array2::<f32>::zeros((p, p));
    for u in 0..p {
        for v in 0..p {
            m[[u, v]] = if a_tb[[u, v]] < a_bt[[v, u]] { a_tb[[u, v]] } else { a_bt[[v, u]] };
        }
    }
    m
}

/// Exhaustive Otsu scan recomputing both classes per boundary.
fn otsu_oracle(values: &[f32], bins: usize) -> Option<f64> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if min == max {
        return None;
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[(((v as f64 - min) / width) as usize).min(bins - 1)] += 1;
    }
    let center = |i: usize| min + (i as f64 + 0.5) * width;
    let total = values.len() as f64;
    let mut best = None;
    let mut best_var = 0.0f64;
    for k in 0..bins - 1 {
        let n0: u64 = counts[..=k].iter().sum();
        let n1: u64 = counts[k + 1..].iter().sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: f64 = (0..=k).map(|i| counts[i] as f64 * center(i)).sum();
        let s1: f64 = (k + 1..bins).map(|i| counts[i] as f64 * center(i)).sum();
        let mu0 = s0 / n0 as f64;
        let mu1 = s1 / n1 as f64;
        let var = (n0 as f64 / total) * (n1 as f64 / total) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best = Some(k);
        }
    }
    best.map(|k| min + (k + 1) as f64 * width)
}

/// Opening oracle from plain erosion and dilation over point sets.
fn opening_oracle(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    if h < 3 || w < 3 {
        return mask.clone();
    }
    let offsets = [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1)];
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize;
    let eroded = Array2::from_shape_fn((h, w), |(r, c)| {
        offsets.iter().all(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            inside(rr, cc) && mask[(rr as usize, cc as usize)]
        })
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        offsets.iter().any(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            inside(rr, cc) && eroded[(rr as usize, cc as usize)]
        })
    })
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

fn qk_pair() -> impl Strategy<Value = (Array3<f32>, Array3<f32>)> {
    (1usize..3, 1usize..7, 1usize..5).prop_flat_map(|(heads, n, d)| {
        let len = heads * n * d;
        (
            proptest::collection::vec(-3.0f32..3.0, len..=len),
            proptest::collection::vec(-3.0f32..3.0, len..=len),
        )
            .prop_map(move |(q, k)| {
                (
                    Array3::from_shape_vec((heads, n, d), q).unwrap(),
                    Array3::from_shape_vec((heads, n, d), k).unwrap(),
                )
            })
    })
}

/// A pair of row-stochastic (P, P) matrices.
fn stochastic_pair(max_p: usize) -> impl Strategy<Value = (Array2<f32>, Array2<f32>)> {
    (1usize..=max_p).prop_flat_map(|p| {
        let len = p * p;
        (
            proptest::collection::vec(0.01f32..1.0, len..=len),
            proptest::collection::vec(0.01f32..1.0, len..=len),
        )
            .prop_map(move |(a, b)| (normalize_rows(p, a), normalize_rows(p, b)))
    })
}

fn normalize_rows(p: usize, raw: Vec<f32>) -> Array2<f32> {
    let mut m = Array2::from_shape_vec((p, p), raw).unwrap();
    for mut row in m.rows_mut() {
        let sum: f32 = row.iter().sum();
        row.mapv_inplace(|x| x / sum);
    }
    m
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic((q, k) in qk_pair()) {
        let a = compute_attention(&q, &k).unwrap();
        let (heads, n, _) = q.dim();
        for h in 0..heads {
            for i in 0..n {
                let sum: f64 = (0..n).map(|j| f64::from(a[[h, i, j]])).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
                for j in 0..n {
                    prop_assert!(a[[h, i, j]] > 0.0 && a[[h, i, j]] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn reciprocal_min_dominates_and_matches_loop((a_tb, a_bt) in stochastic_pair(8)) {
        let m = reciprocal_scores(&a_tb, &a_bt).unwrap();
        let oracle = naive_reciprocal(&a_tb, &a_bt);
        prop_assert_eq!(&m, &oracle);
        let p = a_tb.nrows();
        for u in 0..p {
            for v in 0..p {
                prop_assert!(m[[u, v]] <= a_tb[[u, v]]);
                prop_assert!(m[[u, v]] <= a_bt[[v, u]]);
            }
        }
    }

    #[test]
    fn ema_stays_within_observed_bounds(
        momentum in 0.0f32..=1.0,
        lo in 0.0f32..0.5,
        span in 0.0f32..0.5,
        observations in proptest::collection::vec(
            proptest::collection::vec(0.0f32..=1.0, 9..=9), 1..6),
    ) {
        let hi = lo + span;
        let mut state = ReciprocalState::new(3, momentum).unwrap();
        for raw in &observations {
            let m = Array2::from_shape_vec(
                (3, 3),
                raw.iter().map(|&x| (lo + x * (hi - lo)).clamp(lo, hi)).collect(),
            ).unwrap();
            state.update_ema(&m).unwrap();
            for &x in state.m_bar() {
                prop_assert!((lo..=hi).contains(&x), "{x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn otsu_matches_exhaustive_scan(
        values in proptest::collection::vec(0.0f32..1.0, 2..200),
    ) {
        match (otsu_threshold(&values, OTSU_BINS), otsu_oracle(&values, OTSU_BINS)) {
            (Ok(t), Some(o)) => prop_assert_eq!(t, o),
            (Err(Error::DegenerateHistogram), None) => {}
            (got, want) => prop_assert!(false, "mismatch: {:?} vs {:?}", got, want),
        }
    }

    #[test]
    fn opening_is_idempotent_and_matches_oracle(
        h in 3usize..8,
        w in 3usize..8,
        bits in proptest::collection::vec(any::<bool>(), 64..=64),
    ) {
        let mask = Array2::from_shape_fn((h, w), |(r, c)| bits[(r * w + c) % 64]);
        let once = morphological_filter(&mask);
        prop_assert_eq!(&once, &opening_oracle(&mask));
        prop_assert_eq!(&morphological_filter(&once), &once);
    }

    #[test]
    fn correspondence_entries_are_column_argmaxes(
        rows in 1usize..4,
        cols in 1usize..4,
        raw in proptest::collection::vec(0.0f32..1.0, 81..=81),
    ) {
        let p = rows * cols;
        let m = Array2::from_shape_fn((p, p), |(u, v)| raw[(u * p + v) % 81]);
        let mut state = ReciprocalState::new(p, 0.8).unwrap();
        state.update_ema(&m).unwrap();
        let map = build_correspondence(&state, (rows, cols), 0.5).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for entry in map.entries() {
            prop_assert!(seen.insert(entry.bottom), "bottom {} repeated", entry.bottom);
            for u in 0..p {
                prop_assert!(m[[entry.top, entry.bottom]] >= m[[u, entry.bottom]]);
            }
            // Lowest-index tie-break.
            for u in 0..entry.top {
                prop_assert!(m[[u, entry.bottom]] < m[[entry.top, entry.bottom]]);
            }
            prop_assert_eq!(entry.score, m[[entry.top, entry.bottom]]);
        }
    }

    #[test]
    fn mixing_never_touches_attention(
        (q, k) in qk_pair(),
        lambda in 0.0f32..=1.0,
    ) {
        let (heads, n, d) = q.dim();
        if n < 2 {
            return Ok(());
        }
        let p = n / 2;
        let v = Array3::from_shape_fn((heads, n, d), |(h, i, t)| {
            (h * 31 + i * 7 + t) as f32 * 0.1 - 1.0
        });
        let range = (n - 2 * p)..n;
        let mut view = AttentionView::new(q.clone(), k.clone(), v.clone(), range, p).unwrap();

        let before = compute_attention(view.queries(), view.keys()).unwrap();
        let mut state = ReciprocalState::new(p, 0.8).unwrap();
        // Alternating column maxima so Otsu selects a non-empty subset.
        let m = Array2::from_shape_fn((p, p), |(u, vv)| {
            if u == 0 && vv % 2 == 0 { 0.9 } else { 0.05 }
        });
        state.update_ema(&m).unwrap();
        let map = build_correspondence(&state, (1, p), lambda).unwrap();
        prop_assert!(p < 2 || !map.is_empty());
        let mixed = mix_values(view.values(), &map, &view).unwrap();
        view.set_values(mixed).unwrap();
        let after = compute_attention(view.queries(), view.keys()).unwrap();

        let before_bits: Vec<u32> = before.iter().map(|x| x.to_bits()).collect();
        let after_bits: Vec<u32> = after.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(before_bits, after_bits);
    }

    #[test]
    fn lambda_extremes_are_noop_and_replacement(
        (q, k) in qk_pair(),
    ) {
        let (heads, n, d) = q.dim();
        if n < 2 {
            return Ok(());
        }
        let p = n / 2;
        let v = Array3::from_shape_fn((heads, n, d), |(h, i, t)| {
            ((h + 2 * i) as f32).sin() + t as f32
        });
        let range = (n - 2 * p)..n;
        let view = AttentionView::new(q, k, v.clone(), range.clone(), p).unwrap();
        let mut state = ReciprocalState::new(p, 0.8).unwrap();
        let m = Array2::from_shape_fn((p, p), |(u, vv)| {
            if u == (vv + 1) % p && vv % 2 == 0 { 0.9 } else { 0.01 }
        });
        state.update_ema(&m).unwrap();

        let noop_map = build_correspondence(&state, (1, p), 1.0).unwrap();
        prop_assert!(p < 2 || !noop_map.is_empty());
        let unchanged = mix_values(&v, &noop_map, &view).unwrap();
        prop_assert_eq!(&unchanged, &v);

        let replace_map = build_correspondence(&state, (1, p), 0.0).unwrap();
        let replaced = mix_values(&v, &replace_map, &view).unwrap();
        for entry in replace_map.entries() {
            for h in 0..heads {
                for t in 0..d {
                    prop_assert_eq!(
                        replaced[[h, range.start + p + entry.bottom, t]],
                        v[[h, range.start + entry.top, t]]
                    );
                }
            }
        }
    }

    #[test]
    fn minmax_cancels_scale(
        raw in proptest::collection::vec(0.0f64..10.0, 2..20),
        scale in 0.001f64..1000.0,
    ) {
        let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
        let a = minmax_normalize(&raw).unwrap();
        let b = minmax_normalize(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn panel_permutation_preserves_spread_scores(
        boxes in proptest::collection::vec(
            (0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.5, 0.0f64..0.5), 2..8),
    ) {
        let annotations: Vec<PanelAnnotation> = boxes
            .iter()
            .enumerate()
            .map(|(i, &(x0, y0, dx, dy))| PanelAnnotation {
                panel: i,
                bbox: Some([x0, y0, x0 + dx, y0 + dy]),
                keypoints: Some(
                    (0..17).map(|k| [x0 + k as f64 / 17.0 * dx, y0 + dy]).collect(),
                ),
                detected: true,
            })
            .collect();
        let mut reversed = annotations.clone();
        reversed.reverse();
        let a = bbox_std_score(&annotations).unwrap();
        let b = bbox_std_score(&reversed).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let pa = pose_variance_score(&annotations).unwrap();
        let pb = pose_variance_score(&reversed).unwrap();
        prop_assert!((pa - pb).abs() < 1e-12);
    }

    #[test]
    fn widening_one_coordinate_never_lowers_bbox_spread(
        deltas in proptest::collection::vec(-0.2f64..0.2, 3..6),
        widen in 1.0f64..4.0,
    ) {
        // x0 varies around 0.45, other coordinates fixed.
        let build = |scale: f64| -> Vec<PanelAnnotation> {
            deltas
                .iter()
                .enumerate()
                .map(|(i, &d)| PanelAnnotation {
                    panel: i,
                    bbox: Some([0.45 + d * scale * 0.1, 0.1, 0.9, 0.9]),
                    keypoints: None,
                    detected: true,
                })
                .collect()
        };
        let base = bbox_std_score(&build(1.0)).unwrap();
        let wide = bbox_std_score(&build(widen)).unwrap();
        prop_assert!(wide >= base - 1e-12, "{wide} < {base}");
    }
}

/// Exhaustive opening idempotence over every mask on grids up to 3x3.
#[test]
fn opening_idempotent_on_all_small_masks() {
    for h in 1..=3usize {
        for w in 1..=3usize {
            for bits in 0u32..(1 << (h * w)) {
                let mask = Array2::from_shape_fn((h, w), |(r, c)| {
                    bits >> (r * w + c) & 1 == 1
                });
                let once = morphological_filter(&mask);
                assert_eq!(morphological_filter(&once), once, "mask {bits:b} ({h}x{w})");
                assert_eq!(once, opening_oracle(&mask));
            }
        }
    }
}

/// Degenerate column scores produce an empty map and mixing is a no-op.
#[test]
fn degenerate_scores_disable_mixing() {
    let p = 4usize;
    let mut state = ReciprocalState::new(p, 0.8).unwrap();
    state.update_ema(&Array2::from_elem((p, p), 0.3)).unwrap();
    let map = build_correspondence(&state, (2, 2), 0.25).unwrap();
    assert!(map.is_empty());

    let q = Array3::<f32>::zeros((1, 2 * p, 3));
    let v = Array3::from_shape_fn((1, 2 * p, 3), |(_, i, t)| (i + t) as f32);
    let view = AttentionView::new(q.clone(), q.clone(), v.clone(), 0..2 * p, p).unwrap();
    assert_eq!(mix_values(&v, &map, &view).unwrap(), v);
}

/// `CorrespondenceMap` exposes its mixing weight and grid unchanged.
#[test]
fn correspondence_map_carries_its_parameters() {
    let mut state = ReciprocalState::new(4, 0.5).unwrap();
    let mut m = Array2::<f32>::zeros((4, 4));
    m[[1, 2]] = 0.9;
    m[[0, 0]] = 0.8;
    state.update_ema(&m).unwrap();
    let map: CorrespondenceMap = build_correspondence(&state, (2, 2), 0.25).unwrap();
    assert_eq!(map.lambda(), 0.25);
    assert_eq!(map.grid(), (2, 2));
}
