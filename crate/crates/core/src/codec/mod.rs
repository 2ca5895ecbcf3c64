//! Quantile normalization of states and actions, and lossless patch
//! tokenization of frames and inverse-depth maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Image;
use crate::worldsim::{EpisodeRecord, ACTION_ACTIVE, ACTION_DIM, FAR_CLIP, STATE_ACTIVE, STATE_DIM};

pub const NORM_CLIP: f64 = 1.5;
pub const DEGENERATE_WIDTH: f64 = 1e-6;
pub const DEFAULT_PATCH: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("need at least 2 episodes to fit statistics, got {0}")]
    TooFewEpisodes(usize),
    #[error("patch size {patch} does not divide {width}x{height}")]
    PatchGrid { patch: usize, width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Per-dimension statistics fitted over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub state_q01: Vec<f64>,
    pub state_q99: Vec<f64>,
    pub action_scale: Vec<f64>,
    /// `true` where the dimension is supervised.
    pub state_mask: Vec<bool>,
    pub action_mask: Vec<bool>,
}

/// Linear-interpolation quantile of an already sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn quantiles(mut column: Vec<f64>) -> (f64, f64) {
    column.sort_by(f64::total_cmp);
    (quantile(&column, 0.01), quantile(&column, 0.99))
}

impl NormalizerStats {
    /// Fits from raw rows. Returns the stats and human-readable warnings for
    /// supervised dimensions that had to be widened.
    pub fn fit(states: &[[f64; STATE_DIM]], actions: &[[f64; ACTION_DIM]]) -> (Self, Vec<String>) {
        let mut warnings = Vec::new();
        let state_mask: Vec<bool> = (0..STATE_DIM).map(|i| i < STATE_ACTIVE).collect();
        let action_mask: Vec<bool> = (0..ACTION_DIM).map(|i| i < ACTION_ACTIVE).collect();
        let (mut q01s, mut q99s) = (vec![0.0; STATE_DIM], vec![0.0; STATE_DIM]);
        for d in 0..STATE_DIM {
            let (mut lo, mut hi) = quantiles(states.iter().map(|s| s[d]).collect());
            if hi - lo < DEGENERATE_WIDTH {
                if state_mask[d] {
                    warnings.push(format!("state dimension {d} is degenerate at {lo}; widened by {DEGENERATE_WIDTH}"));
                }
                let mid = 0.5 * (lo + hi);
                lo = mid - 0.5 * DEGENERATE_WIDTH;
                hi = mid + 0.5 * DEGENERATE_WIDTH;
            }
            q01s[d] = lo;
            q99s[d] = hi;
        }
        let mut scale = vec![0.0; ACTION_DIM];
        for (d, s) in scale.iter_mut().enumerate() {
            let (lo, hi) = quantiles(actions.iter().map(|a| a[d]).collect());
            *s = lo.abs().max(hi.abs());
            if *s < DEGENERATE_WIDTH {
                if action_mask[d] {
                    warnings.push(format!("action dimension {d} is degenerate; scale widened to {DEGENERATE_WIDTH}"));
                }
                *s = DEGENERATE_WIDTH;
            }
        }
        (Self { state_q01: q01s, state_q99: q99s, action_scale: scale, state_mask, action_mask }, warnings)
    }

    pub fn normalize_state(&self, s: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            if self.state_mask[d] {
                let (lo, hi) = (self.state_q01[d], self.state_q99[d]);
                out[d] = (2.0 * (s[d] - lo) / (hi - lo) - 1.0).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
        out
    }

    pub fn denormalize_state(&self, n: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            if self.state_mask[d] {
                let (lo, hi) = (self.state_q01[d], self.state_q99[d]);
                out[d] = lo + (n[d] + 1.0) * 0.5 * (hi - lo);
            }
        }
        out
    }

    pub fn normalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            if self.action_mask[d] {
                out[d] = (a[d] / self.action_scale[d]).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
        out
    }

    pub fn denormalize_action(&self, n: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            if self.action_mask[d] {
                out[d] = n[d] * self.action_scale[d];
            }
        }
        out
    }
}

/// Fits [`NormalizerStats`] over every state and action of a dataset.
pub fn fit_normalizer(episodes: &[EpisodeRecord]) -> Result<(NormalizerStats, Vec<String>), CodecError> {
    if episodes.len() < 2 {
        return Err(CodecError::TooFewEpisodes(episodes.len()));
    }
    let states: Vec<[f64; STATE_DIM]> = episodes.iter().flat_map(|e| e.states.iter().map(|s| s.map(f64::from))).collect();
    let actions: Vec<[f64; ACTION_DIM]> = episodes.iter().flat_map(|e| e.actions.iter().map(|a| a.map(f64::from))).collect();
    let (stats, warnings) = NormalizerStats::fit(&states, &actions);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((stats, warnings))
}

/// Non-overlapping square patches of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(patch: usize, width: usize, height: usize, channels: usize) -> Result<Self, CodecError> {
        if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
            return Err(CodecError::PatchGrid { patch, width, height });
        }
        Ok(Self { patch, width, height, channels })
    }

    pub fn patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn patches_per_row(&self) -> usize {
        self.width / self.patch
    }

    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Same layout with a different channel count.
    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    /// Flattened `[patches, token_width]` tokens in row-major patch order.
    pub fn tokenize(&self, img: &Image) -> Result<Vec<f64>, CodecError> {
        if img.width != self.width || img.height != self.height || img.channels != self.channels {
            return Err(CodecError::Dimension(format!(
                "image {}x{}x{} vs grid {}x{}x{}",
                img.width, img.height, img.channels, self.width, self.height, self.channels
            )));
        }
        let (p, c, pr) = (self.patch, self.channels, self.patches_per_row());
        let mut out = Vec::with_capacity(img.data.len());
        for t in 0..self.patches() {
            let (py, px) = (t / pr, t % pr);
            for y in 0..p {
                let start = ((py * p + y) * self.width + px * p) * c;
                out.extend_from_slice(&img.data[start..start + p * c]);
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[f64]) -> Result<Image, CodecError> {
        let expected = self.patches() * self.token_width();
        if tokens.len() != expected {
            return Err(CodecError::Dimension(format!("{} token values, expected {expected}", tokens.len())));
        }
        let (p, c, pr) = (self.patch, self.channels, self.patches_per_row());
        let mut data = vec![0.0; expected];
        let row = p * c;
        for t in 0..self.patches() {
            let (py, px) = (t / pr, t % pr);
            for y in 0..p {
                let start = ((py * p + y) * self.width + px * p) * c;
                let src = t * self.token_width() + y * row;
                data[start..start + row].copy_from_slice(&tokens[src..src + row]);
            }
        }
        Image::from_data(self.width, self.height, c, data).map_err(|e| CodecError::Dimension(e.to_string()))
    }
}

/// Unit-interval color to the symmetric model range.
pub fn rgb_to_model(x: f64) -> f64 {
    2.0 * x - 1.0
}

pub fn rgb_from_model(x: f64) -> f64 {
    ((x + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Per-pixel `1/d` in 1/m; pixels at or beyond the far clip map to `1/FAR_CLIP`.
pub fn inverse_depth(depth: &Image) -> Image {
    Image { data: depth.data.iter().map(|&d| 1.0 / d.min(FAR_CLIP)).collect(), ..depth.clone() }
}

/// Inverse of [`inverse_depth`]; non-positive predictions saturate at the far clip.
pub fn depth_from_inverse(inv: &Image) -> Image {
    Image { data: inv.data.iter().map(|&v| if v > 1.0 / FAR_CLIP { 1.0 / v } else { FAR_CLIP }).collect(), ..inv.clone() }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rows<const N: usize>(n: usize, mut f: impl FnMut(usize) -> [f64; N]) -> Vec<[f64; N]> {
        (0..n).map(&mut f).collect()
    }

    fn fitted(seed: u64) -> (NormalizerStats, Vec<[f64; STATE_DIM]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = rows(20_000, |_| {
            let mut s = [0.0; STATE_DIM];
            for x in s.iter_mut().take(STATE_ACTIVE) {
                *x = rng.random_range(-1.0..3.0);
            }
            s
        });
        let actions = rows(20_000, |_| {
            let mut a = [0.0; ACTION_DIM];
            for x in a.iter_mut().take(ACTION_ACTIVE) {
                *x = rng.random_range(-0.02..0.02);
            }
            a
        });
        let (stats, warnings) = NormalizerStats::fit(&states, &actions);
        assert!(warnings.is_empty(), "{warnings:?}");
        (stats, states)
    }

    #[test]
    fn quantiles_match_uniform_oracle() {
        let (stats, states) = fitted(0);
        for d in 0..STATE_ACTIVE {
            // empirical quantile oracle on the generated sample
            let mut col: Vec<f64> = states.iter().map(|s| s[d]).collect();
            col.sort_by(f64::total_cmp);
            let idx = 0.01 * (col.len() - 1) as f64;
            let oracle = col[idx as usize] + idx.fract() * (col[idx as usize + 1] - col[idx as usize]);
            assert_eq!(stats.state_q01[d], oracle);
            assert!((stats.state_q01[d] + 0.96).abs() < 0.02);
            assert!((stats.state_q99[d] - 2.96).abs() < 0.02);
        }
        for d in 0..ACTION_ACTIVE {
            assert!((stats.action_scale[d] - 0.02).abs() < 0.001);
        }
        assert!(stats.state_mask[..STATE_ACTIVE].iter().all(|&m| m) && stats.state_mask[STATE_ACTIVE..].iter().all(|&m| !m));
    }

    #[test]
    fn endpoints_and_zero_action() {
        let (stats, _) = fitted(1);
        let mut lo = [0.0; STATE_DIM];
        let mut hi = [0.0; STATE_DIM];
        lo[..STATE_DIM].copy_from_slice(&stats.state_q01);
        hi[..STATE_DIM].copy_from_slice(&stats.state_q99);
        let (nl, nh) = (stats.normalize_state(&lo), stats.normalize_state(&hi));
        for d in 0..STATE_ACTIVE {
            assert!((nl[d] + 1.0).abs() < 1e-12 && (nh[d] - 1.0).abs() < 1e-12);
        }
        assert_eq!(stats.normalize_action(&[0.0; ACTION_DIM]), [0.0; ACTION_DIM]);
    }

    #[test]
    fn degenerate_dimension_widened_with_warning() {
        let states = rows(10, |i| {
            let mut s = [0.0; STATE_DIM];
            s[0] = i as f64;
            s[1] = 0.5;
            s
        });
        let actions = rows(10, |i| {
            let mut a = [0.0; ACTION_DIM];
            a[0] = i as f64 * 0.001;
            a
        });
        let (stats, warnings) = NormalizerStats::fit(&states, &actions);
        assert!(warnings.iter().any(|w| w.contains("state dimension 1")));
        assert!((stats.state_q99[1] - stats.state_q01[1] - DEGENERATE_WIDTH).abs() < 1e-15);
        // right-arm slots are masked, never warned about
        assert!(!warnings.iter().any(|w| w.contains("dimension 9")));
        assert!(stats.action_scale.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn fit_needs_two_episodes() {
        assert_eq!(fit_normalizer(&[]).unwrap_err(), CodecError::TooFewEpisodes(0));
    }

    #[test]
    fn patch_grid_shapes_and_errors() {
        let g = PatchGrid::new(8, 32, 32, 3).unwrap();
        assert_eq!((g.patches(), g.token_width()), (16, 192));
        assert!(PatchGrid::new(7, 32, 32, 3).is_err());
        assert!(g.tokenize(&Image::new(32, 32, 1)).is_err());
        assert!(g.detokenize(&[0.0; 10]).is_err());
    }

    #[test]
    fn tokens_follow_row_major_patches() {
        let g = PatchGrid::new(2, 4, 4, 1).unwrap();
        let img = Image::from_data(4, 4, 1, (0..16).map(|i| i as f64).collect()).unwrap();
        let t = g.tokenize(&img).unwrap();
        assert_eq!(&t[..8], &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn inverse_depth_values() {
        let d = Image::from_data(3, 1, 1, vec![2.0, 5.0, 9.0]).unwrap();
        let inv = inverse_depth(&d);
        assert_eq!(inv.data, vec![0.5, 0.2, 0.2]);
        assert_eq!(depth_from_inverse(&inv).data, vec![2.0, 5.0, 5.0]);
    }

    proptest! {
        #[test]
        fn tokenize_round_trip_is_bitwise(seed in any::<u64>(), channels in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = PatchGrid::new(8, 32, 16, channels).unwrap();
            let img = Image::from_data(32, 16, channels, (0..32 * 16 * channels).map(|_| rng.random()).collect()).unwrap();
            prop_assert_eq!(g.detokenize(&g.tokenize(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn normalization_round_trip_and_oddness(seed in 0u64..4, v in proptest::collection::vec(0.0f64..1.0, STATE_DIM + ACTION_DIM)) {
            let (stats, _) = fitted(seed);
            let mut s = [0.0; STATE_DIM];
            for d in 0..STATE_ACTIVE {
                s[d] = stats.state_q01[d] + v[d] * (stats.state_q99[d] - stats.state_q01[d]);
            }
            let back = stats.denormalize_state(&stats.normalize_state(&s));
            for d in 0..STATE_DIM {
                prop_assert!((back[d] - s[d]).abs() < 1e-6);
            }
            let mut a = [0.0; ACTION_DIM];
            for d in 0..ACTION_ACTIVE {
                a[d] = (2.0 * v[STATE_DIM + d] - 1.0) * stats.action_scale[d];
            }
            let na = stats.normalize_action(&a);
            prop_assert_eq!(stats.normalize_action(&a.map(|x| -x)), na.map(|x| -x));
            let back = stats.denormalize_action(&na);
            for d in 0..ACTION_DIM {
                prop_assert!((back[d] - a[d]).abs() < 1e-6);
            }
        }
    }
}
