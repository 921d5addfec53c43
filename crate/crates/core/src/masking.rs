//! Visibility masks over the state and action slots of a window.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-slot visibility. `true` means the token is fed to the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub state_visible: Vec<bool>,
    pub action_visible: Vec<bool>,
}

impl MaskSpec {
    pub fn all_visible(len: usize) -> Self {
        Self {
            state_visible: vec![true; len],
            action_visible: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.state_visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_visible.is_empty()
    }

    pub fn n_visible(&self) -> usize {
        self.state_visible.iter().chain(&self.action_visible).filter(|&&v| v).count()
    }

    pub fn n_masked(&self) -> usize {
        2 * self.len() - self.n_visible()
    }
}

/// Mask ratios to draw from, one per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatioSet(Vec<f64>);

impl RatioSet {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(invalid("ratio set must not be empty"));
        }
        if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(invalid(format!("mask ratio {r} outside [0, 1]")));
        }
        Ok(Self(ratios))
    }

    pub fn fixed(ratio: f64) -> Result<Self> {
        Self::new(vec![ratio])
    }

    pub fn ratios(&self) -> &[f64] {
        &self.0
    }
}

impl Default for RatioSet {
    fn default() -> Self {
        Self(vec![0.15, 0.35, 0.55, 0.75, 0.95])
    }
}

/// `floor(ratio · len + 0.5)`.
pub fn masked_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 + 0.5).floor() as usize).min(len)
}

/// Draws a ratio from the set, then masks that many state slots and, on
/// an independent draw, that many action slots. At least one of the `2L`
/// slots stays visible.
pub fn sample_mask_spec<R: Rng + ?Sized>(len: usize, ratios: &RatioSet, rng: &mut R) -> MaskSpec {
    assert!(len >= 1, "mask length must be ≥ 1");
    let ratio = ratios.0[rng.gen_range(0..ratios.0.len())];
    mask_with_ratio(len, ratio, rng)
}

pub fn mask_with_ratio<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> MaskSpec {
    let n = masked_count(ratio, len);
    let mut spec = MaskSpec::all_visible(len);
    for i in sample(rng, len, n) {
        spec.state_visible[i] = false;
    }
    for i in sample(rng, len, n) {
        spec.action_visible[i] = false;
    }
    if n == len {
        let slot = rng.gen_range(0..2 * len);
        if slot < len {
            spec.state_visible[slot] = true;
        } else {
            spec.action_visible[slot - len] = true;
        }
    }
    spec
}

/// Start state and goal states visible, everything else hidden, all
/// actions hidden.
pub fn goal_mask(len: usize, goal_positions: &[usize]) -> Result<MaskSpec> {
    if goal_positions.is_empty() {
        return Err(invalid("goal mask needs at least one goal"));
    }
    if goal_positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("goal positions must be strictly increasing"));
    }
    if goal_positions[0] == 0 || *goal_positions.last().unwrap() >= len {
        return Err(invalid(format!(
            "goal positions must lie in [1, {}]",
            len.saturating_sub(1)
        )));
    }
    let mut state_visible = vec![false; len];
    state_visible[0] = true;
    for &p in goal_positions {
        state_visible[p] = true;
    }
    Ok(MaskSpec {
        state_visible,
        action_visible: vec![false; len],
    })
}

/// The first `k` state–action pairs visible, the rest hidden.
pub fn prompt_mask(k: usize, len: usize) -> Result<MaskSpec> {
    if k == 0 || k >= len {
        return Err(invalid(format!("prompt length {k} must be in [1, {len})")));
    }
    let visible: Vec<bool> = (0..len).map(|t| t < k).collect();
    Ok(MaskSpec {
        state_visible: visible.clone(),
        action_visible: visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn hidden(v: &[bool]) -> usize {
        v.iter().filter(|&&b| !b).count()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(masked_count(0.15, 20), 3);
        assert_eq!(masked_count(0.95, 64), 61);
        assert_eq!(masked_count(0.5, 3), 2);
        assert_eq!(masked_count(0.25, 2), 1);
        let m = mask_with_ratio(20, 0.15, &mut rng_from(&[0]));
        assert_eq!((hidden(&m.state_visible), hidden(&m.action_visible)), (3, 3));
    }

    #[test]
    fn full_mask_keeps_one_token() {
        let mut rng = rng_from(&[1]);
        for _ in 0..100 {
            let m = mask_with_ratio(4, 1.0, &mut rng);
            assert_eq!(m.n_visible(), 1);
        }
        let m = mask_with_ratio(1, 0.95, &mut rng);
        assert_eq!(m.n_visible(), 1);
    }

    #[test]
    fn ratio_set_validation() {
        assert!(RatioSet::new(vec![]).is_err());
        assert!(RatioSet::new(vec![0.5, 1.2]).is_err());
        assert_eq!(RatioSet::default().ratios(), &[0.15, 0.35, 0.55, 0.75, 0.95]);
    }

    #[test]
    fn ratio_frequencies() {
        // With L = 20 each ratio gives a distinct masked count.
        let set = RatioSet::default();
        let counts_for: Vec<usize> = set.ratios().iter().map(|&r| masked_count(r, 20)).collect();
        let mut freq = vec![0usize; 5];
        let mut rng = rng_from(&[2]);
        let n = 10_000;
        for _ in 0..n {
            let m = sample_mask_spec(20, &set, &mut rng);
            let c = hidden(&m.state_visible);
            freq[counts_for.iter().position(|&k| k == c).unwrap()] += 1;
        }
        for f in freq {
            assert!((f as f64 / n as f64 - 0.2).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn state_and_action_masks_independent() {
        // 2×2 contingency on slot 0 being hidden in each modality, r = 0.5.
        let mut rng = rng_from(&[3]);
        let mut table = [[0f64; 2]; 2];
        let n = 10_000;
        for _ in 0..n {
            let m = mask_with_ratio(10, 0.5, &mut rng);
            table[m.state_visible[0] as usize][m.action_visible[0] as usize] += 1.0;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * cols[j] / n as f64;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        // 99th percentile of χ² with one degree of freedom.
        assert!(chi2 < 6.635, "chi2 = {chi2}");
    }

    #[test]
    fn single_goal_mask() {
        let m = goal_mask(11, &[10]).unwrap();
        let vis: Vec<usize> = (0..11).filter(|&t| m.state_visible[t]).collect();
        assert_eq!(vis, vec![0, 10]);
        assert_eq!(hidden(&m.state_visible), 9);
        assert_eq!(hidden(&m.action_visible), 11);
    }

    #[test]
    fn minimal_goal_mask() {
        let m = goal_mask(2, &[1]).unwrap();
        assert_eq!(m.state_visible, vec![true, true]);
        assert_eq!(m.action_visible, vec![false, false]);
    }

    #[test]
    fn multi_goal_mask() {
        let goals = [12, 25, 37, 48, 59];
        let m = goal_mask(60, &goals).unwrap();
        assert_eq!(m.state_visible.iter().filter(|&&v| v).count(), 6);
        assert!(goals.iter().all(|&g| m.state_visible[g]));
        assert_eq!(m, goal_mask(60, &goals).unwrap());
    }

    #[test]
    fn goal_mask_rejections() {
        assert!(goal_mask(5, &[0, 3]).is_err());
        assert!(goal_mask(5, &[5]).is_err());
        assert!(goal_mask(5, &[]).is_err());
        assert!(goal_mask(5, &[3, 2]).is_err());
    }

    #[test]
    fn prompt_masks() {
        let m = prompt_mask(5, 25).unwrap();
        assert_eq!(m.n_visible(), 10);
        assert_eq!(hidden(&m.state_visible), 20);
        assert_eq!(prompt_mask(24, 25).unwrap().n_masked(), 2);
        assert_eq!(prompt_mask(1, 25).unwrap().n_visible(), 2);
        assert!(prompt_mask(25, 25).is_err());
        assert!(prompt_mask(0, 25).is_err());
    }

    proptest! {
        #[test]
        fn masked_counts_exact(len in 1usize..80, seed in any::<u64>()) {
            let set = RatioSet::default();
            let mut rng = rng_from(&[seed]);
            let m = sample_mask_spec(len, &set, &mut rng);
            prop_assert_eq!(m.len(), len);
            prop_assert!(m.n_visible() >= 1);
            let hs = hidden(&m.state_visible);
            let ha = hidden(&m.action_visible);
            let ok = set.ratios().iter().any(|&r| {
                let n = masked_count(r, len);
                if n == len { hs + ha == 2 * n - 1 } else { hs == n && ha == n }
            });
            prop_assert!(ok);
        }
    }
}
