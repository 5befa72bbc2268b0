//! Multi-level knowledge integration: feature adaptors over the raw semantic
//! embeddings, and frequency-adaptive fusion of the history items most
//! similar to the target.
//!
//! Fusion, per example: in training mode each history item survives a
//! Bernoulli draw with keep probability `1 − p(f)` where
//! `p(f) = p_max / (1 + ln(1 + f))` — rare items are dropped most often,
//! dropout-style. Survivors are ranked by cosine similarity against the
//! projected target embedding, the top `k_top` are chosen (ties to the lower
//! index), and their projected embeddings are summed element-wise. Top-k
//! selection is treated as non-differentiable: the backward pass keeps the
//! selected set frozen, so gradients reach exactly the selected items.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layer::{MlpGrads, MlpLayer, MlpTape};
use crate::numerics::matrix::cosine;
use crate::numerics::rng::Rng;

/// The user and item feature adaptors. Both are stacks of dense layers from
/// the semantic dimension to the projection dimension; the item adaptor is
/// shared between the target item and every history item.
#[derive(Debug, Clone)]
pub struct AdaptorSet {
    pub user_adaptor: Vec<MlpLayer>,
    pub item_adaptor: Vec<MlpLayer>,
}

impl AdaptorSet {
    /// Single ReLU layer per side, Xavier initialized.
    pub fn new(d_sem: usize, d_proj: usize, rng: &mut Rng) -> Self {
        AdaptorSet {
            user_adaptor: vec![MlpLayer::xavier(
                d_proj,
                d_sem,
                crate::numerics::layer::Activation::ReLU,
                rng,
            )],
            item_adaptor: vec![MlpLayer::xavier(
                d_proj,
                d_sem,
                crate::numerics::layer::Activation::ReLU,
                rng,
            )],
        }
    }

    pub fn d_proj(&self) -> usize {
        self.item_adaptor.last().map_or(0, |l| l.d_out())
    }
}

/// Runs a layer stack, returning the output and per-layer tapes.
pub fn stack_forward(layers: &[MlpLayer], x: &[f64]) -> Result<(Vec<f64>, Vec<MlpTape>)> {
    let mut tapes = Vec::with_capacity(layers.len());
    let mut cur = x.to_vec();
    for layer in layers {
        let (out, tape) = layer.forward(&cur)?;
        tapes.push(tape);
        cur = out;
    }
    Ok((cur, tapes))
}

/// Backward through a layer stack; returns the input gradient and one grad
/// struct per layer (same order as the stack).
pub fn stack_backward(
    layers: &[MlpLayer],
    tapes: &[MlpTape],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<MlpGrads>)> {
    if tapes.len() != layers.len() {
        return Err(Error::LengthMismatch {
            op: "stack_backward (stale tape)",
            expected: layers.len(),
            got: tapes.len(),
        });
    }
    let mut grads: Vec<Option<MlpGrads>> = (0..layers.len()).map(|_| None).collect();
    let mut g = upstream.to_vec();
    for (i, (layer, tape)) in layers.iter().zip(tapes).enumerate().rev() {
        let (dx, lg) = layer.backward(tape, &g)?;
        grads[i] = Some(lg);
        g = dx;
    }
    Ok((g, grads.into_iter().map(|o| o.unwrap()).collect()))
}

/// Projected embeddings and the tapes needed for backward.
#[derive(Debug)]
pub struct Projection {
    pub user: Vec<f64>,
    pub target: Vec<f64>,
    pub history: Vec<Vec<f64>>,
    pub user_tapes: Vec<MlpTape>,
    pub target_tapes: Vec<MlpTape>,
    pub history_tapes: Vec<Vec<MlpTape>>,
}

/// Applies the adaptors: the user adaptor to the user embedding, the shared
/// item adaptor to the target and every history embedding.
pub fn project(
    adaptors: &AdaptorSet,
    e_user: &[f64],
    e_target: &[f64],
    history: &[Vec<f64>],
) -> Result<Projection> {
    let (user, user_tapes) = stack_forward(&adaptors.user_adaptor, e_user)?;
    let (target, target_tapes) = stack_forward(&adaptors.item_adaptor, e_target)?;
    let mut hist = Vec::with_capacity(history.len());
    let mut hist_tapes = Vec::with_capacity(history.len());
    for e in history {
        let (h, t) = stack_forward(&adaptors.item_adaptor, e)?;
        hist.push(h);
        hist_tapes.push(t);
    }
    Ok(Projection {
        user,
        target,
        history: hist,
        user_tapes,
        target_tapes,
        history_tapes: hist_tapes,
    })
}

/// Per-item masking probability: `p_max / (1 + ln(1 + frequency))`.
/// Strictly decreasing in frequency with `p(0) = p_max`.
pub fn mask_probability(frequency: u64, p_max: f64) -> f64 {
    p_max / (1.0 + (1.0 + frequency as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub k_top: usize,
    /// Masking probability ceiling in [0, 1].
    pub p_max: f64,
    /// Masking happens only in training mode.
    pub train_mode: bool,
}

impl FusionConfig {
    pub fn inference(k_top: usize) -> Self {
        FusionConfig {
            k_top,
            p_max: 0.0,
            train_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_top == 0 {
            return Err(Error::InvalidConfig("fusion.k_top must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::InvalidConfig(format!(
                "fusion.p_max {} outside [0, 1]",
                self.p_max
            )));
        }
        Ok(())
    }
}

/// Recorded keep/drop decisions; replaying them reproduces the fused output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDecision {
    pub keep: Vec<bool>,
    pub probs: Vec<f64>,
}

/// Everything fusion produced for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// Element-wise sum of the selected projected embeddings.
    pub e_item: Vec<f64>,
    pub mask: MaskDecision,
    /// Selected history indices, best similarity first.
    pub selected: Vec<usize>,
    /// True when no candidate survived (output is the zero vector).
    pub empty: bool,
}

/// Orders surviving candidate indices by (similarity desc, index asc).
fn rank_candidates(e_target: &[f64], history: &[Vec<f64>], keep: &[bool]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = Vec::new();
    for (i, e) in history.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        if let Some(sim) = cosine(e_target, e) {
            ranked.push((i, sim));
        }
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

/// Frequency-adaptive relevant-items fusion over projected embeddings.
///
/// `frequencies[i]` is the exposure count of history item `i`. In training
/// mode `rng` must be supplied for the mask draws; at inference every item
/// is kept and the call is a pure function. Zero-norm candidates are
/// excluded (cosine would be undefined); if nothing survives — including an
/// empty history or a zero-norm target — the result is a zero vector with
/// the `empty` flag set.
pub fn fuse_relevant_items(
    e_target: &[f64],
    history: &[Vec<f64>],
    frequencies: &[u64],
    cfg: &FusionConfig,
    mut rng: Option<&mut Rng>,
) -> Result<FusionOutput> {
    cfg.validate()?;
    if history.len() != frequencies.len() {
        return Err(Error::LengthMismatch {
            op: "fuse_relevant_items",
            expected: history.len(),
            got: frequencies.len(),
        });
    }
    for e in history {
        if e.len() != e_target.len() {
            return Err(Error::LengthMismatch {
                op: "fuse_relevant_items",
                expected: e_target.len(),
                got: e.len(),
            });
        }
    }
    let l = history.len();
    let mut probs = Vec::with_capacity(l);
    let mut keep = Vec::with_capacity(l);
    for &f in frequencies {
        let p = if cfg.train_mode {
            mask_probability(f, cfg.p_max)
        } else {
            0.0
        };
        let kept = if cfg.train_mode {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                Error::InvalidConfig("train-mode fusion requires an rng for masking".into())
            })?;
            !rng.bernoulli(p)
        } else {
            true
        };
        probs.push(p);
        keep.push(kept);
    }

    let ranked = rank_candidates(e_target, history, &keep);
    let selected: Vec<usize> = ranked.iter().take(cfg.k_top).map(|(i, _)| *i).collect();
    let dim = e_target.len();
    let mut e_item = vec![0.0; dim];
    for &i in &selected {
        for (acc, v) in e_item.iter_mut().zip(&history[i]) {
            *acc += v;
        }
    }
    Ok(FusionOutput {
        e_item,
        empty: selected.is_empty(),
        selected,
        mask: MaskDecision { keep, probs },
    })
}

/// Backward through the fused sum with the selection frozen
/// (straight-through top-k): selected items receive the upstream gradient
/// unchanged, unselected items and the target receive zero.
pub fn fusion_backward(
    output: &FusionOutput,
    history_len: usize,
    upstream: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d_target = vec![0.0; upstream.len()];
    let mut d_history = vec![vec![0.0; upstream.len()]; history_len];
    for &i in &output.selected {
        d_history[i].copy_from_slice(upstream);
    }
    (d_target, d_history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layer::Activation;

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    fn vec_from_sim(sim: f64) -> Vec<f64> {
        // Vector whose cosine against [1, 0] is exactly `sim`.
        vec![sim, (1.0 - sim * sim).sqrt()]
    }

    #[test]
    fn identity_adaptors_pass_through() {
        let adaptors = AdaptorSet {
            user_adaptor: vec![MlpLayer::identity(3)],
            item_adaptor: vec![MlpLayer::identity(3)],
        };
        let e_u = vec![0.1, -0.2, 0.3];
        let e_t = vec![1.0, 2.0, 3.0];
        let hist = vec![vec![0.5, 0.5, 0.5]];
        let p = project(&adaptors, &e_u, &e_t, &hist).unwrap();
        assert_eq!(p.user, e_u);
        assert_eq!(p.target, e_t);
        assert_eq!(p.history, hist);
    }

    #[test]
    fn empty_history_still_projects_user_and_target() {
        let mut rng = Rng::from_seed(1);
        let adaptors = AdaptorSet::new(4, 3, &mut rng);
        let p = project(&adaptors, &[0.1; 4], &[0.2; 4], &[]).unwrap();
        assert!(p.history.is_empty());
        assert_eq!(p.user.len(), 3);
        assert_eq!(p.target.len(), 3);
    }

    #[test]
    fn projection_matches_standalone_forward_oracle() {
        let mut rng = Rng::from_seed(2);
        let adaptors = AdaptorSet::new(5, 4, &mut rng);
        let e_u: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let e_t: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hist: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let p = project(&adaptors, &e_u, &e_t, &hist).unwrap();
        let (u_oracle, _) = adaptors.user_adaptor[0].forward(&e_u).unwrap();
        assert_eq!(p.user, u_oracle);
        let (t_oracle, _) = adaptors.item_adaptor[0].forward(&e_t).unwrap();
        assert_eq!(p.target, t_oracle);
        for (h, e) in p.history.iter().zip(&hist) {
            let (o, _) = adaptors.item_adaptor[0].forward(e).unwrap();
            assert_eq!(*h, o);
        }
    }

    #[test]
    fn mask_probability_boundary_and_closed_form() {
        assert_eq!(mask_probability(0, 0.5), 0.5);
        // At f = e − 1 the denominator is exactly 2.
        let f = std::f64::consts::E - 1.0;
        let p = 0.5 / (1.0 + (1.0 + f).ln());
        assert!((p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mask_probability_is_strictly_decreasing() {
        let mut prev = mask_probability(0, 0.5);
        for f in 1..=100u64 {
            let p = mask_probability(f, 0.5);
            assert!(p < prev, "p({f}) = {p} not below previous {prev}");
            prev = p;
        }
        let mut prev = mask_probability(100, 0.5);
        for f in [1_000u64, 10_000, 100_000, 1_000_000] {
            let p = mask_probability(f, 0.5);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn single_item_with_large_k_is_that_item() {
        let e_t = vec![1.0, 0.0];
        let hist = vec![vec![0.6, 0.8]];
        let out =
            fuse_relevant_items(&e_t, &hist, &[3], &FusionConfig::inference(2), None).unwrap();
        assert_eq!(out.e_item, hist[0]);
        assert_eq!(out.selected, vec![0]);
        assert!(!out.empty);
    }

    #[test]
    fn hand_ranked_top2_picks_indices_0_and_3() {
        let e_t = vec![1.0, 0.0];
        let hist: Vec<Vec<f64>> = [0.9, 0.1, 0.5, 0.7]
            .iter()
            .map(|&s| vec_from_sim(s))
            .collect();
        let out =
            fuse_relevant_items(&e_t, &hist, &[1, 1, 1, 1], &FusionConfig::inference(2), None)
                .unwrap();
        assert_eq!(out.selected, vec![0, 3]);
        let expect: Vec<f64> = hist[0].iter().zip(&hist[3]).map(|(a, b)| a + b).collect();
        assert_eq!(out.e_item, expect);
    }

    #[test]
    fn all_masked_yields_zero_vector_and_flag() {
        // p_max = 1 and frequency 0 gives p = 1: every draw masks.
        let cfg = FusionConfig {
            k_top: 2,
            p_max: 1.0,
            train_mode: true,
        };
        let mut rng = Rng::from_seed(3);
        let e_t = vec![1.0, 0.0];
        let hist = vec![vec![0.5, 0.5], vec![0.7, 0.1]];
        let out = fuse_relevant_items(&e_t, &hist, &[0, 0], &cfg, Some(&mut rng)).unwrap();
        assert!(out.empty);
        assert_eq!(out.e_item, vec![0.0, 0.0]);
        assert!(out.selected.is_empty());
        assert_eq!(out.mask.keep, vec![false, false]);
    }

    #[test]
    fn identical_candidate_has_maximal_similarity() {
        let e_t = vec![0.3, 0.4];
        let hist = vec![vec![0.1, -0.9], e_t.clone(), vec![0.9, 0.0]];
        let out = fuse_relevant_items(&e_t, &hist, &[1, 1, 1], &FusionConfig::inference(1), None)
            .unwrap();
        assert_eq!(out.selected, vec![1]);
    }

    #[test]
    fn zero_norm_candidates_are_excluded_not_nan() {
        let e_t = vec![1.0, 0.0];
        let hist = vec![vec![0.0, 0.0], vec![0.5, 0.5]];
        let out =
            fuse_relevant_items(&e_t, &hist, &[1, 1], &FusionConfig::inference(2), None).unwrap();
        assert_eq!(out.selected, vec![1]);
        assert!(out.e_item.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_norm_target_gives_empty_selection() {
        let out = fuse_relevant_items(
            &[0.0, 0.0],
            &[vec![1.0, 0.0]],
            &[1],
            &FusionConfig::inference(1),
            None,
        )
        .unwrap();
        assert!(out.empty);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let r = fuse_relevant_items(
            &[1.0, 0.0],
            &[vec![1.0, 0.0, 0.0]],
            &[1],
            &FusionConfig::inference(1),
            None,
        );
        assert!(r.is_err());
        let r = fuse_relevant_items(
            &[1.0, 0.0],
            &[vec![1.0, 0.0]],
            &[1, 2],
            &FusionConfig::inference(1),
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn selection_matches_exhaustive_sort_oracle() {
        let mut rng = Rng::from_seed(4);
        for _ in 0..1000 {
            let l = 1 + rng.below(10) as usize;
            let dim = 2 + rng.below(4) as usize;
            let k = 1 + rng.below(5) as usize;
            let e_t: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let hist: Vec<Vec<f64>> = (0..l)
                .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let freqs: Vec<u64> = (0..l).map(|_| rng.below(100)).collect();
            let out = fuse_relevant_items(&e_t, &hist, &freqs, &FusionConfig::inference(k), None)
                .unwrap();
            // Oracle: full sort of all defined similarities.
            let mut oracle: Vec<(usize, f64)> = hist
                .iter()
                .enumerate()
                .filter_map(|(i, e)| cosine(&e_t, e).map(|s| (i, s)))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expect: Vec<usize> = oracle.iter().take(k).map(|(i, _)| *i).collect();
            assert_eq!(out.selected, expect);
            let mut sum = vec![0.0; dim];
            for &i in &expect {
                for (a, b) in sum.iter_mut().zip(&hist[i]) {
                    *a += b;
                }
            }
            assert_eq!(out.e_item, sum);
        }
    }

    #[test]
    fn ranking_is_scale_invariant() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..50 {
            let e_t: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let hist: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let freqs = vec![1u64; 6];
            let base = fuse_relevant_items(&e_t, &hist, &freqs, &FusionConfig::inference(3), None)
                .unwrap();
            let scale = rng.uniform(0.1, 7.0);
            let scaled: Vec<Vec<f64>> = hist
                .iter()
                .map(|e| e.iter().map(|v| v * scale).collect())
                .collect();
            let out =
                fuse_relevant_items(&e_t, &scaled, &freqs, &FusionConfig::inference(3), None)
                    .unwrap();
            let mut a = base.selected.clone();
            let mut b = out.selected.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn permutation_equivariance_of_selection() {
        let mut rng = Rng::from_seed(6);
        // Distinct similarities by construction (no tie cases).
        let e_t = vec![1.0, 0.0];
        let sims = [0.95, 0.6, 0.3, -0.2, 0.8];
        let hist: Vec<Vec<f64>> = sims.iter().map(|&s| vec_from_sim(s)).collect();
        let freqs = vec![1u64; 5];
        let base =
            fuse_relevant_items(&e_t, &hist, &freqs, &FusionConfig::inference(2), None).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        rng.shuffle(&mut perm);
        let hist_p: Vec<Vec<f64>> = perm.iter().map(|&i| hist[i].clone()).collect();
        let out = fuse_relevant_items(&e_t, &hist_p, &freqs, &FusionConfig::inference(2), None)
            .unwrap();
        // Selected indices map through the permutation.
        let mapped: Vec<usize> = out.selected.iter().map(|&i| perm[i]).collect();
        assert_eq!(mapped, base.selected);
        // The fused sum is order-free.
        for (a, b) in base.e_item.iter().zip(&out.e_item) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_mode_is_pure() {
        let e_t = vec![0.2, 0.9];
        let hist = vec![unit(0.1), unit(1.2), unit(2.2)];
        let freqs = vec![5, 0, 99];
        let a =
            fuse_relevant_items(&e_t, &hist, &freqs, &FusionConfig::inference(2), None).unwrap();
        let b =
            fuse_relevant_items(&e_t, &hist, &freqs, &FusionConfig::inference(2), None).unwrap();
        assert_eq!(a, b);
        assert!(a.mask.keep.iter().all(|&k| k));
    }

    #[test]
    fn empirical_mask_rate_matches_probability() {
        let cfg = FusionConfig {
            k_top: 1,
            p_max: 0.5,
            train_mode: true,
        };
        let e_t = vec![1.0, 0.0];
        let hist = vec![unit(0.3), unit(0.6), unit(0.9)];
        let freqs = [0u64, 7, 1000];
        let n = 10_000;
        let mut dropped = [0usize; 3];
        let base = Rng::from_seed(7);
        for rep in 0..n {
            let mut rng = base.derive(rep as u64);
            let out = fuse_relevant_items(&e_t, &hist, &freqs, &cfg, Some(&mut rng)).unwrap();
            for (i, &kept) in out.mask.keep.iter().enumerate() {
                if !kept {
                    dropped[i] += 1;
                }
            }
        }
        for (i, &f) in freqs.iter().enumerate() {
            let expect = mask_probability(f, 0.5);
            let got = dropped[i] as f64 / n as f64;
            assert!(
                (got - expect).abs() < 0.02,
                "item {i}: rate {got} vs p {expect}"
            );
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let e_t = vec![1.0, 0.0];
        let hist = vec![unit(0.2), unit(0.4)];
        let out =
            fuse_relevant_items(&e_t, &hist, &[1, 1], &FusionConfig::inference(1), None).unwrap();
        let (dt, dh) = fusion_backward(&out, 2, &[0.0, 0.0]);
        assert!(dt.iter().all(|&v| v == 0.0));
        assert!(dh.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_selection_is_identity() {
        let e_t = vec![1.0, 0.0];
        let hist = vec![unit(0.2)];
        let out =
            fuse_relevant_items(&e_t, &hist, &[1], &FusionConfig::inference(1), None).unwrap();
        let upstream = vec![0.3, -0.7];
        let (_, dh) = fusion_backward(&out, 1, &upstream);
        assert_eq!(dh[0], upstream);
    }

    #[test]
    fn backward_matches_finite_differences_with_frozen_selection() {
        let mut rng = Rng::from_seed(8);
        let dim = 3;
        let e_t: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hist: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let freqs = vec![2u64; 5];
        let cfg = FusionConfig::inference(2);
        let out = fuse_relevant_items(&e_t, &hist, &freqs, &cfg, None).unwrap();
        let c: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, dh) = fusion_backward(&out, 5, &c);

        // Loss = c · e_item with the selection frozen to `out.selected`.
        let loss_frozen = |hist: &[Vec<f64>]| -> f64 {
            let mut e = vec![0.0; dim];
            for &i in &out.selected {
                for (a, b) in e.iter_mut().zip(&hist[i]) {
                    *a += b;
                }
            }
            e.iter().zip(&c).map(|(x, y)| x * y).sum()
        };
        let h = 1e-6;
        for i in 0..5 {
            for d in 0..dim {
                let mut plus = hist.clone();
                plus[i][d] += h;
                let mut minus = hist.clone();
                minus[i][d] -= h;
                let numeric = (loss_frozen(&plus) - loss_frozen(&minus)) / (2.0 * h);
                assert!(
                    (numeric - dh[i][d]).abs() < 1e-6,
                    "history {i} dim {d}: {numeric} vs {}",
                    dh[i][d]
                );
            }
        }
    }

    #[test]
    fn adaptor_stack_backward_matches_finite_differences() {
        let mut rng = Rng::from_seed(9);
        let layers = vec![
            MlpLayer::xavier(4, 5, Activation::ReLU, &mut rng),
            MlpLayer::xavier(3, 4, Activation::Identity, &mut rng),
        ];
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(0.2, 1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, tapes) = stack_forward(&layers, &x).unwrap();
        let (dx, grads) = stack_backward(&layers, &tapes, &c).unwrap();

        let mut params: Vec<f64> = Vec::new();
        let mut analytic: Vec<f64> = Vec::new();
        for (l, g) in layers.iter().zip(&grads) {
            params.extend_from_slice(l.weight.as_slice());
            params.extend_from_slice(&l.bias);
            analytic.extend_from_slice(g.d_weight.as_slice());
            analytic.extend_from_slice(&g.d_bias);
        }
        let err = crate::numerics::grad_check(&params, &analytic, 1e-6, |p| {
            let mut ls = layers.clone();
            let mut off = 0;
            for l in &mut ls {
                let nw = l.weight.as_slice().len();
                l.weight.as_mut_slice().copy_from_slice(&p[off..off + nw]);
                off += nw;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&p[off..off + nb]);
                off += nb;
            }
            let (y, _) = stack_forward(&ls, &x)?;
            Ok(y.iter().zip(&c).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(err < 1e-4, "stack err {err}");

        let err = crate::numerics::grad_check(&x, &dx, 1e-6, |xp| {
            let (y, _) = stack_forward(&layers, xp)?;
            Ok(y.iter().zip(&c).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(err < 1e-4, "input err {err}");
    }

    #[test]
    fn union_of_candidate_sets_matches_brute_force_topk() {
        let mut rng = Rng::from_seed(10);
        let e_t: Vec<f64> = vec![0.9, -0.4, 0.2];
        let part_a: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let part_b: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let mut union = part_a.clone();
        union.extend(part_b.clone());
        let freqs = vec![1u64; union.len()];
        let out = fuse_relevant_items(&e_t, &union, &freqs, &FusionConfig::inference(3), None)
            .unwrap();
        let mut oracle: Vec<(usize, f64)> = union
            .iter()
            .enumerate()
            .filter_map(|(i, e)| cosine(&e_t, e).map(|s| (i, s)))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut expect = vec![0.0; 3];
        for (i, _) in oracle.iter().take(3) {
            for (a, b) in expect.iter_mut().zip(&union[*i]) {
                *a += b;
            }
        }
        assert_eq!(out.e_item, expect);
    }

    #[test]
    fn mask_decision_serializes_for_replay() {
        let m = MaskDecision {
            keep: vec![true, false],
            probs: vec![0.1, 0.5],
        };
        let text = toml::to_string(&m).unwrap();
        let back: MaskDecision = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
