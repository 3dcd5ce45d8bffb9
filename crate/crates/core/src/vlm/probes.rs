use serde::{Deserialize, Serialize};

use super::model::{ForwardOutput, Role, TokenSequence, VlmParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per layer, the head-averaged attention mass that position `pos` puts on
/// the visual prefix. `pos` must be a text position.
pub fn attention_probe(out: &ForwardOutput, seq: &TokenSequence, pos: usize) -> Result<Vec<f64>> {
    if pos >= seq.len() {
        return Err(Error::Contract(format!(
            "probe position {pos} out of range for length {}",
            seq.len()
        )));
    }
    if seq.roles()[pos] == Role::Visual {
        return Err(Error::Contract(format!(
            "probe position {pos} is a visual position"
        )));
    }
    let m = seq.num_visual();
    Ok(out
        .attention
        .iter()
        .map(|heads| {
            let total: f64 = heads
                .iter()
                .map(|a| a.row(pos)[..m].iter().sum::<f64>())
                .sum();
            total / heads.len() as f64
        })
        .collect())
}

/// Logit-lens reading of one residual-stream vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub layer: usize,
    pub position: usize,
    /// Highest-scoring token ids, best first, lower id first on ties.
    pub top: Vec<usize>,
    /// Number of tokens ranked ahead of the target (0 = argmax).
    pub target_rank: usize,
    pub target_prob: f64,
}

/// Decodes `hidden[layer]` at each position through the final norm and
/// language head. Returns entries in layer-major order.
pub fn logit_lens(
    vlm: &VlmParams,
    hidden: &[Tensor],
    positions: &[usize],
    target: usize,
    top: usize,
) -> Result<Vec<LensEntry>> {
    if target >= vlm.config.vocab {
        return Err(Error::Contract(format!(
            "target token {target} outside the vocabulary"
        )));
    }
    let mut out = Vec::with_capacity(hidden.len() * positions.len());
    for (layer, h) in hidden.iter().enumerate() {
        for &position in positions {
            if position >= h.rows() {
                return Err(Error::Contract(format!(
                    "lens position {position} out of range for length {}",
                    h.rows()
                )));
            }
            let logits = vlm.lens_logits(h.row(position))?;
            out.push(read_logits(&logits, layer, position, target, top));
        }
    }
    Ok(out)
}

fn read_logits(
    logits: &[f64],
    layer: usize,
    position: usize,
    target: usize,
    top: usize,
) -> LensEntry {
    let t = logits[target];
    let target_rank = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top);
    let mut probs = logits.to_vec();
    crate::numerics::softmax_in_place(&mut probs);
    LensEntry {
        layer,
        position,
        top: order,
        target_rank,
        target_prob: probs[target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_counts_strictly_better_and_lower_id_ties() {
        let e = read_logits(&[1.0, 3.0, 3.0, 0.5], 0, 0, 2, 2);
        assert_eq!(e.target_rank, 1);
        assert_eq!(e.top, vec![1, 2]);
        let e = read_logits(&[1.0, 3.0, 3.0, 0.5], 0, 0, 3, 4);
        assert_eq!(e.target_rank, 3);
        assert!(
            (e.target_prob
                - 0.5f64.exp() / [1.0f64, 3.0, 3.0, 0.5].iter().map(|v| v.exp()).sum::<f64>())
            .abs()
                < 1e-12
        );
    }

    use crate::numerics::Tensor;
    use crate::rng;
    use crate::vlm::{argmax, VlmConfig};

    fn vlm(layers: usize, seed: u64) -> VlmParams {
        let config = VlmConfig {
            layers,
            heads: 2,
            dim: 8,
            ff_dim: 8,
            context: 16,
            d_v: 8,
            vocab: 9,
        };
        VlmParams::init(config, seed).unwrap()
    }

    fn visual(m: usize) -> Tensor {
        let mut r = rng::stream(0, "probe-test");
        Tensor::matrix(m, 8, rng::gaussian_vec(&mut r, m * 8, 1.0)).unwrap()
    }

    #[test]
    fn no_visual_tokens_gives_zero_probe() {
        let v = vlm(2, 1);
        let s = TokenSequence::build(0, 4, &[1, 5], &[6, 2]);
        let out = v.forward(None, &s).unwrap();
        assert_eq!(attention_probe(&out, &s, 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_attention_probe_is_visual_share_of_prefix() {
        let mut v = vlm(1, 2);
        v.layers[0].wq = Tensor::zeros(&[8, 8]);
        v.layers[0].wk = Tensor::zeros(&[8, 8]);
        let m = 3;
        let s = TokenSequence::build(m, 4, &[1, 5, 7], &[6, 2]);
        let out = v.forward(Some(&visual(m)), &s).unwrap();
        for pos in [4, 6, 7] {
            let probe = attention_probe(&out, &s, pos).unwrap();
            assert!((probe[0] - m as f64 / (pos + 1) as f64).abs() < 1e-12);
        }
        assert!(attention_probe(&out, &s, 2).is_err());
        assert!(attention_probe(&out, &s, 8).is_err());
    }

    #[test]
    fn probe_matches_direct_summation() {
        let v = vlm(2, 3);
        let s = TokenSequence::build(4, 4, &[1, 5], &[6, 2]);
        let out = v.forward(Some(&visual(4)), &s).unwrap();
        let probe = attention_probe(&out, &s, 6).unwrap();
        for (l, heads) in out.attention.iter().enumerate() {
            let mut total = 0.0;
            for a in heads {
                for j in 0..4 {
                    total += a.row(6)[j];
                }
            }
            assert!((probe[l] - total / heads.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn last_layer_lens_agrees_with_generation() {
        let v = vlm(2, 4);
        let vis = visual(3);
        let prompt = TokenSequence::build(3, 4, &[1, 5, 7], &[]);
        let out = v.forward(Some(&vis), &prompt).unwrap();
        let last = prompt.len() - 1;
        let lens = logit_lens(&v, &out.hidden, &[last], 0, 1).unwrap();
        let final_entry = lens.last().unwrap();
        assert_eq!(final_entry.layer, 2);
        assert_eq!(
            final_entry.top[0],
            argmax(&v.next_token_logits(Some(&vis), &prompt).unwrap())
        );
        let generated = v.generate(Some(&vis), &prompt, 1, usize::MAX).unwrap();
        assert_eq!(generated, vec![final_entry.top[0]]);
    }

    #[test]
    fn lens_grid_matches_per_cell_computation() {
        let v = vlm(2, 5);
        let s = TokenSequence::build(4, 4, &[1, 5], &[6, 2]);
        let out = v.forward(Some(&visual(4)), &s).unwrap();
        let positions = [0, 2, 3];
        let target = 6;
        let grid = logit_lens(&v, &out.hidden, &positions, target, 3).unwrap();
        assert_eq!(grid.len(), 3 * positions.len());
        for (i, e) in grid.iter().enumerate() {
            assert_eq!((e.layer, e.position), (i / 3, positions[i % 3]));
            let logits = v.lens_logits(out.hidden[e.layer].row(e.position)).unwrap();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            assert!((e.target_prob - logits[target].exp() / z).abs() < 1e-12);
            assert!(e.target_rank < 9);
            let better = logits.iter().filter(|&&x| x > logits[target]).count();
            assert_eq!(e.target_rank, better);
        }
        assert!(logit_lens(&v, &out.hidden, &[8], target, 1).is_err());
        assert!(logit_lens(&v, &out.hidden, &[0], 9, 1).is_err());
    }
}
