//! Frozen surrogates for the vision foundation model and the text encoder.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::textpool::TextPool;
use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};
use crate::rng;

/// Patch-index rectangle, rows `row0..row1` and columns `col0..col1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn is_empty(&self) -> bool {
        self.row1 <= self.row0 || self.col1 <= self.col0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.row1 - self.row0) * (self.col1 - self.col0)
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    /// Flattened token indices inside the box for a `grid x grid` layout.
    pub fn token_indices(&self, grid: usize) -> Vec<usize> {
        (self.row0..self.row1)
            .flat_map(|r| (self.col0..self.col1).map(move |c| r * grid + c))
            .collect()
    }
}

/// Fixed orthogonal map applied to every patch feature.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    transform: Tensor,
}

impl VisionEncoder {
    pub fn new(seed: u64, d_v: usize, identity: bool) -> Self {
        if identity {
            return Self {
                transform: Tensor::identity(d_v),
            };
        }
        let mut rng = rng::stream(seed, "vision-encoder");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d_v);
        while rows.len() < d_v {
            let mut v = rng::gaussian_vec(&mut rng, d_v, 1.0);
            // Two Gram-Schmidt passes keep the basis orthogonal to roundoff.
            for _ in 0..2 {
                for r in &rows {
                    let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        Self {
            transform: Tensor::from_rows(&rows).expect("square"),
        }
    }

    pub fn dim(&self) -> usize {
        self.transform.rows()
    }

    /// `patches` is `M x d_v`; returns the encoded `M x d_v` tokens.
    pub fn encode(&self, patches: &Tensor) -> Result<Tensor> {
        patches.matmul(&self.transform.transpose())
    }

    /// Mean of the encoded tokens inside `bbox`.
    pub fn crop_and_pool(&self, patches: &Tensor, grid: usize, bbox: &BBox) -> Result<Vec<f64>> {
        let encoded = self.encode(patches)?;
        pool_tokens(&encoded, grid, bbox)
    }
}

/// Average of the rows of `tokens` whose grid cell lies inside `bbox`.
pub fn pool_tokens(tokens: &Tensor, grid: usize, bbox: &BBox) -> Result<Vec<f64>> {
    if bbox.is_empty() {
        return Err(Error::DegenerateBox(format!("{bbox:?} covers no patches")));
    }
    if bbox.row1 > grid || bbox.col1 > grid {
        return Err(Error::DegenerateBox(format!(
            "{bbox:?} exceeds a {grid}x{grid} grid"
        )));
    }
    let idx = bbox.token_indices(grid);
    let mut out = vec![0.0; tokens.cols()];
    for &i in &idx {
        out.iter_mut().zip(tokens.row(i)).for_each(|(o, v)| *o += v);
    }
    let n = idx.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Class-anchored bag-of-words text encoder.
///
/// A token that occurs in exactly one class's pool gets that class's anchor
/// direction plus token-specific noise; shared and unseen tokens get noise
/// only. A phrase is the normalized mean of its token rows.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
    anchored: BTreeMap<String, Vec<f64>>,
}

const TOKEN_NOISE: f64 = 0.8;

impl TextEncoder {
    pub fn new(pool: &TextPool, seed: u64, dim: usize) -> Self {
        let mut anchor_rng = rng::stream(seed, "text-anchors");
        let anchors: Vec<Vec<f64>> = pool
            .classes
            .iter()
            .map(|_| {
                let mut v = rng::gaussian_vec(&mut anchor_rng, dim, 1.0);
                let n = norm(&v);
                v.iter_mut().for_each(|a| *a /= n);
                v
            })
            .collect();

        let mut owners: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (c, class) in pool.classes.iter().enumerate() {
            for phrase in class.descriptions() {
                for tok in tokens(phrase) {
                    owners.entry(tok).or_default().insert(c);
                }
            }
        }
        let mut enc = Self {
            seed,
            dim,
            anchored: BTreeMap::new(),
        };
        for (tok, classes) in owners {
            if classes.len() == 1 {
                let c = *classes.iter().next().expect("one owner");
                let mut row = enc.noise_row(&tok);
                row.iter_mut().zip(&anchors[c]).for_each(|(r, a)| *r += a);
                enc.anchored.insert(tok, row);
            }
        }
        enc
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn noise_row(&self, token: &str) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &format!("text-token:{token}"));
        rng::gaussian_vec(&mut r, self.dim, TOKEN_NOISE / (self.dim as f64).sqrt())
    }

    fn row(&self, token: &str) -> Vec<f64> {
        self.anchored
            .get(token)
            .cloned()
            .unwrap_or_else(|| self.noise_row(token))
    }

    pub fn encode(&self, phrase: &str) -> Result<Vec<f64>> {
        let toks = tokens(phrase);
        if toks.is_empty() {
            return Err(Error::Contract("cannot encode an empty phrase".into()));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &toks {
            acc.iter_mut().zip(self.row(t)).for_each(|(a, v)| *a += v);
        }
        let n = norm(&acc);
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "phrase {phrase:?} encodes to zero"
            )));
        }
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

fn tokens(phrase: &str) -> Vec<String> {
    phrase.split_whitespace().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    #[test]
    fn identity_encoder_passes_through() {
        let enc = VisionEncoder::new(3, 4, true);
        let x = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        assert_eq!(enc.encode(&x).unwrap(), x);
    }

    #[test]
    fn orthogonal_encoder_preserves_norm() {
        let enc = VisionEncoder::new(11, 16, false);
        let mut r = rng::stream(1, "probe");
        for _ in 0..20 {
            let x = Tensor::matrix(1, 16, rng::gaussian_vec(&mut r, 16, 1.0)).unwrap();
            let y = enc.encode(&x).unwrap();
            assert!((norm(x.data()) - norm(y.data())).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_single_patch_and_empty_box() {
        let tokens = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let one = BBox {
            row0: 1,
            col0: 0,
            row1: 2,
            col1: 1,
        };
        assert_eq!(pool_tokens(&tokens, 2, &one).unwrap(), vec![4.0, 5.0]);
        let all = BBox {
            row0: 0,
            col0: 0,
            row1: 2,
            col1: 2,
        };
        assert_eq!(pool_tokens(&tokens, 2, &all).unwrap(), vec![3.0, 4.0]);
        let empty = BBox {
            row0: 1,
            col0: 1,
            row1: 1,
            col1: 2,
        };
        assert!(matches!(
            pool_tokens(&tokens, 2, &empty),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn pooling_matches_loop_oracle() {
        let mut r = rng::stream(5, "pool");
        let grid = 4;
        let tokens = Tensor::matrix(16, 3, rng::gaussian_vec(&mut r, 48, 1.0)).unwrap();
        let bbox = BBox {
            row0: 1,
            col0: 2,
            row1: 3,
            col1: 4,
        };
        let got = pool_tokens(&tokens, grid, &bbox).unwrap();
        for d in 0..3 {
            let mut s = 0.0;
            for (row, col) in [(1, 2), (1, 3), (2, 2), (2, 3)] {
                s += tokens.row(row * grid + col)[d];
            }
            assert!((got[d] - s / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_encoding_is_unit_and_frozen() {
        let pool = TextPool::for_classes(4);
        let enc = TextEncoder::new(&pool, 9, 24);
        let a = enc.encode("Traffic cone on the road").unwrap();
        let b = enc.encode("Traffic cone on the road").unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert!(enc.encode("   ").is_err());
    }

    #[test]
    fn within_class_phrases_are_closer() {
        let pool = TextPool::for_classes(12);
        let enc = TextEncoder::new(&pool, 2, 32);
        let embedded: Vec<(usize, Vec<f64>)> = pool
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, p)| {
                p.descriptions()
                    .map(move |d| (c, d.to_string()))
                    .collect::<Vec<_>>()
            })
            .map(|(c, d)| (c, enc.encode(&d).unwrap()))
            .collect();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..embedded.len() {
            for j in i + 1..embedded.len() {
                let s = cosine(&embedded[i].1, &embedded[j].1).unwrap();
                if embedded[i].0 == embedded[j].0 {
                    within += s;
                    nw += 1;
                } else {
                    cross += s;
                    nc += 1;
                }
            }
        }
        assert!(within / nw as f64 > cross / nc as f64 + 0.1);
    }
}
